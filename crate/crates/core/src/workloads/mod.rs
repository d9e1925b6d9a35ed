//! Reference workloads: cat-bond basis-risk optimization with a
//! master-worker genetic algorithm, a Monte Carlo parameter sweep, and the
//! workflow timing report.

pub mod catopt;
pub mod channel;
pub mod ga;
pub mod job;
pub mod sweep;
pub mod timing;

pub use catopt::{basis_risk, recovery, BondTerms, EventLossTable};

/// Result files written into a run directory.
pub const BEST_WEIGHTS_CSV: &str = "best_weights.csv";
pub const HISTORY_CSV: &str = "history.csv";
pub const SWEEP_ESTIMATES_CSV: &str = "sweep_estimates.csv";
pub const TIMING_CSV: &str = "timing.csv";

#[derive(Debug, thiserror::Error)]
pub enum WorkloadError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("worker rank {rank} failed: {message}")]
    Worker { rank: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
