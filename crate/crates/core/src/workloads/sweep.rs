//! Monte Carlo parameter sweep: independent jobs, each estimating the mean
//! recovery at fixed weights from events drawn with replacement.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::catopt::{dot, BondTerms, EventLossTable};
use super::channel::TaskPool;
use super::WorkloadError;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub jobs: usize,
    pub samples_per_job: usize,
    pub seed: u64,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.jobs == 0 || self.samples_per_job == 0 {
            return Err(WorkloadError::InvalidInput(
                "jobs and samples per job must both be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Seed of job `rank`.
    pub fn job_seed(&self, rank: usize) -> u64 {
        self.seed.wrapping_add(rank as u64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    /// Estimates ordered by job rank.
    pub estimates: Vec<f64>,
    pub aggregate: f64,
}

/// One job: mean recovery over `samples` events drawn with replacement.
pub fn sweep_job(table: &EventLossTable, terms: &BondTerms, w: &[f64], seed: u64, samples: usize) -> Result<f64, WorkloadError> {
    if w.len() != table.m {
        return Err(WorkloadError::Dimension {
            expected: table.m,
            got: w.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = table.n();
    let mut total = 0.0;
    for _ in 0..samples {
        total += terms.pay(dot(w, table.row(rng.gen_range(0..n))));
    }
    Ok(total / samples as f64)
}

fn aggregate(estimates: Vec<f64>) -> SweepResult {
    let aggregate = estimates.iter().sum::<f64>() / estimates.len() as f64;
    SweepResult {
        estimates,
        aggregate,
    }
}

/// Run every job in the calling thread.
pub fn sweep_serial(table: &EventLossTable, terms: &BondTerms, w: &[f64], cfg: &SweepConfig) -> Result<SweepResult, WorkloadError> {
    cfg.validate()?;
    let estimates = (0..cfg.jobs)
        .map(|r| sweep_job(table, terms, w, cfg.job_seed(r), cfg.samples_per_job))
        .collect::<Result<_, _>>()?;
    Ok(aggregate(estimates))
}

/// Distribute jobs over a pool; each task payload is the job rank.
pub fn param_sweep(cfg: &SweepConfig, pool: &mut dyn TaskPool) -> Result<SweepResult, WorkloadError> {
    cfg.validate()?;
    let tasks: Vec<String> = (0..cfg.jobs).map(|r| r.to_string()).collect();
    let estimates = pool
        .map(&tasks)?
        .iter()
        .map(|s| {
            s.parse()
                .map_err(|_| WorkloadError::Protocol(format!("estimate `{s}` is not a number")))
        })
        .collect::<Result<_, _>>()?;
    Ok(aggregate(estimates))
}

/// Worker-side handler: job rank in, estimate out.
pub fn sweep_task(table: &EventLossTable, terms: &BondTerms, w: &[f64], cfg: &SweepConfig, payload: &str) -> Result<String, WorkloadError> {
    let rank: usize = payload
        .parse()
        .map_err(|_| WorkloadError::Protocol(format!("bad job rank `{payload}`")))?;
    Ok(sweep_job(table, terms, w, cfg.job_seed(rank), cfg.samples_per_job)?.to_string())
}

pub fn write_estimates(path: &std::path::Path, cfg: &SweepConfig, result: &SweepResult) -> Result<(), WorkloadError> {
    let mut out = csv::Writer::from_path(path)?;
    out.write_record(["job", "seed", "estimate"])?;
    for (r, e) in result.estimates.iter().enumerate() {
        out.write_record([r.to_string(), cfg.job_seed(r).to_string(), e.to_string()])?;
    }
    out.write_record(["aggregate".to_string(), String::new(), result.aggregate.to_string()])?;
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workloads::catopt::{planted_table, PLANTED_TERMS};
    use crate::workloads::channel::InProcess;
    use proptest::prelude::*;

    fn cfg(jobs: usize, samples: usize, seed: u64) -> SweepConfig {
        SweepConfig { jobs, samples_per_job: samples, seed }
    }

    #[test]
    fn single_job_aggregate_is_its_estimate() {
        let (t, w) = planted_table(3, 20, 1);
        let r = sweep_serial(&t, &PLANTED_TERMS, &w, &cfg(1, 500, 5)).unwrap();
        assert_eq!(r.aggregate, r.estimates[0]);
    }

    #[test]
    fn identical_events_have_zero_variance() {
        let row = [40.0, 80.0];
        let t = EventLossTable::new(vec!["a".into(); 6], row.repeat(6), vec![0.0; 6], 2).unwrap();
        let terms = BondTerms::new(10.0, 1000.0).unwrap();
        let w = [0.5, 0.25];
        let r = sweep_serial(&t, &terms, &w, &cfg(4, 1000, 3)).unwrap();
        let exact = terms.pay(dot(&w, &row));
        assert!(r.estimates.iter().all(|&e| e == exact));
    }

    #[test]
    fn invalid_sweeps_are_rejected() {
        let (t, w) = planted_table(2, 5, 1);
        assert!(sweep_serial(&t, &PLANTED_TERMS, &w, &cfg(0, 1, 0)).is_err());
        assert!(sweep_serial(&t, &PLANTED_TERMS, &w, &cfg(1, 0, 0)).is_err());
        assert!(sweep_job(&t, &PLANTED_TERMS, &w[..1], 0, 1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn pooled_jobs_equal_serial_jobs_bitwise(seed in any::<u64>(), jobs in 1usize..10) {
            let (t, w) = planted_table(4, 30, seed);
            let c = cfg(jobs, 200, seed);
            let serial = sweep_serial(&t, &PLANTED_TERMS, &w, &c).unwrap();
            let mut pool = InProcess(|p: &str| sweep_task(&t, &PLANTED_TERMS, &w, &c, p));
            let pooled = param_sweep(&c, &mut pool).unwrap();
            let bits = |r: &SweepResult| r.estimates.iter().map(|e| e.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&serial), bits(&pooled));
            prop_assert_eq!(serial.aggregate.to_bits(), pooled.aggregate.to_bits());
        }
    }
}
