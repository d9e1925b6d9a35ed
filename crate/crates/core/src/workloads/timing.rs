//! Per-phase timing of the create / submit / fetch / terminate workflow.
//!
//! Each phase records wall-clock time and the provider's simulated
//! provisioning time; the reported duration is their sum.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crate::datasync::{self, GatherScope};
use crate::executor::{self, RunOptions};
use crate::platform::Platform;
use crate::resources::{self, CreateCluster, CreateInstance};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    CreateResource,
    SubmitToMaster,
    SubmitToAll,
    FetchFromMaster,
    FetchFromAll,
    Terminate,
}

impl Phase {
    pub const ALL: [Phase; 6] = [
        Phase::CreateResource,
        Phase::SubmitToMaster,
        Phase::SubmitToAll,
        Phase::FetchFromMaster,
        Phase::FetchFromAll,
        Phase::Terminate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::CreateResource => "create_resource",
            Phase::SubmitToMaster => "submit_to_master",
            Phase::SubmitToAll => "submit_to_all",
            Phase::FetchFromMaster => "fetch_from_master",
            Phase::FetchFromAll => "fetch_from_all",
            Phase::Terminate => "terminate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseTiming {
    pub phase: Phase,
    pub wall: Duration,
    pub simulated: Duration,
    /// False for phases that do not apply to the workflow (left at zero).
    pub measured: bool,
}

impl PhaseTiming {
    pub fn total(&self) -> Duration {
        self.wall + self.simulated
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingReport {
    pub rows: Vec<PhaseTiming>,
}

impl Default for TimingReport {
    fn default() -> Self {
        Self {
            rows: Phase::ALL
                .iter()
                .map(|&phase| PhaseTiming {
                    phase,
                    wall: Duration::ZERO,
                    simulated: Duration::ZERO,
                    measured: false,
                })
                .collect(),
        }
    }
}

impl TimingReport {
    pub fn get(&self, phase: Phase) -> &PhaseTiming {
        self.rows.iter().find(|r| r.phase == phase).expect("every phase has a row")
    }

    /// Time `f` against both clocks and record it under `phase`.
    pub fn measure<T>(&mut self, p: &Platform, phase: Phase, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let sim0 = p.provider.simulated_elapsed();
        let wall0 = Instant::now();
        let out = f()?;
        let row = self.rows.iter_mut().find(|r| r.phase == phase).expect("phase row");
        row.wall += wall0.elapsed();
        row.simulated += p.provider.simulated_elapsed().saturating_sub(sim0);
        row.measured = true;
        Ok(out)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,wall_seconds,simulated_seconds,total_seconds,measured\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{}",
                r.phase.name(),
                r.wall.as_secs_f64(),
                r.simulated.as_secs_f64(),
                r.total().as_secs_f64(),
                r.measured
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::fsutil::atomic_write(path, self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Inputs of a timed end-to-end workflow.
#[derive(Debug, Clone)]
pub struct WorkflowSpec {
    /// Name for the instance or cluster created by the workflow.
    pub name: String,
    pub project: PathBuf,
    pub script: String,
    pub runname: String,
    pub instance_type: Option<String>,
    /// Worker processes for cluster runs; one per core when omitted.
    pub processes: Option<usize>,
}

fn run_checked(outcome: executor::RunOutcome) -> Result<()> {
    if outcome.exit_code != 0 {
        return Err(Error::JobFailed(outcome.exit_code));
    }
    Ok(())
}

/// Create an instance, send the project, run, fetch results and terminate.
pub fn timed_instance_workflow(p: &Platform, spec: &WorkflowSpec) -> Result<TimingReport> {
    let mut report = TimingReport::default();
    let name = Some(spec.name.as_str());
    report.measure(p, Phase::CreateResource, || {
        resources::create_instance(
            p,
            &CreateInstance {
                iname: Some(spec.name.clone()),
                instance_type: spec.instance_type.clone(),
                ..Default::default()
            },
        )
    })?;
    let opts = RunOptions {
        projectdir: Some(spec.project.clone()),
        rscript: Some(spec.script.clone()),
        runname: spec.runname.clone(),
        ..Default::default()
    };
    let mut body = || -> Result<()> {
        report.measure(p, Phase::SubmitToMaster, || {
            datasync::send_to_instance(p, name, Some(&spec.project))?;
            run_checked(executor::run_on_instance(p, name, &opts)?)
        })?;
        report.measure(p, Phase::FetchFromMaster, || {
            datasync::get_results_from_instance(p, name, Some(&spec.project), &spec.runname)
        })?;
        Ok(())
    };
    let outcome = body();
    report.measure(p, Phase::Terminate, || resources::terminate_instance(p, name, true))?;
    outcome.map(|_| report)
}

/// The cluster workflow in both variants: project on the master only, then
/// on every node, followed by fetching from the master and from all nodes.
pub fn timed_cluster_workflow(p: &Platform, size: usize, spec: &WorkflowSpec) -> Result<TimingReport> {
    let mut report = TimingReport::default();
    let name = Some(spec.name.as_str());
    report.measure(p, Phase::CreateResource, || {
        resources::create_cluster(
            p,
            &CreateCluster {
                cname: Some(spec.name.clone()),
                csize: Some(size),
                instance_type: spec.instance_type.clone(),
                ..Default::default()
            },
        )
    })?;
    let opts = |suffix: &str| RunOptions {
        projectdir: Some(spec.project.clone()),
        rscript: Some(spec.script.clone()),
        runname: format!("{}{suffix}", spec.runname),
        processes: spec.processes,
        ..Default::default()
    };
    let mut body = || -> Result<()> {
        report.measure(p, Phase::SubmitToMaster, || {
            datasync::send_to_master(p, name, Some(&spec.project))?;
            run_checked(executor::run_on_cluster(p, name, &opts(""))?)
        })?;
        report.measure(p, Phase::SubmitToAll, || {
            let nodes = datasync::send_to_cluster_nodes(p, name, Some(&spec.project))?;
            if let Some(failed) = nodes.into_iter().find(|n| n.outcome.is_err()) {
                return Err(Error::NodeUnreachable {
                    node: failed.node_tag,
                    reason: failed.outcome.unwrap_err().to_string(),
                });
            }
            run_checked(executor::run_on_cluster(p, name, &opts("-all"))?)
        })?;
        report.measure(p, Phase::FetchFromMaster, || {
            datasync::get_results(p, name, Some(&spec.project), &spec.runname, GatherScope::FromMaster)
        })?;
        report.measure(p, Phase::FetchFromAll, || {
            datasync::get_results(p, name, Some(&spec.project), &format!("{}-all", spec.runname), GatherScope::FromAll)
        })?;
        Ok(())
    };
    let outcome = body();
    report.measure(p, Phase::Terminate, || resources::terminate_cluster(p, name, true))?;
    outcome.map(|_| report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_one_row_per_phase() {
        let mut report = TimingReport::default();
        report.rows[0].wall = Duration::from_millis(1500);
        report.rows[0].simulated = Duration::from_secs(180);
        report.rows[0].measured = true;
        let csv = report.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[1], "create_resource,1.500000,180.000000,181.500000,true");
        let names: Vec<_> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(names, Phase::ALL.map(Phase::name));
    }
}
