//! Builds replicas for a config, drives the simulator and checks the trace.

use std::collections::BTreeSet;
use std::io;
use std::sync::Arc;

use mph_core::engine::{Behavior, Replica};
use mph_core::hotstuff::{HsConfig, HsReplica};
use mph_core::mph::{MphConfig, MphReplica};
use mph_core::net::sim::{FaultPlan, RunTrace, SimError, Simulator, StopAt};
use mph_core::types::{ReplicaId, SystemConfig, View, MILLIS};
use mph_core::{HashThreshold, ThresholdScheme};
use thiserror::Error;

use crate::checker::{self, Violation};
use crate::config::{ConfigError, ExperimentConfig, Protocol};
use crate::metrics::{self, RunMetrics};
use crate::workload::{live_targets, Poisson};

/// Partial dissemination batches are flushed this often.
pub const FLUSH_EVERY: u64 = 5 * MILLIS;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("invariant violated: {}", .0.first().map(|v| v.to_string()).unwrap_or_default())]
    InvariantViolation(Vec<Violation>),
    #[error("event queue drained before the stop condition")]
    Stalled,
}

pub struct RunOutput {
    pub config: ExperimentConfig,
    pub metrics: RunMetrics,
    pub trace: RunTrace,
}

pub fn behavior(sys: &SystemConfig, faults: &FaultPlan, r: ReplicaId) -> Behavior {
    if faults.equivocators.contains(&r) {
        return Behavior::Equivocate;
    }
    let silent = faults.silent_views_of(sys, r);
    if silent.is_empty() {
        Behavior::Honest
    } else {
        Behavior::SilentLeader(silent)
    }
}

pub fn build_replicas(cfg: &ExperimentConfig, sys: SystemConfig) -> Vec<Box<dyn Replica>> {
    let (scheme, keys) = HashThreshold::generate(sys, cfg.seed);
    let scheme: Arc<dyn ThresholdScheme> = Arc::new(scheme);
    let faults = &cfg.sim.faults;
    keys.into_iter()
        .map(|k| {
            let b = behavior(&sys, faults, k.index);
            let r: Box<dyn Replica> = match cfg.protocol {
                Protocol::Mph => {
                    let mut c = MphConfig::new(sys);
                    c.timeout = cfg.timeout_ms * MILLIS;
                    c.batch_size = cfg.batch_size;
                    c.dissemination_bytes = cfg.dissemination_bytes;
                    c.behavior = b;
                    Box::new(MphReplica::new(c, scheme.clone(), k))
                }
                Protocol::HotStuff => {
                    let mut c = HsConfig::new(sys);
                    c.timeout = cfg.timeout_ms * MILLIS;
                    c.batch_size = cfg.batch_size;
                    c.dissemination_bytes = cfg.dissemination_bytes;
                    c.behavior = b;
                    Box::new(HsReplica::new(c, scheme.clone(), k))
                }
            };
            r
        })
        .collect()
}

/// Runs one experiment. Any safety violation in the trace is an error.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput, RunError> {
    let sys = cfg.validate()?;
    let mut sim = Simulator::new(sys, cfg.sim.clone(), build_replicas(cfg, sys))?;
    let crashed: BTreeSet<ReplicaId> = cfg.sim.faults.crashes.keys().copied().collect();
    let (workload, submitted) = Poisson::new(
        cfg.arrival_rate,
        cfg.payload_bytes,
        live_targets(cfg.n, &crashed),
        cfg.max_time,
        cfg.seed,
    );
    sim.set_workload(Box::new(workload), Some(FLUSH_EVERY));
    let trace = sim.run(StopAt {
        time: cfg.max_time,
        view: Some(View(cfg.views)),
    });
    if trace.stalled {
        return Err(RunError::Stalled);
    }
    let violations = checker::check(&trace, &cfg.sim.faults.faulty(&sys));
    if !violations.is_empty() {
        return Err(RunError::InvariantViolation(violations));
    }
    let metrics = metrics::compute(&trace, &submitted.borrow());
    Ok(RunOutput {
        config: cfg.clone(),
        metrics,
        trace,
    })
}

pub const CSV_HEADER: [&str; 14] = [
    "protocol",
    "n",
    "f",
    "seed",
    "views",
    "tps",
    "latency_mean_ms",
    "latency_p50_ms",
    "latency_p99_ms",
    "blocks_proposed",
    "blocks_committed",
    "rounds",
    "view_changes",
    "authenticators",
];

fn csv_record(o: &RunOutput) -> Vec<String> {
    let c = &o.config;
    let m = &o.metrics;
    vec![
        c.protocol.to_string(),
        c.n.to_string(),
        ((c.n - 1) / 3).to_string(),
        c.seed.to_string(),
        c.views.to_string(),
        format!("{:.3}", m.tps),
        format!("{:.3}", m.latency_mean_ms),
        format!("{:.3}", m.latency_p50_ms),
        format!("{:.3}", m.latency_p99_ms),
        m.blocks_proposed.to_string(),
        m.blocks_committed.to_string(),
        m.rounds_elapsed.to_string(),
        m.view_changes.to_string(),
        m.authenticators_sent.to_string(),
    ]
}

/// Header plus one row per run.
pub fn write_csv<W: io::Write>(out: W, runs: &[RunOutput]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in runs {
        w.write_record(csv_record(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn csv_bytes(runs: &[RunOutput]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_csv(&mut buf, runs).expect("in-memory csv");
    buf
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(protocol: Protocol) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.protocol = protocol;
        c.views = 40;
        c.arrival_rate = 2_000.0;
        c
    }

    #[test]
    fn both_protocols_run_clean() {
        for p in [Protocol::Mph, Protocol::HotStuff] {
            let o = run_experiment(&small(p)).unwrap();
            assert!(o.metrics.blocks_committed > 5, "{p}: {:?}", o.metrics);
            assert!(o.metrics.committed_txs > 0);
            assert_eq!(o.metrics.view_changes, 0);
        }
    }

    #[test]
    fn csv_shape() {
        let o = run_experiment(&small(Protocol::Mph)).unwrap();
        let text = String::from_utf8(csv_bytes(&[o])).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER.join(","));
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row.len(), 14);
        assert_eq!(&row[..5], ["mph", "4", "1", "1", "40"]);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut c = small(Protocol::Mph);
        c.sim.faults.crashes = [(0, 0), (1, 0)].into_iter().collect();
        assert!(matches!(run_experiment(&c), Err(RunError::Config(_))));
    }
}
