#![allow(dead_code)]

use std::sync::Arc;

use mph_core::engine::{Behavior, Replica};
use mph_core::hotstuff::{HsConfig, HsReplica};
use mph_core::mph::{MphConfig, MphReplica};
use mph_core::net::sim::{DelayModel, FaultPlan, RunTrace, SimConfig, Simulator, StopAt};
use mph_core::types::{SystemConfig, Time, View, MILLIS};
use mph_core::{HashThreshold, ThresholdScheme};

pub fn behavior(sys: &SystemConfig, faults: &FaultPlan, r: u16) -> Behavior {
    if faults.equivocators.contains(&r) {
        Behavior::Equivocate
    } else {
        let silent = faults.silent_views_of(sys, r);
        if silent.is_empty() {
            Behavior::Honest
        } else {
            Behavior::SilentLeader(silent)
        }
    }
}

pub fn mph_replicas(sys: SystemConfig, faults: &FaultPlan) -> Vec<Box<dyn Replica>> {
    let (scheme, keys) = HashThreshold::generate(sys, 1);
    let scheme: Arc<dyn ThresholdScheme> = Arc::new(scheme);
    keys.into_iter()
        .map(|k| {
            let mut cfg = MphConfig::new(sys);
            cfg.behavior = behavior(&sys, faults, k.index);
            Box::new(MphReplica::new(cfg, scheme.clone(), k)) as Box<dyn Replica>
        })
        .collect()
}

pub fn hs_replicas(sys: SystemConfig, faults: &FaultPlan) -> Vec<Box<dyn Replica>> {
    let (scheme, keys) = HashThreshold::generate(sys, 1);
    let scheme: Arc<dyn ThresholdScheme> = Arc::new(scheme);
    keys.into_iter()
        .map(|k| {
            let mut cfg = HsConfig::new(sys);
            cfg.behavior = behavior(&sys, faults, k.index);
            Box::new(HsReplica::new(cfg, scheme.clone(), k)) as Box<dyn Replica>
        })
        .collect()
}

pub fn uniform(seed: u64, faults: FaultPlan) -> SimConfig {
    SimConfig {
        delta: 20 * MILLIS,
        gst: 0,
        delay: DelayModel::Uniform {
            lo: 5 * MILLIS,
            hi: 15 * MILLIS,
        },
        seed,
        faults,
    }
}

pub fn run(
    replicas: Vec<Box<dyn Replica>>,
    n: usize,
    cfg: SimConfig,
    views: u64,
    until: Time,
) -> RunTrace {
    let sys = SystemConfig::new(n).unwrap();
    let sim = Simulator::new(sys, cfg, replicas).unwrap();
    sim.run(StopAt {
        time: until,
        view: Some(View(views)),
    })
}

/// Every pair of logs must agree on their common prefix.
pub fn assert_prefix_consistent(t: &RunTrace) {
    for a in &t.logs {
        for b in &t.logs {
            let k = a.len().min(b.len());
            assert_eq!(a[..k], b[..k], "logs diverge");
        }
    }
}

pub fn longest(t: &RunTrace) -> usize {
    t.logs.iter().map(|l| l.len()).max().unwrap_or(0)
}
