//! Named experiment shapes, scaled to run on one machine.

use std::collections::BTreeSet;

use mph_core::net::sim::DelayModel;
use mph_core::types::{View, MILLIS};
use thiserror::Error;

use crate::config::ExperimentConfig;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown scenario {0:?}")]
pub struct UnknownScenario(pub String);

pub const NAMES: &[&str] = &[
    "best-case",
    "scalability-N",
    "view-change-K",
    "async-until-gst",
    "reorder-fuzz",
    "silent-leader",
    "equivocating-leader",
];

/// Views led by replica `n - 1`, spaced two rotations apart.
pub fn silent_views(n: usize, count: u64) -> BTreeSet<View> {
    let n = n as u64;
    (1..=count).map(|k| View(2 * k * n + n - 1)).collect()
}

/// The crash victims for `k` crashes: the highest ids, at time zero.
pub fn crash_ids(n: usize, k: usize) -> impl Iterator<Item = u16> {
    (n - k..n).map(|r| r as u16)
}

/// The canonical config for `name`.
pub fn scenario(name: &str) -> Result<ExperimentConfig, UnknownScenario> {
    let n = if name.starts_with("view-change-") {
        7
    } else if let Some(rest) = name.strip_prefix("scalability") {
        match rest {
            "" => 10,
            _ => rest
                .strip_prefix('-')
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| UnknownScenario(name.to_string()))?,
        }
    } else {
        4
    };
    scenario_with_n(name, n)
}

/// `name` rebuilt for `n` replicas; fault placement scales with `n`.
pub fn scenario_with_n(name: &str, n: usize) -> Result<ExperimentConfig, UnknownScenario> {
    let unknown = || UnknownScenario(name.to_string());
    let mut c = ExperimentConfig {
        n,
        ..ExperimentConfig::default()
    };
    let sys = c.system().map_err(|_| unknown())?;
    if name == "best-case" || name.starts_with("scalability") {
        return Ok(c);
    }
    if let Some(k) = name.strip_prefix("view-change-") {
        let k: usize = k.parse().map_err(|_| unknown())?;
        if k > sys.f {
            return Err(unknown());
        }
        c.sim.faults.crashes = crash_ids(n, k).map(|r| (r, 0)).collect();
        return Ok(c);
    }
    match name {
        "async-until-gst" => {
            c.sim.delay = DelayModel::Adversarial;
            c.sim.gst = 2_000 * MILLIS;
            c.views = 100;
        }
        "reorder-fuzz" => {
            c.sim.delay = DelayModel::Uniform {
                lo: MILLIS,
                hi: c.sim.delta,
            };
        }
        "silent-leader" => c.sim.faults.silent_leader_views = silent_views(n, 4),
        "equivocating-leader" => {
            c.sim.faults.equivocators = BTreeSet::from([n as u16 - 1]);
        }
        _ => return Err(unknown()),
    }
    Ok(c)
}
