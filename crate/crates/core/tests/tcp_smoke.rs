mod common;

use std::time::Duration;

use common::*;
use mph_core::net::sim::FaultPlan;
use mph_core::net::tcp::run_local;
use mph_core::types::SystemConfig;

#[test]
fn loopback_cluster_commits() {
    let sys = SystemConfig::new(4).unwrap();
    for reps in [
        mph_replicas(sys, &FaultPlan::default()),
        hs_replicas(sys, &FaultPlan::default()),
    ] {
        let report = run_local(reps, Duration::from_millis(400)).unwrap();
        let top = report.logs.iter().map(|l| l.len()).max().unwrap();
        assert!(top > 5, "{top}");
        for a in &report.logs {
            for b in &report.logs {
                let k = a.len().min(b.len());
                assert_eq!(a[..k], b[..k]);
            }
        }
        assert!(report.frames_sent > 0);
    }
}
