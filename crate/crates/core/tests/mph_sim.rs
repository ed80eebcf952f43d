mod common;

use common::*;
use mph_core::net::sim::{DelayModel, FaultPlan};
use mph_core::types::{SystemConfig, View, MILLIS};

#[test]
fn fault_free_progress() {
    let sys = SystemConfig::new(4).unwrap();
    let faults = FaultPlan::default();
    let t = run(
        mph_replicas(sys, &faults),
        4,
        uniform(7, faults),
        100,
        60_000 * MILLIS,
    );
    assert_prefix_consistent(&t);
    let top = longest(&t);
    assert!(top > 80, "{top}");
    for l in &t.logs {
        assert!(top - l.len() <= 3);
    }
}

#[test]
fn one_crash_of_seven_still_commits() {
    let sys = SystemConfig::new(7).unwrap();
    let mut faults = FaultPlan::default();
    faults.crashes.insert(6, 0);
    let t = run(
        mph_replicas(sys, &faults),
        7,
        uniform(3, faults),
        80,
        60_000 * MILLIS,
    );
    assert_prefix_consistent(&t);
    assert!(longest(&t) > 40, "{}", longest(&t));
    assert!(t.logs[6].is_empty());
}

#[test]
fn silent_leader_views_are_skipped() {
    let sys = SystemConfig::new(4).unwrap();
    let mut faults = FaultPlan::default();
    faults
        .silent_leader_views
        .extend([View(10), View(14), View(30)]);
    let t = run(
        mph_replicas(sys, &faults),
        4,
        uniform(5, faults),
        100,
        60_000 * MILLIS,
    );
    assert_prefix_consistent(&t);
    assert!(longest(&t) > 70);
    let proposed: Vec<View> = t.proposals().map(|(_, _, _, _, b)| b.v).collect();
    assert!(!proposed.contains(&View(10)) && !proposed.contains(&View(30)));
}

#[test]
fn equivocation_is_detected_and_safe() {
    let sys = SystemConfig::new(4).unwrap();
    let mut faults = FaultPlan::default();
    faults.equivocators.insert(1);
    let t = run(
        mph_replicas(sys, &faults),
        4,
        uniform(11, faults),
        60,
        20_000 * MILLIS,
    );
    assert_prefix_consistent(&t);
    assert!(t
        .events
        .iter()
        .any(|e| matches!(e, mph_core::net::sim::TraceEvent::Equivocation { .. })));
}

#[test]
fn adversarial_prefix_then_progress() {
    let sys = SystemConfig::new(4).unwrap();
    for seed in 0..4 {
        let faults = FaultPlan::default();
        let mut cfg = uniform(seed, faults.clone());
        cfg.delay = DelayModel::Adversarial;
        cfg.gst = 2_000 * MILLIS;
        let t = run(mph_replicas(sys, &faults), 4, cfg, 80, 60_000 * MILLIS);
        assert_prefix_consistent(&t);
        assert!(longest(&t) > 60, "seed {seed}: {}", longest(&t));
    }
}

/// Commits do not depend on delivery order: a constant-delay schedule and
/// a jittered one commit blocks for the same sequence of views.
#[test]
fn reordered_delivery_commits_same_views() {
    let sys = SystemConfig::new(4).unwrap();
    let views = |delay| {
        let faults = FaultPlan::default();
        let mut cfg = uniform(21, faults.clone());
        cfg.delay = delay;
        let t = run(mph_replicas(sys, &faults), 4, cfg, 60, 60_000 * MILLIS);
        t.commits()
            .filter(|(_, _, r, _)| *r == 0)
            .map(|(_, _, _, b)| b.v)
            .collect::<Vec<_>>()
    };
    let fixed = views(DelayModel::Uniform {
        lo: 10 * MILLIS,
        hi: 10 * MILLIS,
    });
    let jitter = views(DelayModel::Uniform {
        lo: 1 * MILLIS,
        hi: 19 * MILLIS,
    });
    let k = fixed.len().min(jitter.len());
    assert!(k > 40);
    assert_eq!(fixed[..k], jitter[..k]);
}
