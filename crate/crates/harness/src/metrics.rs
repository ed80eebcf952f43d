//! Rate, latency and cost figures derived from a run trace.

use std::collections::{BTreeSet, HashMap, HashSet};

use mph_core::net::sim::{RunTrace, TraceEvent};
use mph_core::types::{Time, View, MILLIS};
use mph_core::Digest;

/// Views excluded at each end of a run from rate metrics.
pub const WARMUP_VIEWS: u64 = 10;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    /// Committed client transactions per second inside the window.
    pub tps: f64,
    pub latency_mean_ms: f64,
    pub latency_p50_ms: f64,
    pub latency_p99_ms: f64,
    pub blocks_committed: u64,
    pub blocks_proposed: u64,
    /// Causal message depth spanned by the proposals in the window.
    pub rounds_elapsed: u64,
    /// Mean depth from a block's proposal until every replica has committed it.
    pub commit_rounds: f64,
    pub committed_txs: u64,
    pub authenticators_sent: u64,
    pub view_changes: u64,
    /// Inclusive view window the rates are taken over.
    pub window: (View, View),
}

struct FirstCommit {
    time: Time,
    view: View,
    txs: Vec<Digest>,
}

/// Nearest-rank percentile of sorted data.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Only digests in `submitted` count as client transactions.
pub fn compute(trace: &RunTrace, submitted: &HashMap<Digest, Time>) -> RunMetrics {
    let mut proposals: HashMap<View, (Time, u64)> = HashMap::new();
    let mut proposal_depth: HashMap<Digest, u64> = HashMap::new();
    for (time, depth, _, _, b) in trace.proposals() {
        proposals.entry(b.v).or_insert((time, depth));
        proposal_depth.entry(b.id).or_insert(depth);
    }
    let vmin = proposals.keys().min().copied().unwrap_or(View::ZERO);
    let vmax = proposals.keys().max().copied().unwrap_or(View::ZERO);
    let (lo, hi) = if vmax.0 >= vmin.0 + 2 * WARMUP_VIEWS + 2 {
        (View(vmin.0 + WARMUP_VIEWS), View(vmax.0 - WARMUP_VIEWS))
    } else {
        (vmin, vmax)
    };
    let in_window = |v: View| v >= lo && v <= hi;

    let mut window: Vec<(View, Time, u64)> = proposals
        .iter()
        .filter(|(v, _)| in_window(**v))
        .map(|(v, (t, d))| (*v, *t, *d))
        .collect();
    window.sort();
    let blocks_proposed = window.len() as u64;
    let (rounds_elapsed, duration) = match (window.first(), window.last()) {
        (Some(a), Some(b)) => (b.2.saturating_sub(a.2), b.1.saturating_sub(a.1)),
        _ => (0, 0),
    };

    let mut first: HashMap<Digest, FirstCommit> = HashMap::new();
    let mut last_depth: HashMap<Digest, u64> = HashMap::new();
    for (time, depth, _, b) in trace.commits() {
        let d = last_depth.entry(b.id).or_default();
        *d = (*d).max(depth);
        first.entry(b.id).or_insert_with(|| FirstCommit {
            time,
            view: b.v,
            txs: b.txs.clone(),
        });
    }

    let mut latencies = Vec::new();
    let mut rounds = Vec::new();
    let mut seen: HashSet<Digest> = HashSet::new();
    let mut blocks_committed = 0;
    for (id, c) in &first {
        if !in_window(c.view) {
            continue;
        }
        blocks_committed += 1;
        if let Some(d) = proposal_depth.get(id) {
            rounds.push(last_depth[id].saturating_sub(*d) as f64);
        }
        for tx in &c.txs {
            if let Some(s) = submitted.get(tx) {
                if seen.insert(*tx) {
                    latencies.push(c.time.saturating_sub(*s) as f64 / MILLIS as f64);
                }
            }
        }
    }
    latencies.sort_by(f64::total_cmp);
    let mean = |xs: &[f64]| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };

    let view_changes: BTreeSet<View> = trace
        .events
        .iter()
        .filter_map(|e| match e {
            TraceEvent::TcFormed { tc, .. } => Some(tc.v),
            _ => None,
        })
        .collect();

    let committed_txs = latencies.len() as u64;
    RunMetrics {
        tps: if duration > 0 {
            committed_txs as f64 * 1e6 / duration as f64
        } else {
            0.0
        },
        latency_mean_ms: mean(&latencies),
        latency_p50_ms: percentile(&latencies, 0.5),
        latency_p99_ms: percentile(&latencies, 0.99),
        blocks_committed,
        blocks_proposed,
        rounds_elapsed,
        commit_rounds: mean(&rounds),
        committed_txs,
        authenticators_sent: trace.total_authenticators(),
        view_changes: view_changes.len() as u64,
        window: (lo, hi),
    }
}
