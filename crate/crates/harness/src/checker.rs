//! Safety invariants checked over a finished run trace.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use mph_core::net::sim::{RunTrace, TraceEvent};
use mph_core::types::{ReplicaId, View};
use mph_core::Digest;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    /// Two certificates for different blocks at the same QC view.
    ConflictingQc {
        view: View,
        a: Digest,
        b: Digest,
    },
    /// Two certified blocks with the same block view.
    ConflictingCertified {
        view: View,
        a: Digest,
        b: Digest,
    },
    /// Committed logs of two replicas disagree at `index`.
    Fork {
        a: ReplicaId,
        b: ReplicaId,
        index: usize,
    },
    DoubleVote {
        replica: ReplicaId,
        view: View,
    },
    LockRegressed {
        replica: ReplicaId,
        from: (View, View),
        to: (View, View),
    },
    /// A committed block does not extend the previous one.
    BrokenChain {
        replica: ReplicaId,
        index: usize,
    },
    DuplicateBlock {
        replica: ReplicaId,
        block: Digest,
    },
    DuplicateTx {
        replica: ReplicaId,
        tx: Digest,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Runs every check. `faulty` replicas are exempt from the per-replica
/// checks (votes, locks) but their blocks still count for certificate
/// uniqueness.
pub fn check(trace: &RunTrace, faulty: &BTreeSet<ReplicaId>) -> Vec<Violation> {
    let mut out = Vec::new();
    unique_qcs(trace, &mut out);
    prefix_consistent(trace, &mut out);
    per_replica(trace, faulty, &mut out);
    committed_chains(trace, &mut out);
    out
}

fn unique_qcs(trace: &RunTrace, out: &mut Vec<Violation>) {
    let mut views: HashMap<Digest, View> = HashMap::new();
    let mut qcs: BTreeMap<View, Digest> = BTreeMap::new();
    let mut all: BTreeSet<Digest> = BTreeSet::new();
    let mut saw = |v: View, bid: Digest, out: &mut Vec<Violation>| {
        all.insert(bid);
        match qcs.get(&v) {
            Some(a) if *a != bid => out.push(Violation::ConflictingQc {
                view: v,
                a: *a,
                b: bid,
            }),
            Some(_) => {}
            None => {
                qcs.insert(v, bid);
            }
        }
    };
    for e in &trace.events {
        match e {
            TraceEvent::Proposed { block, .. } | TraceEvent::Committed { block, .. } => {
                views.insert(block.id, block.v);
                saw(block.qc.v, block.qc.bid, out);
            }
            TraceEvent::QcFormed { qc, .. } => saw(qc.v, qc.bid, out),
            _ => {}
        }
    }
    let mut certified: BTreeMap<View, Digest> = BTreeMap::new();
    for bid in &all {
        let Some(v) = views.get(bid) else { continue };
        match certified.get(v) {
            Some(a) if a != bid => out.push(Violation::ConflictingCertified {
                view: *v,
                a: *a,
                b: *bid,
            }),
            Some(_) => {}
            None => {
                certified.insert(*v, *bid);
            }
        }
    }
}

fn prefix_consistent(trace: &RunTrace, out: &mut Vec<Violation>) {
    let logs = &trace.logs;
    for a in 0..logs.len() {
        for b in a + 1..logs.len() {
            let k = logs[a].len().min(logs[b].len());
            if let Some(i) = (0..k).find(|i| logs[a][*i] != logs[b][*i]) {
                out.push(Violation::Fork {
                    a: a as ReplicaId,
                    b: b as ReplicaId,
                    index: i,
                });
            }
        }
    }
}

fn per_replica(trace: &RunTrace, faulty: &BTreeSet<ReplicaId>, out: &mut Vec<Violation>) {
    let mut votes: HashSet<(ReplicaId, View)> = HashSet::new();
    let mut locks: HashMap<ReplicaId, (View, View)> = HashMap::new();
    for e in &trace.events {
        match e {
            TraceEvent::Voted { replica, view, .. } if !faulty.contains(replica) => {
                if !votes.insert((*replica, *view)) {
                    out.push(Violation::DoubleVote {
                        replica: *replica,
                        view: *view,
                    });
                }
            }
            TraceEvent::LockUpdated {
                replica,
                curlock,
                laslock,
                ..
            } if !faulty.contains(replica) => {
                let to = (*curlock, *laslock);
                if let Some(from) = locks.insert(*replica, to) {
                    // the current lock only moves up, the last lock never passes it
                    if to.0 <= from.0 || to.1 < from.1 || to.1 > to.0 {
                        out.push(Violation::LockRegressed {
                            replica: *replica,
                            from,
                            to,
                        });
                    }
                }
            }
            _ => {}
        }
    }
}

fn committed_chains(trace: &RunTrace, out: &mut Vec<Violation>) {
    let mut last: HashMap<ReplicaId, (usize, Digest)> = HashMap::new();
    let mut blocks: HashMap<ReplicaId, HashSet<Digest>> = HashMap::new();
    let mut txs: HashMap<ReplicaId, HashSet<Digest>> = HashMap::new();
    for (_, _, r, b) in trace.commits() {
        let (index, prev) = last.get(&r).copied().unwrap_or((0, b.p));
        if index > 0 && b.p != prev {
            out.push(Violation::BrokenChain { replica: r, index });
        }
        last.insert(r, (index + 1, b.id));
        if !blocks.entry(r).or_default().insert(b.id) {
            out.push(Violation::DuplicateBlock {
                replica: r,
                block: b.id,
            });
        }
        let seen = txs.entry(r).or_default();
        for d in &b.txs {
            if !seen.insert(*d) {
                out.push(Violation::DuplicateTx { replica: r, tx: *d });
            }
        }
    }
}
