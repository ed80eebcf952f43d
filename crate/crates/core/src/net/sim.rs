//! Seeded discrete-event network simulator.
//!
//! Events are processed in `(time, seq)` order. Every `(src, dst)` channel
//! draws delays from its own generator seeded from the run seed, so adding
//! traffic on one channel never perturbs another. Timer expiries share the
//! queue with deliveries.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::crypto::Digest;
use crate::engine::{Dest, EngineEvent, EngineOutput, ProposalKind, Replica};
use crate::message::{Message, MessageKind};
use crate::types::{
    Block, QuorumCert, ReplicaId, SystemConfig, Time, TimeoutCert, Transaction, View,
};

#[derive(Clone, Debug, PartialEq)]
pub enum DelayModel {
    Uniform {
        lo: Time,
        hi: Time,
    },
    Normal {
        mean: f64,
        stddev: f64,
    },
    /// Before GST each message is held for a uniformly chosen time up to
    /// `GST + delta`; afterwards uniform in `[1, delta]`.
    Adversarial,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub group: BTreeSet<ReplicaId>,
    pub start: Time,
    pub end: Time,
}

impl Partition {
    fn splits(&self, a: ReplicaId, b: ReplicaId, at: Time) -> bool {
        at >= self.start && at < self.end && self.group.contains(&a) != self.group.contains(&b)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FaultPlan {
    pub crashes: BTreeMap<ReplicaId, Time>,
    /// Views whose leader proposes nothing.
    pub silent_leader_views: BTreeSet<View>,
    pub equivocators: BTreeSet<ReplicaId>,
    pub partitions: Vec<Partition>,
}

impl FaultPlan {
    /// Replicas that deviate from the protocol at some point.
    pub fn faulty(&self, sys: &SystemConfig) -> BTreeSet<ReplicaId> {
        let mut s: BTreeSet<ReplicaId> = self.crashes.keys().copied().collect();
        s.extend(self.silent_leader_views.iter().map(|v| sys.leader_of(*v)));
        s.extend(self.equivocators.iter().copied());
        s
    }

    /// Views each replica stays silent in.
    pub fn silent_views_of(&self, sys: &SystemConfig, r: ReplicaId) -> BTreeSet<View> {
        self.silent_leader_views
            .iter()
            .copied()
            .filter(|v| sys.leader_of(*v) == r)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub delta: Time,
    pub gst: Time,
    pub delay: DelayModel,
    pub seed: u64,
    pub faults: FaultPlan,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("{faulty} faulty replicas exceed f = {f}")]
    TooManyFaults { faulty: usize, f: usize },
    #[error("replica {0} out of range")]
    UnknownReplica(ReplicaId),
    #[error("delay model parameters invalid")]
    BadDelay,
}

impl SimConfig {
    pub fn validate(&self, sys: &SystemConfig) -> Result<(), SimError> {
        let faulty = self.faults.faulty(sys);
        if let Some(r) = faulty.iter().find(|r| **r as usize >= sys.n) {
            return Err(SimError::UnknownReplica(*r));
        }
        if faulty.len() > sys.f {
            return Err(SimError::TooManyFaults {
                faulty: faulty.len(),
                f: sys.f,
            });
        }
        match self.delay {
            DelayModel::Uniform { lo, hi } if lo > hi => Err(SimError::BadDelay),
            DelayModel::Normal { mean, stddev } if !(mean > 0.0 && stddev >= 0.0) => {
                Err(SimError::BadDelay)
            }
            _ if self.delta == 0 => Err(SimError::BadDelay),
            _ => Ok(()),
        }
    }
}

/// Lazily pulled client arrivals.
pub trait Workload {
    /// Next arrival strictly in time order.
    fn next_arrival(&mut self) -> Option<(Time, ReplicaId, Transaction)>;
}

/// What happened, for checkers and metrics. `depth` is the causal message
/// depth at the acting replica: the length of the longest chain of
/// messages leading to this point, i.e. message rounds elapsed. Mempool
/// batches do not extend it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TraceEvent {
    Proposed {
        time: Time,
        depth: u64,
        replica: ReplicaId,
        kind: ProposalKind,
        block: Arc<Block>,
    },
    Voted {
        time: Time,
        replica: ReplicaId,
        view: View,
        block: Digest,
    },
    QcFormed {
        time: Time,
        replica: ReplicaId,
        qc: QuorumCert,
    },
    TcFormed {
        time: Time,
        replica: ReplicaId,
        tc: TimeoutCert,
    },
    TimeoutSent {
        time: Time,
        replica: ReplicaId,
        vf: View,
    },
    Committed {
        time: Time,
        depth: u64,
        replica: ReplicaId,
        block: Arc<Block>,
    },
    Equivocation {
        time: Time,
        replica: ReplicaId,
        view: View,
    },
    LockUpdated {
        time: Time,
        replica: ReplicaId,
        curlock: View,
        laslock: View,
    },
    /// The replica's `curr_view` moved up.
    ViewEntered {
        time: Time,
        replica: ReplicaId,
        view: View,
    },
}

impl TraceEvent {
    fn line(&self) -> String {
        use TraceEvent::*;
        match self {
            Proposed {
                time,
                depth,
                replica,
                kind,
                block,
            } => {
                format!(
                    "P {time} {depth} {replica} {kind:?} {} {}",
                    block.v, block.id
                )
            }
            Voted {
                time,
                replica,
                view,
                block,
            } => format!("V {time} {replica} {view} {block}"),
            QcFormed { time, replica, qc } => format!("Q {time} {replica} {} {}", qc.v, qc.bid),
            TcFormed { time, replica, tc } => format!("T {time} {replica} {}", tc.v),
            TimeoutSent { time, replica, vf } => format!("O {time} {replica} {vf}"),
            Committed {
                time,
                depth,
                replica,
                block,
            } => {
                format!("C {time} {depth} {replica} {} {}", block.v, block.id)
            }
            Equivocation {
                time,
                replica,
                view,
            } => format!("E {time} {replica} {view}"),
            LockUpdated {
                time,
                replica,
                curlock,
                laslock,
            } => {
                format!("L {time} {replica} {curlock} {laslock}")
            }
            ViewEntered {
                time,
                replica,
                view,
            } => format!("W {time} {replica} {view}"),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct KindStats {
    pub messages: u64,
    pub authenticators: u64,
}

#[derive(Clone, Debug, Default)]
pub struct RunTrace {
    pub events: Vec<TraceEvent>,
    pub sent: BTreeMap<MessageKind, KindStats>,
    /// Consensus traffic split by the view each message belongs to.
    pub sent_by_view: BTreeMap<(MessageKind, View), KindStats>,
    pub end_time: Time,
    pub max_depth: u64,
    /// Largest delivery delay of any message sent at or after GST.
    pub max_post_gst_delay: Time,
    pub final_views: Vec<View>,
    pub logs: Vec<Vec<Digest>>,
    pub crashed: BTreeSet<ReplicaId>,
    pub stalled: bool,
    hasher: Sha256Trace,
}

#[derive(Clone, Default)]
struct Sha256Trace(Option<Sha256>);

impl std::fmt::Debug for Sha256Trace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Sha256Trace")
    }
}

impl RunTrace {
    fn push(&mut self, e: TraceEvent) {
        let h = self.hasher.0.get_or_insert_with(Sha256::new);
        h.update(e.line().as_bytes());
        h.update(b"\n");
        self.events.push(e);
    }

    /// Digest over every trace line plus the final logs and counters.
    pub fn digest(&self) -> Digest {
        let mut h = self.hasher.0.clone().unwrap_or_default();
        for (k, s) in &self.sent {
            h.update(format!("S {k:?} {} {}\n", s.messages, s.authenticators).as_bytes());
        }
        for log in &self.logs {
            for id in log {
                h.update(id.0);
            }
            h.update(b"|");
        }
        h.update(self.end_time.to_le_bytes());
        Digest(h.finalize().into())
    }

    pub fn total_authenticators(&self) -> u64 {
        self.sent.values().map(|s| s.authenticators).sum()
    }

    pub fn commits(&self) -> impl Iterator<Item = (Time, u64, ReplicaId, &Arc<Block>)> {
        self.events.iter().filter_map(|e| match e {
            TraceEvent::Committed {
                time,
                depth,
                replica,
                block,
            } => Some((*time, *depth, *replica, block)),
            _ => None,
        })
    }

    pub fn proposals(
        &self,
    ) -> impl Iterator<Item = (Time, u64, ReplicaId, ProposalKind, &Arc<Block>)> {
        self.events.iter().filter_map(|e| match e {
            TraceEvent::Proposed {
                time,
                depth,
                replica,
                kind,
                block,
            } => Some((*time, *depth, *replica, *kind, block)),
            _ => None,
        })
    }
}

enum EventKind {
    Deliver { src: ReplicaId, msg: Message },
    Timer { deadline: Time },
    Arrival { tx: Transaction },
    Flush,
}

struct Event {
    dst: ReplicaId,
    depth: u64,
    kind: EventKind,
}

/// Delay sampling over per-channel generators.
pub struct Network {
    cfg: SimConfig,
    channels: HashMap<(ReplicaId, ReplicaId), ChaCha8Rng>,
}

impl Network {
    pub fn new(cfg: SimConfig) -> Network {
        Network {
            cfg,
            channels: HashMap::new(),
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    fn channel(&mut self, src: ReplicaId, dst: ReplicaId) -> &mut ChaCha8Rng {
        let seed = self.cfg.seed;
        self.channels.entry((src, dst)).or_insert_with(|| {
            let mut h = Sha256::new();
            h.update(b"mph/channel");
            h.update(seed.to_le_bytes());
            h.update(src.to_le_bytes());
            h.update(dst.to_le_bytes());
            ChaCha8Rng::from_seed(h.finalize().into())
        })
    }

    /// Delivery time for a message sent at `now` on `src -> dst`.
    pub fn delivery_time(&mut self, src: ReplicaId, dst: ReplicaId, now: Time) -> Time {
        let (gst, delta) = (self.cfg.gst, self.cfg.delta);
        let model = self.cfg.delay.clone();
        let rng = self.channel(src, dst);
        let raw: Time = match model {
            DelayModel::Uniform { lo, hi } => rng.gen_range(lo..=hi),
            DelayModel::Normal { mean, stddev } => {
                let d = Normal::new(mean, stddev).expect("validated");
                d.sample(rng).max(1.0).round() as Time
            }
            DelayModel::Adversarial => {
                if now < gst {
                    rng.gen_range(1..=gst + delta - now)
                } else {
                    rng.gen_range(1..=delta)
                }
            }
        };
        let mut at = if now >= gst {
            now + raw.clamp(1, delta)
        } else {
            now + raw.max(1)
        };
        for p in &self.cfg.faults.partitions {
            if p.splits(src, dst, now) {
                at = at.max(p.end + raw.clamp(1, delta));
            }
        }
        at
    }
}

/// When to stop a run.
#[derive(Clone, Copy, Debug)]
pub struct StopAt {
    pub time: Time,
    /// Stop once every live replica has reached this view.
    pub view: Option<View>,
}

pub struct Simulator {
    sys: SystemConfig,
    net: Network,
    replicas: Vec<Box<dyn Replica>>,
    queue: BinaryHeap<Reverse<(Time, u64)>>,
    pending: HashMap<u64, Event>,
    seq: u64,
    now: Time,
    depth: Vec<u64>,
    views: Vec<View>,
    crashed: BTreeSet<ReplicaId>,
    workload: Option<Box<dyn Workload>>,
    flush_every: Option<Time>,
    trace: RunTrace,
}

impl Simulator {
    pub fn new(
        sys: SystemConfig,
        cfg: SimConfig,
        replicas: Vec<Box<dyn Replica>>,
    ) -> Result<Simulator, SimError> {
        cfg.validate(&sys)?;
        assert_eq!(replicas.len(), sys.n, "one engine per replica");
        Ok(Simulator {
            depth: vec![0; sys.n],
            views: vec![View::ZERO; sys.n],
            sys,
            net: Network::new(cfg),
            replicas,
            queue: BinaryHeap::new(),
            pending: HashMap::new(),
            seq: 0,
            now: 0,
            crashed: BTreeSet::new(),
            workload: None,
            flush_every: None,
            trace: RunTrace::default(),
        })
    }

    /// Client arrivals, plus a periodic flush of partial batches.
    pub fn set_workload(&mut self, w: Box<dyn Workload>, flush_every: Option<Time>) {
        self.workload = Some(w);
        self.flush_every = flush_every;
    }

    pub fn replicas(&self) -> &[Box<dyn Replica>] {
        &self.replicas
    }

    pub fn now(&self) -> Time {
        self.now
    }

    fn schedule(&mut self, at: Time, ev: Event) {
        let s = self.seq;
        self.seq += 1;
        self.queue.push(Reverse((at, s)));
        self.pending.insert(s, ev);
    }

    fn apply(&mut self, r: ReplicaId, out: EngineOutput) {
        let depth = self.depth[r as usize];
        let now = self.now;
        let view = self.replicas[r as usize].curr_view();
        if view > self.views[r as usize] {
            self.views[r as usize] = view;
            self.trace.push(TraceEvent::ViewEntered {
                time: now,
                replica: r,
                view,
            });
        }
        for e in out.events {
            let t = match e {
                EngineEvent::Proposed { block, kind, .. } => TraceEvent::Proposed {
                    time: now,
                    depth,
                    replica: r,
                    kind,
                    block,
                },
                EngineEvent::Voted { view, block } => TraceEvent::Voted {
                    time: now,
                    replica: r,
                    view,
                    block,
                },
                EngineEvent::QcFormed(qc) => TraceEvent::QcFormed {
                    time: now,
                    replica: r,
                    qc,
                },
                EngineEvent::TcFormed(tc) => TraceEvent::TcFormed {
                    time: now,
                    replica: r,
                    tc,
                },
                EngineEvent::TimeoutSent { vf } => TraceEvent::TimeoutSent {
                    time: now,
                    replica: r,
                    vf,
                },
                EngineEvent::Equivocation { view } => TraceEvent::Equivocation {
                    time: now,
                    replica: r,
                    view,
                },
                EngineEvent::LockUpdated { curlock, laslock } => TraceEvent::LockUpdated {
                    time: now,
                    replica: r,
                    curlock,
                    laslock,
                },
            };
            self.trace.push(t);
        }
        for block in out.committed {
            self.trace.push(TraceEvent::Committed {
                time: now,
                depth,
                replica: r,
                block,
            });
        }
        if let Some(deadline) = out.timer_reset {
            self.schedule(
                deadline,
                Event {
                    dst: r,
                    depth,
                    kind: EventKind::Timer { deadline },
                },
            );
        }
        for (dest, msg) in out.outbound {
            let targets: Vec<ReplicaId> = match dest {
                Dest::To(d) if d != r => vec![d],
                Dest::To(_) => continue,
                Dest::All => self.sys.replicas().filter(|d| *d != r).collect(),
            };
            // mempool traffic runs beside consensus and does not count as a round
            let d = match msg.kind() {
                MessageKind::Batch | MessageKind::BatchFetch | MessageKind::BatchFetchResponse => 0,
                _ => depth + 1,
            };
            for dst in targets {
                self.send(r, dst, msg.clone(), d);
            }
        }
    }

    fn send(&mut self, src: ReplicaId, dst: ReplicaId, msg: Message, depth: u64) {
        let stats = self.trace.sent.entry(msg.kind()).or_default();
        stats.messages += 1;
        stats.authenticators += msg.authenticators();
        if let Some(v) = msg.view() {
            let s = self.trace.sent_by_view.entry((msg.kind(), v)).or_default();
            s.messages += 1;
            s.authenticators += msg.authenticators();
        }
        let at = self.net.delivery_time(src, dst, self.now);
        if self.now >= self.net.cfg.gst {
            self.trace.max_post_gst_delay = self.trace.max_post_gst_delay.max(at - self.now);
        }
        self.schedule(
            at,
            Event {
                dst,
                depth,
                kind: EventKind::Deliver { src, msg },
            },
        );
    }

    fn is_crashed(&mut self, r: ReplicaId) -> bool {
        if self.crashed.contains(&r) {
            return true;
        }
        match self.net.cfg.faults.crashes.get(&r) {
            Some(t) if *t <= self.now => {
                self.crashed.insert(r);
                true
            }
            _ => false,
        }
    }

    fn schedule_arrival(&mut self) {
        if let Some(w) = self.workload.as_mut() {
            if let Some((at, dst, tx)) = w.next_arrival() {
                self.schedule(
                    at.max(self.now),
                    Event {
                        dst,
                        depth: 0,
                        kind: EventKind::Arrival { tx },
                    },
                );
            }
        }
    }

    /// Runs until `stop`; returns the trace. `stalled` is set if the queue
    /// drained before the stop condition.
    pub fn run(mut self, stop: StopAt) -> RunTrace {
        for r in 0..self.sys.n as ReplicaId {
            if self.is_crashed(r) {
                continue;
            }
            let out = self.replicas[r as usize].start(0);
            self.apply(r, out);
            if let Some(every) = self.flush_every {
                self.schedule(
                    every,
                    Event {
                        dst: r,
                        depth: 0,
                        kind: EventKind::Flush,
                    },
                );
            }
        }
        self.schedule_arrival();

        loop {
            if let Some(v) = stop.view {
                let done = (0..self.sys.n as ReplicaId)
                    .filter(|r| !self.crashed.contains(r))
                    .all(|r| self.replicas[r as usize].curr_view() >= v);
                if done {
                    break;
                }
            }
            let Some(Reverse((at, seq))) = self.queue.pop() else {
                self.trace.stalled = true;
                break;
            };
            if at > stop.time {
                self.queue.push(Reverse((at, seq)));
                self.now = stop.time;
                break;
            }
            self.now = at;
            let ev = self.pending.remove(&seq).expect("scheduled event");
            let r = ev.dst;
            if self.is_crashed(r) {
                continue;
            }
            let d = &mut self.depth[r as usize];
            *d = (*d).max(ev.depth);
            self.trace.max_depth = self.trace.max_depth.max(*d);
            let out = match ev.kind {
                EventKind::Deliver { src, msg } => self.replicas[r as usize].handle(src, msg, at),
                EventKind::Timer { deadline } => {
                    if self.replicas[r as usize].timer_deadline() != Some(deadline) {
                        continue;
                    }
                    self.replicas[r as usize].on_timer(at)
                }
                EventKind::Arrival { tx } => {
                    let out = self.replicas[r as usize].submit(tx, at);
                    self.schedule_arrival();
                    out
                }
                EventKind::Flush => {
                    if let Some(every) = self.flush_every {
                        self.schedule(
                            at + every,
                            Event {
                                dst: r,
                                depth: 0,
                                kind: EventKind::Flush,
                            },
                        );
                    }
                    self.replicas[r as usize].flush(at)
                }
            };
            self.apply(r, out);
        }

        for r in 0..self.sys.n as ReplicaId {
            self.is_crashed(r);
        }
        let mut trace = self.trace;
        trace.end_time = self.now;
        trace.final_views = self.replicas.iter().map(|x| x.curr_view()).collect();
        trace.logs = self
            .replicas
            .iter()
            .map(|x| x.committed().iter().map(|b| b.id).collect())
            .collect();
        trace.crashed = self.crashed;
        trace
    }
}
