//! Interface between replica state machines and whatever drives them.

use std::collections::BTreeSet;
use std::sync::Arc;

use crate::mempool::Mempool;
use crate::message::Message;
use crate::types::{Block, QuorumCert, ReplicaId, Time, TimeoutCert, Transaction, View};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Dest {
    To(ReplicaId),
    /// Every replica except the sender.
    All,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, PartialOrd, Ord, Hash)]
pub enum ProposalKind {
    Normal,
    TimeoutF,
    TimeoutS,
}

/// Observable protocol events, consumed by trace checkers and metrics.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum EngineEvent {
    Proposed {
        view: View,
        block: Arc<Block>,
        kind: ProposalKind,
    },
    Voted {
        view: View,
        block: crate::Digest,
    },
    /// A certificate this replica combined from shares.
    QcFormed(QuorumCert),
    TcFormed(TimeoutCert),
    TimeoutSent {
        vf: View,
    },
    /// A second, different valid proposal for a view already seen.
    Equivocation {
        view: View,
    },
    LockUpdated {
        curlock: View,
        laslock: View,
    },
}

#[derive(Default, Debug)]
pub struct EngineOutput {
    pub outbound: Vec<(Dest, Message)>,
    /// Newly committed blocks, ancestors first.
    pub committed: Vec<Arc<Block>>,
    /// New absolute timer deadline, if it moved.
    pub timer_reset: Option<Time>,
    pub events: Vec<EngineEvent>,
}

impl EngineOutput {
    pub fn send(&mut self, to: Dest, msg: Message) {
        self.outbound.push((to, msg));
    }

    pub fn is_empty(&self) -> bool {
        self.outbound.is_empty() && self.committed.is_empty() && self.timer_reset.is_none()
    }
}

/// Scripted misbehavior for fault-injection runs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum Behavior {
    #[default]
    Honest,
    /// Proposes nothing in the listed views; otherwise honest.
    SilentLeader(BTreeSet<View>),
    /// Sends two conflicting proposals for every view it leads.
    Equivocate,
}

impl Behavior {
    pub fn proposes_in(&self, v: View) -> bool {
        match self {
            Behavior::SilentLeader(views) => !views.contains(&v),
            _ => true,
        }
    }
}

/// A deterministic replica: identical input sequences give identical
/// outputs. Callers serialize all calls.
pub trait Replica: Send {
    fn id(&self) -> ReplicaId;

    fn start(&mut self, now: Time) -> EngineOutput;

    fn handle(&mut self, from: ReplicaId, msg: Message, now: Time) -> EngineOutput;

    /// Called when the deadline last reported through `timer_reset` passes.
    fn on_timer(&mut self, now: Time) -> EngineOutput;

    /// Client submission into this replica's mempool; full batches are
    /// disseminated immediately.
    fn submit(&mut self, tx: Transaction, now: Time) -> EngineOutput;

    /// Disseminates any partial batch.
    fn flush(&mut self, now: Time) -> EngineOutput;

    fn timer_deadline(&self) -> Option<Time>;

    fn curr_view(&self) -> View;

    fn committed(&self) -> &[Arc<Block>];

    fn mempool(&self) -> &Mempool;

    fn mempool_mut(&mut self) -> &mut Mempool;
}

/// Timer policy: base timeout doubled per consecutive expiry without a
/// commit, capped at `base << max_backoff`.
#[derive(Clone, Copy, Debug)]
pub struct Pacemaker {
    pub base: Time,
    pub max_backoff: u32,
    expiries: u32,
    deadline: Option<Time>,
}

impl Pacemaker {
    pub fn new(base: Time) -> Pacemaker {
        Pacemaker {
            base,
            max_backoff: 6,
            expiries: 0,
            deadline: None,
        }
    }

    pub fn current_timeout(&self) -> Time {
        self.base << self.expiries.min(self.max_backoff)
    }

    pub fn reset(&mut self, now: Time) -> Time {
        let d = now + self.current_timeout();
        self.deadline = Some(d);
        d
    }

    pub fn expired(&mut self, now: Time) -> Time {
        self.expiries += 1;
        self.reset(now)
    }

    pub fn progress(&mut self) {
        self.expiries = 0;
    }

    pub fn deadline(&self) -> Option<Time> {
        self.deadline
    }
}
