//! Multi-pipeline HotStuff replica.
//!
//! Views last one message round. The leader of view `v` proposes a block
//! extending the latest verified block (view `v-1`) and carrying the QC of
//! the block at `v-2`; validators vote for it towards the leader of `v+2`.
//! Even and odd views form two interleaved QC chains.
//!
//! View numbering: `curr_view` is the view of the last voted proposal, a
//! block is only voted at `curr_view + 1`, and a QC formed from votes on
//! block `v` (so `qc.v = v + 1`) is held until this replica has itself
//! processed the block at `v + 1`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use crate::crypto::{Digest, KeyShare, PartialSig, ThresholdScheme};
use crate::engine::{Behavior, Dest, EngineEvent, EngineOutput, Pacemaker, ProposalKind, Replica};
use crate::genesis::MphGenesis;
use crate::mempool::{Mempool, DEFAULT_BLOCK_SIZE, DEFAULT_DISSEMINATION_BYTES};
use crate::message::Message;
use crate::types::{
    block_digest, proposal_message, timeout_message, vote_message, Block, BlockStore, QuorumCert,
    ReplicaId, SystemConfig, Time, TimeoutCert, TimeoutMessage, Transaction, View, Vote, MILLIS,
};

/// How far ahead of `curr_view` proposals are buffered.
const BUFFER_HORIZON: u64 = 64;
/// Blocks returned per sync request.
const SYNC_DEPTH: usize = 32;
/// Uncommitted ancestors scanned when excluding digests from a payload.
const EXCLUDE_DEPTH: usize = 64;

#[derive(Clone, Debug)]
pub struct MphConfig {
    pub sys: SystemConfig,
    pub timeout: Time,
    pub batch_size: usize,
    pub dissemination_bytes: usize,
    pub behavior: Behavior,
}

impl MphConfig {
    pub fn new(sys: SystemConfig) -> MphConfig {
        MphConfig {
            sys,
            timeout: 500 * MILLIS,
            batch_size: DEFAULT_BLOCK_SIZE,
            dissemination_bytes: DEFAULT_DISSEMINATION_BYTES,
            behavior: Behavior::Honest,
        }
    }
}

/// Which vote predicate accepted a block.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum VoteBranch {
    Safety,
    Liveness1,
    Liveness2,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rejection {
    InvalidSignature,
    Malformed,
    StaleView,
    FutureView,
    UnknownParent,
    Equivocation,
}

pub struct MphReplica {
    id: ReplicaId,
    cfg: MphConfig,
    scheme: Arc<dyn ThresholdScheme>,
    key: KeyShare,
    genesis: MphGenesis,

    curr_view: View,
    high_qc: QuorumCert,
    sec_high_qc: QuorumCert,
    curlock_qc: QuorumCert,
    laslock_qc: QuorumCert,
    verified_b: Arc<Block>,
    last_voted: View,
    // highest vs this replica sent a timeout for; no safety-branch votes
    // at or below it
    timeout_vs: View,
    last_tm_vf: View,
    tc_pair: Option<(TimeoutCert, TimeoutCert)>,
    highest_tcf: View,

    // block view -> block id -> voter -> share
    votes: BTreeMap<View, BTreeMap<Digest, BTreeMap<ReplicaId, PartialSig>>>,
    formed_qc: BTreeSet<View>,
    held_qcs: BTreeMap<View, QuorumCert>,
    timeouts: BTreeMap<View, BTreeMap<ReplicaId, TimeoutMessage>>,
    /// Highest timeout view heard from each replica.
    peer_tm: BTreeMap<ReplicaId, View>,
    // verified certificates by certified block id
    qcs: BTreeMap<Digest, QuorumCert>,

    store: BlockStore,
    seen: BTreeMap<View, Digest>,
    buffered: BTreeMap<View, (ReplicaId, Arc<Block>)>,
    releasing: bool,
    requested: BTreeSet<Digest>,
    proposed: BTreeSet<View>,

    committed: Vec<Arc<Block>>,
    committed_ids: BTreeSet<Digest>,

    pacemaker: Pacemaker,
    mempool: Mempool,
    now: Time,
    local: VecDeque<Message>,
    out: EngineOutput,
}

impl MphReplica {
    pub fn new(cfg: MphConfig, scheme: Arc<dyn ThresholdScheme>, key: KeyShare) -> MphReplica {
        let genesis = MphGenesis::new();
        let mut store = BlockStore::default();
        store.insert(genesis.g0.clone());
        store.insert(genesis.g1.clone());
        let mut qcs = BTreeMap::new();
        qcs.insert(genesis.qc0.bid, genesis.qc0.clone());
        qcs.insert(genesis.qc1.bid, genesis.qc1.clone());
        let committed_ids = [genesis.g0.id, genesis.g1.id].into_iter().collect();
        MphReplica {
            id: key.index,
            pacemaker: Pacemaker::new(cfg.timeout),
            mempool: Mempool::new(key.index),
            curr_view: View(1),
            high_qc: genesis.qc1.clone(),
            sec_high_qc: genesis.qc0.clone(),
            curlock_qc: genesis.qc1.clone(),
            laslock_qc: genesis.qc0.clone(),
            verified_b: genesis.g1.clone(),
            last_voted: View(1),
            timeout_vs: View::ZERO,
            last_tm_vf: View::ZERO,
            tc_pair: None,
            highest_tcf: View::ZERO,
            votes: BTreeMap::new(),
            formed_qc: BTreeSet::new(),
            held_qcs: BTreeMap::new(),
            timeouts: BTreeMap::new(),
            peer_tm: BTreeMap::new(),
            qcs,
            store,
            seen: BTreeMap::new(),
            buffered: BTreeMap::new(),
            releasing: false,
            requested: BTreeSet::new(),
            proposed: BTreeSet::new(),
            committed: Vec::new(),
            committed_ids,
            now: 0,
            local: VecDeque::new(),
            out: EngineOutput::default(),
            cfg,
            scheme,
            key,
            genesis,
        }
    }

    pub fn high_qc(&self) -> &QuorumCert {
        &self.high_qc
    }

    pub fn sec_high_qc(&self) -> &QuorumCert {
        &self.sec_high_qc
    }

    pub fn curlock_qc(&self) -> &QuorumCert {
        &self.curlock_qc
    }

    pub fn laslock_qc(&self) -> &QuorumCert {
        &self.laslock_qc
    }

    pub fn verified_b(&self) -> &Arc<Block> {
        &self.verified_b
    }

    pub fn tc_pair(&self) -> Option<&(TimeoutCert, TimeoutCert)> {
        self.tc_pair.as_ref()
    }

    pub fn store(&self) -> &BlockStore {
        &self.store
    }

    pub fn genesis(&self) -> &MphGenesis {
        &self.genesis
    }

    fn sys(&self) -> &SystemConfig {
        &self.cfg.sys
    }

    // ---- verification ----

    pub fn verify_qc(&self, qc: &QuorumCert) -> bool {
        if self.qcs.get(&qc.bid) == Some(qc) {
            return true;
        }
        if qc.is_genesis() {
            return self.genesis.accepts(qc);
        }
        qc.v >= View(1)
            && self
                .scheme
                .tverify(&vote_message(&qc.bid, qc.v - 1), &qc.sigma)
    }

    fn verify_tc(&self, tc: &TimeoutCert) -> bool {
        self.scheme.tverify(&timeout_message(tc.v), &tc.sigma)
    }

    /// Signature, certificate and structural checks; no state involved.
    pub fn verify_block(&self, b: &Block) -> Result<(), Rejection> {
        if b.id != b.compute_id() || b.pv >= b.v || b.qc.v >= b.v || b.has_duplicate_txs() {
            return Err(Rejection::Malformed);
        }
        if b.rho.index != self.sys().leader_of(b.v)
            || !self.scheme.verify_partial(&proposal_message(&b.id), &b.rho)
        {
            return Err(Rejection::InvalidSignature);
        }
        if !self.verify_qc(&b.qc) {
            return Err(Rejection::InvalidSignature);
        }
        match (&b.tc, &b.tcs) {
            (None, None) => Ok(()),
            (Some(tc), Some((x, y))) => {
                if x.v + 1 != y.v || (tc != x && tc != y) {
                    return Err(Rejection::Malformed);
                }
                if !self.verify_tc(x) || !self.verify_tc(y) {
                    return Err(Rejection::InvalidSignature);
                }
                Ok(())
            }
            _ => Err(Rejection::Malformed),
        }
    }
}

/// The highest view that at least `f + 1` replicas have timed out in or
/// beyond, so at least one correct replica has reached it.
pub(crate) fn join_view(peer_tm: &BTreeMap<ReplicaId, View>, f: usize) -> Option<View> {
    let mut vs: Vec<View> = peer_tm.values().copied().collect();
    vs.sort_unstable_by(|a, b| b.cmp(a));
    vs.get(f).copied()
}

impl MphReplica {
    // ---- proposals ----

    fn on_proposal(&mut self, from: ReplicaId, b: Arc<Block>) {
        if let Some(first) = self.seen.get(&b.v) {
            if *first != b.id {
                self.out
                    .events
                    .push(EngineEvent::Equivocation { view: b.v });
                // never voted on, but later blocks may still build on it
                if self.verify_block(&b).is_ok() {
                    self.store.insert(b);
                    self.release_buffered();
                }
            }
            return;
        }
        if self.verify_block(&b).is_err() {
            return;
        }
        self.seen.insert(b.v, b.id);
        self.store.insert(b.clone());
        self.qcs.entry(b.qc.bid).or_insert_with(|| b.qc.clone());
        self.process_proposal(from, b);
        self.release_buffered();
    }

    /// Buffers `b` if it cannot be processed yet, otherwise runs the full
    /// proposal procedure. `b` is already verified and stored.
    fn process_proposal(&mut self, from: ReplicaId, b: Arc<Block>) {
        if b.v <= self.curr_view {
            // too late to vote, but its certificate may still complete a chain
            self.update_locks(&b);
            self.try_commit(&b);
            return;
        }
        let has_tc = b.tc.is_some();
        let parent_known = self.store.contains(&b.p);
        if !parent_known || (!has_tc && b.v > self.curr_view + 1) {
            if b.v <= self.curr_view + BUFFER_HORIZON {
                self.buffered.entry(b.v).or_insert((from, b.clone()));
            }
            if !parent_known {
                self.request_sync(from, b.p);
            }
            return;
        }

        self.process_qc(b.qc.clone());
        self.process_tc(&b);
        self.update_locks(&b);
        self.try_commit(&b);

        if let Some(branch) = self.vote_rule(&b) {
            self.vote_for(&b, branch);
            if branch == VoteBranch::Liveness1 && self.sys().leader_of(b.v + 1) == self.id {
                self.propose_timeout_s();
            }
        }
        self.release_held();
        self.maybe_propose_normal();
    }

    fn release_buffered(&mut self) {
        if self.releasing {
            return;
        }
        self.releasing = true;
        loop {
            let cv = self.curr_view;
            self.buffered.retain(|v, _| *v > cv);
            let ready = self
                .buffered
                .iter()
                .find(|(v, (_, b))| self.store.contains(&b.p) && (**v == cv + 1 || b.tc.is_some()))
                .map(|(v, _)| *v);
            let Some(v) = ready else { break };
            let (from, b) = self.buffered.remove(&v).unwrap();
            self.process_proposal(from, b);
        }
        self.releasing = false;
    }

    fn request_sync(&mut self, to: ReplicaId, id: Digest) {
        if to != self.id && self.requested.insert(id) {
            self.out.send(Dest::To(to), Message::SyncRequest(vec![id]));
        }
    }

    // ---- certificates ----

    /// Folds a verified QC into the two-highest tracking. Returns true if
    /// `high_qc` moved.
    fn track_qc(&mut self, qc: QuorumCert) -> bool {
        self.qcs.entry(qc.bid).or_insert_with(|| qc.clone());
        if qc.v > self.high_qc.v {
            self.sec_high_qc = std::mem::replace(&mut self.high_qc, qc);
            true
        } else {
            if qc.v > self.sec_high_qc.v && qc.v < self.high_qc.v {
                self.sec_high_qc = qc;
            }
            false
        }
    }

    pub fn process_qc(&mut self, qc: QuorumCert) -> bool {
        let v = qc.v;
        if self.track_qc(qc) {
            self.curr_view = self.curr_view.max(v);
            self.reset_timer();
            true
        } else {
            false
        }
    }

    /// Adopts view-change state carried by a post-timeout proposal.
    fn process_tc(&mut self, b: &Block) -> bool {
        let (Some(tc), Some((x, y))) = (&b.tc, &b.tcs) else {
            return false;
        };
        let (lo, hi) = if x.v < y.v { (x, y) } else { (y, x) };
        if tc == lo {
            if lo.v > self.highest_tcf {
                self.highest_tcf = lo.v;
                self.tc_pair = Some((lo.clone(), hi.clone()));
            }
        } else {
            self.highest_tcf = self.highest_tcf.max(lo.v);
            if self.tc_pair.as_ref().is_some_and(|(f, _)| f.v <= lo.v) {
                self.tc_pair = None;
            }
        }
        self.timeout_vs = self.timeout_vs.max(hi.v + 1);
        self.curr_view = self.curr_view.max(tc.v);
        self.reset_timer();
        true
    }

    fn update_locks(&mut self, b: &Block) {
        let Some(b1) = self.store.get(&b.qc.bid) else {
            return;
        };
        if b1.qc.v > self.curlock_qc.v && self.store.contains(&b1.qc.bid) {
            let new = b1.qc.clone();
            self.laslock_qc = std::mem::replace(&mut self.curlock_qc, new);
            self.out.events.push(EngineEvent::LockUpdated {
                curlock: self.curlock_qc.v,
                laslock: self.laslock_qc.v,
            });
        }
    }

    /// Three adjacent certified blocks `b3 <- b2 <- b1` reachable through
    /// the QC carried by `b`, two views apart in one pipeline and linked by
    /// parents, commit `b3` and its uncommitted ancestors.
    pub fn try_commit(&mut self, b: &Block) -> Vec<Digest> {
        let chain = (|| {
            let b1 = self.store.get(&b.qc.bid)?;
            let b2 = self.store.get(&b1.qc.bid)?;
            let b3 = self.store.get(&b2.qc.bid)?;
            if b3.v + 2 != b2.v || b2.v + 2 != b1.v {
                return None;
            }
            let linked = self.store.extends(b2, b1).ok()? && self.store.extends(b3, b2).ok()?;
            linked.then(|| b3.clone())
        })();
        let Some(b3) = chain else {
            return Vec::new();
        };
        if self.committed_ids.contains(&b3.id) {
            return Vec::new();
        }
        let mut pending = Vec::new();
        let mut cur = b3;
        while !self.committed_ids.contains(&cur.id) {
            let Some(parent) = self.store.get(&cur.p).cloned() else {
                // gap below the commit point: fetch and retry on a later block
                let (to, p) = (self.sys().leader_of(cur.v), cur.p);
                self.request_sync(to, p);
                return Vec::new();
            };
            pending.push(cur);
            cur = parent;
        }
        pending.reverse();
        let mut ids = Vec::with_capacity(pending.len());
        for blk in pending {
            self.committed_ids.insert(blk.id);
            self.mempool.mark_committed(&blk.txs);
            if let Err(crate::mempool::MempoolError::MissingBatch(missing)) =
                self.mempool.resolve(&blk.txs)
            {
                let to = self.sys().leader_of(blk.v);
                if to != self.id {
                    self.out.send(
                        Dest::To(to),
                        Message::BatchFetch(missing.into_iter().collect()),
                    );
                }
            } else {
                self.mempool.release(&blk.txs);
            }
            ids.push(blk.id);
            self.committed.push(blk.clone());
            self.out.committed.push(blk);
        }
        self.pacemaker.progress();
        ids
    }

    // ---- voting ----

    /// The vote predicate. Common to every branch: the block is for the
    /// next view, this replica has not voted that high, the embedded QC is
    /// at least the current lock and the parent is known with matching view.
    /// Locks are per pipeline: a QC only has to reach the lock of its own
    /// pipeline, and never the older of the two.
    fn lock_floor(&self, v: View) -> View {
        if self.curlock_qc.v.0 % 2 == v.0 % 2 {
            self.curlock_qc.v
        } else {
            self.laslock_qc.v
        }
    }

    pub fn vote_rule(&self, b: &Block) -> Option<VoteBranch> {
        if b.v != self.curr_view + 1 || b.v <= self.last_voted || b.qc.v < self.lock_floor(b.qc.v) {
            return None;
        }
        let parent = self.store.get(&b.p)?;
        if b.pv != parent.v {
            return None;
        }
        match (&b.tc, &b.tcs) {
            (None, None) => {
                let ok = b.v == b.qc.v + 1
                    && b.p == self.verified_b.id
                    && parent.p == b.qc.bid
                    && b.v > self.timeout_vs;
                ok.then_some(VoteBranch::Safety)
            }
            (Some(tc), Some((x, y))) if tc.v + 1 == b.v => {
                let (lo, hi) = if x.v < y.v { (x, y) } else { (y, x) };
                if tc == lo {
                    let ok = b.p == b.qc.bid && b.qc.v >= self.curlock_qc.v;
                    ok.then_some(VoteBranch::Liveness1)
                } else if tc == hi {
                    let ok = b.p == self.verified_b.id
                        && self.verified_b.v == lo.v + 1
                        && parent.p == b.qc.bid;
                    ok.then_some(VoteBranch::Liveness2)
                } else {
                    None
                }
            }
            _ => None,
        }
    }

    fn vote_for(&mut self, b: &Arc<Block>, _branch: VoteBranch) {
        if b.v > self.verified_b.v {
            self.verified_b = b.clone();
        }
        self.curr_view = self.curr_view.max(b.v);
        self.last_voted = b.v;
        let vote = Vote {
            voter: self.id,
            block_id: b.id,
            v: b.v,
            rho: self.scheme.tsign(&self.key, &vote_message(&b.id, b.v)),
        };
        self.out.events.push(EngineEvent::Voted {
            view: b.v,
            block: b.id,
        });
        let to = self.sys().leader_of(b.v + 2);
        self.deliver(Dest::To(to), Message::Vote(vote));
    }

    /// Sends `msg`, looping copies addressed to this replica back locally.
    fn deliver(&mut self, to: Dest, msg: Message) {
        match to {
            Dest::To(r) if r == self.id => self.local.push_back(msg),
            Dest::To(_) => self.out.send(to, msg),
            Dest::All => {
                self.local.push_back(msg.clone());
                self.out.send(Dest::All, msg);
            }
        }
    }

    fn reset_timer(&mut self) {
        let d = self.pacemaker.reset(self.now);
        self.out.timer_reset = Some(d);
    }
}

impl MphReplica {
    // ---- votes ----

    fn on_vote(&mut self, vote: Vote) {
        if self.sys().leader_of(vote.v + 2) != self.id
            || self.formed_qc.contains(&vote.v)
            || vote.v + 1 <= self.high_qc.v
            || vote.rho.index != vote.voter
        {
            return;
        }
        if !self
            .scheme
            .verify_partial(&vote_message(&vote.block_id, vote.v), &vote.rho)
        {
            return;
        }
        let shares = self
            .votes
            .entry(vote.v)
            .or_default()
            .entry(vote.block_id)
            .or_default();
        shares.entry(vote.voter).or_insert(vote.rho);
        if shares.len() < self.cfg.sys.quorum {
            return;
        }
        let parts: Vec<PartialSig> = shares.values().copied().collect();
        let Ok(sigma) = self
            .scheme
            .tcombine(&vote_message(&vote.block_id, vote.v), &parts)
        else {
            return;
        };
        let qc = QuorumCert {
            bid: vote.block_id,
            v: vote.v + 1,
            sigma,
        };
        self.formed_qc.insert(vote.v);
        self.votes = self.votes.split_off(&(vote.v + 1));
        self.out.events.push(EngineEvent::QcFormed(qc.clone()));
        self.held_qcs.insert(qc.v, qc);
        self.release_held();
        self.maybe_propose_normal();
    }

    /// Applies held QCs once the intervening proposal has been processed.
    fn release_held(&mut self) {
        while let Some(entry) = self.held_qcs.first_entry() {
            if *entry.key() > self.curr_view {
                break;
            }
            let qc = entry.remove();
            self.process_qc(qc);
        }
    }

    /// Folds held QCs into tracking without moving the view, before a
    /// timeout or a view-change proposal.
    fn fold_held(&mut self) {
        for (_, qc) in std::mem::take(&mut self.held_qcs) {
            self.track_qc(qc);
        }
    }

    // ---- timeouts ----

    fn send_timeout(&mut self, vf: View) {
        let vs = vf + 1;
        self.last_tm_vf = self.last_tm_vf.max(vf);
        self.timeout_vs = self.timeout_vs.max(vs);
        let tm = TimeoutMessage {
            sender: self.id,
            vf,
            vs,
            rho_f: self.scheme.tsign(&self.key, &timeout_message(vf)),
            rho_s: self.scheme.tsign(&self.key, &timeout_message(vs)),
            high_qc: self.high_qc.clone(),
            sec_high_qc: self.sec_high_qc.clone(),
        };
        self.out.events.push(EngineEvent::TimeoutSent { vf });
        self.deliver(Dest::All, Message::Timeout(tm));
    }

    fn local_timeout(&mut self) {
        self.fold_held();
        self.requested.clear();
        let vf = (self.curr_view + 1)
            .max(self.highest_tcf + 1)
            .max(self.last_tm_vf);
        self.send_timeout(vf);
        let d = self.pacemaker.expired(self.now);
        self.out.timer_reset = Some(d);
    }

    fn on_timeout_msg(&mut self, tm: TimeoutMessage) {
        if tm.vs != tm.vf + 1
            || tm.rho_f.index != tm.sender
            || tm.rho_s.index != tm.sender
            || tm.high_qc.v < tm.sec_high_qc.v
            || (tm.sender as usize) >= self.cfg.sys.n
        {
            return;
        }
        if !self
            .scheme
            .verify_partial(&timeout_message(tm.vf), &tm.rho_f)
            || !self
                .scheme
                .verify_partial(&timeout_message(tm.vs), &tm.rho_s)
            || !self.verify_qc(&tm.high_qc)
            || !self.verify_qc(&tm.sec_high_qc)
        {
            return;
        }
        self.track_qc(tm.high_qc.clone());
        self.track_qc(tm.sec_high_qc.clone());
        if tm.vf <= self.highest_tcf {
            return;
        }
        let vf = tm.vf;
        let peer = self.peer_tm.entry(tm.sender).or_default();
        *peer = (*peer).max(vf);
        let set = self.timeouts.entry(vf).or_default();
        set.entry(tm.sender).or_insert(tm);
        let count = set.len();

        // join a view change once f+1 replicas vouch for it
        if let Some(join) = join_view(&self.peer_tm, self.cfg.sys.f) {
            if join > self.last_tm_vf && join > self.highest_tcf {
                self.send_timeout(join);
                self.reset_timer();
            }
        }
        if count < self.cfg.sys.quorum {
            return;
        }
        let set = &self.timeouts[&vf];
        let fs: Vec<PartialSig> = set.values().map(|t| t.rho_f).collect();
        let ss: Vec<PartialSig> = set.values().map(|t| t.rho_s).collect();
        let (Ok(sf), Ok(ss)) = (
            self.scheme.tcombine(&timeout_message(vf), &fs),
            self.scheme.tcombine(&timeout_message(vf + 1), &ss),
        ) else {
            return;
        };
        let tcf = TimeoutCert { v: vf, sigma: sf };
        let tcs = TimeoutCert {
            v: vf + 1,
            sigma: ss,
        };
        // one event per view change; the tcs half is implied
        self.out.events.push(EngineEvent::TcFormed(tcf.clone()));
        self.highest_tcf = vf;
        self.timeouts = self.timeouts.split_off(&(vf + 1));
        self.tc_pair = Some((tcf, tcs));
        self.timeout_vs = self.timeout_vs.max(vf + 2);
        self.curr_view = self.curr_view.max(vf);
        self.reset_timer();
        if self.sys().leader_of(vf + 1) == self.id {
            self.propose_timeout_f();
        }
        self.release_buffered();
    }

    // ---- proposing ----

    fn maybe_propose_normal(&mut self) {
        let next = self.curr_view + 1;
        if self.sys().leader_of(next) != self.id
            || self.proposed.contains(&next)
            || next <= self.timeout_vs
            || self.verified_b.v != self.curr_view
        {
            return;
        }
        let parent = self.verified_b.clone();
        let qc = [&self.high_qc, &self.sec_high_qc]
            .into_iter()
            .find(|q| q.v == self.curr_view && q.bid == parent.p)
            .cloned();
        if let Some(qc) = qc {
            self.propose(ProposalKind::Normal, next, parent, qc, None);
        }
    }

    fn propose_timeout_f(&mut self) {
        let Some((tcf, _)) = self.tc_pair.clone() else {
            return;
        };
        self.fold_held();
        // extend the highest certified block we hold, justified by its own QC
        let candidates = [self.high_qc.clone(), self.sec_high_qc.clone()];
        for qc in candidates {
            let Some(parent) = self.store.get(&qc.bid).cloned() else {
                continue;
            };
            if parent.v > tcf.v {
                continue;
            }
            self.propose(ProposalKind::TimeoutF, tcf.v + 1, parent, qc, Some(true));
            return;
        }
        let (to, bid) = (self.sys().leader_of(self.high_qc.v - 1), self.high_qc.bid);
        self.request_sync(to, bid);
    }

    fn propose_timeout_s(&mut self) {
        let Some((_, tcs)) = self.tc_pair.clone() else {
            return;
        };
        if self.verified_b.v != tcs.v {
            return;
        }
        let parent = self.verified_b.clone();
        let Some(qc) = self.qcs.get(&parent.p).cloned() else {
            return;
        };
        self.propose(ProposalKind::TimeoutS, tcs.v + 1, parent, qc, Some(false));
    }

    /// `first_tc`: which member of the stored pair goes in `tc`, if any.
    fn propose(
        &mut self,
        kind: ProposalKind,
        v: View,
        parent: Arc<Block>,
        qc: QuorumCert,
        first_tc: Option<bool>,
    ) {
        if !self.proposed.insert(v) || !self.cfg.behavior.proposes_in(v) {
            return;
        }
        let (tc, tcs) = match (first_tc, &self.tc_pair) {
            (Some(first), Some((f, s))) => {
                let tc = if first { f.clone() } else { s.clone() };
                (Some(tc), Some((f.clone(), s.clone())))
            }
            _ => (None, None),
        };
        // with a gap in the branch there is no telling what it already carries
        let txs = match self.branch_digests(&parent) {
            Some(exclude) => self.mempool.next_payload(self.cfg.batch_size, &exclude),
            None => Vec::new(),
        };
        let b = self.build_block(v, &parent, txs, qc.clone(), tc.clone(), tcs.clone());
        self.out.events.push(EngineEvent::Proposed {
            view: v,
            block: b.clone(),
            kind,
        });
        if self.cfg.behavior == Behavior::Equivocate {
            let mut alt = b.txs.clone();
            alt.push(Digest::of_parts(&[b"mph/equivocate", &v.0.to_le_bytes()]));
            let twin = self.build_block(v, &parent, alt, qc, tc, tcs);
            let n = self.cfg.sys.n as ReplicaId;
            for r in 0..n {
                if r == self.id {
                    continue;
                }
                let which = if r < n / 2 { &b } else { &twin };
                self.out.send(Dest::To(r), Message::Proposal(which.clone()));
                // one replica gets both, twin first
                if r == n / 2 {
                    self.out.send(Dest::To(r), Message::Proposal(b.clone()));
                }
            }
            self.local.push_back(Message::Proposal(b));
        } else {
            self.deliver(Dest::All, Message::Proposal(b));
        }
    }

    fn build_block(
        &self,
        v: View,
        parent: &Block,
        txs: Vec<Digest>,
        qc: QuorumCert,
        tc: Option<TimeoutCert>,
        tcs: Option<(TimeoutCert, TimeoutCert)>,
    ) -> Arc<Block> {
        let id = block_digest(v, &parent.id, &txs, &qc);
        Arc::new(Block {
            id,
            v,
            p: parent.id,
            pv: parent.v,
            txs,
            qc,
            tc,
            tcs,
            rho: self.scheme.tsign(&self.key, &proposal_message(&id)),
        })
    }

    /// Digests carried by uncommitted ancestors, inclusive of `from`.
    /// Digests carried by uncommitted blocks from `from` down to the last
    /// committed block, or `None` if an ancestor on the way is missing.
    fn branch_digests(&self, from: &Block) -> Option<BTreeSet<Digest>> {
        let mut out = BTreeSet::new();
        let mut cur = from;
        for _ in 0..EXCLUDE_DEPTH {
            if self.committed_ids.contains(&cur.id) || cur.v == View::ZERO {
                break;
            }
            out.extend(cur.txs.iter().copied());
            cur = self.store.get(&cur.p)?.as_ref();
        }
        Some(out)
    }

    // ---- sync and mempool plumbing ----

    fn on_sync_request(&mut self, from: ReplicaId, ids: Vec<Digest>) {
        let mut blocks = Vec::new();
        for id in ids.into_iter().take(8) {
            let mut chain = Vec::new();
            let mut cur = self.store.get(&id);
            while let Some(b) = cur {
                if chain.len() >= SYNC_DEPTH || b.v <= View(1) {
                    break;
                }
                chain.push(b.as_ref().clone());
                cur = self.store.get(&b.p);
            }
            chain.reverse();
            blocks.extend(chain);
        }
        if !blocks.is_empty() {
            self.out.send(Dest::To(from), Message::SyncResponse(blocks));
        }
    }

    fn on_sync_response(&mut self, from: ReplicaId, blocks: Vec<Block>) {
        for b in blocks {
            if self.store.contains(&b.id) || self.verify_block(&b).is_err() {
                continue;
            }
            self.qcs.entry(b.qc.bid).or_insert_with(|| b.qc.clone());
            let missing_parent = !self.store.contains(&b.p);
            let p = b.p;
            let b = Arc::new(b);
            self.store.insert(b.clone());
            // a proposal that reached us only through sync still gets a vote
            if b.v > self.curr_view && !self.seen.contains_key(&b.v) {
                self.seen.insert(b.v, b.id);
                self.buffered.entry(b.v).or_insert((from, b));
            }
            if missing_parent {
                self.request_sync(from, p);
            }
        }
        self.release_buffered();
    }

    fn flush_batch(&mut self, force: bool) {
        let pending = self.mempool.pending_bytes();
        if pending == 0 || (!force && pending < self.cfg.dissemination_bytes) {
            return;
        }
        while self.mempool.pending_bytes() >= self.cfg.dissemination_bytes
            || (force && self.mempool.pending_len() > 0)
        {
            let batch = self.mempool.make_batch(self.cfg.dissemination_bytes);
            self.out.send(Dest::All, Message::Batch(Arc::new(batch)));
        }
    }

    fn dispatch(&mut self, from: ReplicaId, msg: Message) {
        match msg {
            Message::Proposal(b) => self.on_proposal(from, b),
            Message::Vote(v) => self.on_vote(v),
            Message::Timeout(tm) => self.on_timeout_msg(tm),
            Message::SyncRequest(ids) => self.on_sync_request(from, ids),
            Message::SyncResponse(bs) => self.on_sync_response(from, bs),
            Message::Batch(b) => {
                let _ = self.mempool.receive_batch(&b);
            }
            Message::BatchFetch(ids) => {
                let txs = self.mempool.lookup(&ids);
                if !txs.is_empty() {
                    self.out
                        .send(Dest::To(from), Message::BatchFetchResponse(txs));
                }
            }
            Message::BatchFetchResponse(txs) => self.mempool.receive_fetched(&txs),
            Message::HsTimeout(_) => {}
        }
    }

    fn drain(&mut self) -> EngineOutput {
        while let Some(m) = self.local.pop_front() {
            self.dispatch(self.id, m);
        }
        std::mem::take(&mut self.out)
    }
}

impl Replica for MphReplica {
    fn id(&self) -> ReplicaId {
        self.id
    }

    fn start(&mut self, now: Time) -> EngineOutput {
        self.now = now;
        self.reset_timer();
        self.maybe_propose_normal();
        self.drain()
    }

    fn handle(&mut self, from: ReplicaId, msg: Message, now: Time) -> EngineOutput {
        self.now = now;
        self.dispatch(from, msg);
        self.drain()
    }

    fn on_timer(&mut self, now: Time) -> EngineOutput {
        self.now = now;
        self.local_timeout();
        self.drain()
    }

    fn submit(&mut self, tx: Transaction, now: Time) -> EngineOutput {
        self.now = now;
        if self.mempool.submit(tx, now).is_ok() {
            self.flush_batch(false);
        }
        self.drain()
    }

    fn flush(&mut self, now: Time) -> EngineOutput {
        self.now = now;
        self.flush_batch(true);
        self.drain()
    }

    fn timer_deadline(&self) -> Option<Time> {
        self.pacemaker.deadline()
    }

    fn curr_view(&self) -> View {
        self.curr_view
    }

    fn committed(&self) -> &[Arc<Block>] {
        &self.committed
    }

    fn mempool(&self) -> &Mempool {
        &self.mempool
    }

    fn mempool_mut(&mut self) -> &mut Mempool {
        &mut self.mempool
    }
}

#[cfg(test)]
mod tests {
    use std::collections::VecDeque;

    use super::*;
    use crate::crypto::HashThreshold;

    /// FIFO lockstep router over four replicas.
    struct Net {
        reps: Vec<MphReplica>,
        queue: VecDeque<(ReplicaId, ReplicaId, Message)>,
        now: Time,
    }

    impl Net {
        fn new() -> Net {
            let sys = SystemConfig::new(4).unwrap();
            let (scheme, keys) = HashThreshold::generate(sys, 9);
            let scheme: Arc<dyn ThresholdScheme> = Arc::new(scheme);
            let reps = keys
                .into_iter()
                .map(|k| MphReplica::new(MphConfig::new(sys), scheme.clone(), k))
                .collect();
            let mut net = Net {
                reps,
                queue: VecDeque::new(),
                now: 0,
            };
            for r in 0..4 {
                let out = net.reps[r].start(0);
                net.route(r as ReplicaId, out);
            }
            net
        }

        fn route(&mut self, from: ReplicaId, out: EngineOutput) {
            for (dest, msg) in out.outbound {
                match dest {
                    Dest::To(to) => self.queue.push_back((from, to, msg)),
                    Dest::All => {
                        for to in (0..4).filter(|t| *t != from) {
                            self.queue.push_back((from, to, msg.clone()));
                        }
                    }
                }
            }
        }

        /// Delivers messages until `stop` matches one (which is returned
        /// undelivered) or the queue drains.
        fn run_until(
            &mut self,
            mut stop: impl FnMut(ReplicaId, &Message) -> bool,
        ) -> Option<(ReplicaId, ReplicaId, Message)> {
            while let Some((from, to, msg)) = self.queue.pop_front() {
                if stop(to, &msg) {
                    return Some((from, to, msg));
                }
                self.now += 1;
                let out = self.reps[to as usize].handle(from, msg, self.now);
                self.route(to, out);
            }
            None
        }

        fn deliver(&mut self, from: ReplicaId, to: ReplicaId, msg: Message) -> EngineOutput {
            self.now += 1;
            let out = self.reps[to as usize].handle(from, msg, self.now);
            let copy = EngineOutput {
                outbound: out.outbound.clone(),
                committed: out.committed.clone(),
                timer_reset: out.timer_reset,
                events: out.events.clone(),
            };
            self.route(to, out);
            copy
        }
    }

    fn proposal_at(v: u64, at: ReplicaId) -> impl FnMut(ReplicaId, &Message) -> bool {
        move |to, m| matches!(m, Message::Proposal(b) if b.v == View(v) && to == at)
    }

    #[test]
    fn steady_state_vote() {
        let mut net = Net::new();
        let (from, to, msg) = net.run_until(proposal_at(5, 0)).unwrap();
        let Message::Proposal(b5) = msg.clone() else {
            unreachable!()
        };
        let r = &net.reps[0];
        assert_eq!(r.curr_view(), View(4));
        assert_eq!(b5.p, r.verified_b().id);
        assert_eq!(b5.qc.v, View(4));
        assert_eq!(r.vote_rule(&b5), Some(VoteBranch::Safety));

        let out = net.deliver(from, to, msg);
        let leader7 = net.reps[0].sys().leader_of(View(7));
        assert!(out.outbound.iter().any(|(d, m)| {
            *d == Dest::To(leader7) && matches!(m, Message::Vote(v) if v.block_id == b5.id)
        }));
        let r = &net.reps[0];
        assert_eq!(r.verified_b().id, b5.id);
        assert_eq!(r.curr_view(), View(5));
    }

    #[test]
    fn fourth_pipeline_block_commits_first() {
        let mut net = Net::new();
        let (from, to, msg) = net.run_until(proposal_at(8, 3)).unwrap();
        let Message::Proposal(b8) = msg.clone() else {
            unreachable!()
        };
        let store = net.reps[3].store();
        let b6 = store.get(&b8.qc.bid).unwrap().clone();
        let b4 = store.get(&b6.qc.bid).unwrap().clone();
        let b2 = store.get(&b4.qc.bid).unwrap().clone();
        assert_eq!((b6.v, b4.v, b2.v), (View(6), View(4), View(2)));

        let out = net.deliver(from, to, msg);
        let ids: Vec<Digest> = out.committed.iter().map(|b| b.id).collect();
        assert_eq!(ids, vec![b2.id]);
        // already committed: nothing new
        assert!(net.reps[3].try_commit(&b8).is_empty());
    }

    #[test]
    fn tampered_signature_is_dropped() {
        let mut net = Net::new();
        let (from, to, msg) = net.run_until(proposal_at(3, 2)).unwrap();
        let Message::Proposal(b) = msg else {
            unreachable!()
        };
        let mut bad = (*b).clone();
        bad.rho.tag[0] ^= 1;
        assert_eq!(
            net.reps[2].verify_block(&bad),
            Err(Rejection::InvalidSignature)
        );
        let before = (net.reps[2].curr_view(), net.reps[2].verified_b().id);
        let out = net.deliver(from, to, Message::Proposal(Arc::new(bad)));
        assert!(out.outbound.is_empty() && out.events.is_empty());
        assert_eq!(
            before,
            (net.reps[2].curr_view(), net.reps[2].verified_b().id)
        );
    }

    #[test]
    fn non_consecutive_view_gets_no_vote() {
        let mut net = Net::new();
        let (_, _, msg) = net.run_until(proposal_at(5, 0)).unwrap();
        let Message::Proposal(b) = msg else {
            unreachable!()
        };
        let mut far = (*b).clone();
        far.v = View(7);
        assert_eq!(net.reps[0].vote_rule(&far), None);
    }

    #[test]
    fn qc_view_is_block_view_plus_one() {
        let mut net = Net::new();
        let mut formed = Vec::new();
        for r in 0..4 {
            net.reps[r].cfg.timeout = Time::MAX / 4;
        }
        while let Some((from, to, msg)) = net.queue.pop_front() {
            let out = net.deliver(from, to, msg);
            for e in out.events {
                if let EngineEvent::QcFormed(qc) = e {
                    formed.push((to, qc));
                }
            }
            if formed.len() > 12 {
                break;
            }
        }
        for (r, qc) in formed {
            let b = net.reps[r as usize].store().get(&qc.bid).unwrap();
            assert_eq!(qc.v, b.v + 1);
        }
    }

    #[test]
    fn below_quorum_votes_accumulate() {
        let mut net = Net::new();
        // votes for b5 go to the leader of view 7
        let leader = net.reps[0].sys().leader_of(View(7));
        let mut held = Vec::new();
        let mut stop = |to: ReplicaId, m: &Message| {
            matches!(m, Message::Vote(v) if v.v == View(5)) && to == leader
        };
        // the leader's own vote is counted locally
        for _ in 0..2 {
            held.push(net.run_until(&mut stop).unwrap());
        }
        let mut formed = 0;
        for (i, (from, to, msg)) in held.into_iter().enumerate() {
            let out = net.deliver(from, to, msg);
            let qcs = out
                .events
                .iter()
                .filter(|e| matches!(e, EngineEvent::QcFormed(q) if q.v == View(6)))
                .count();
            if i < 1 {
                assert_eq!(qcs, 0);
            }
            formed += qcs;
        }
        assert_eq!(formed, 1);
    }

    #[test]
    fn join_view_takes_f_plus_first_highest() {
        // split timeouts 2, 2, 3, 4 with f = 1: two replicas are at 3 or beyond
        let peers: BTreeMap<ReplicaId, View> =
            [(0, View(2)), (1, View(2)), (2, View(3)), (3, View(4))].into();
        assert_eq!(join_view(&peers, 1), Some(View(3)));
        assert_eq!(join_view(&peers, 3), Some(View(2)));
        assert_eq!(join_view(&peers, 4), None);
    }

    #[test]
    fn process_qc_shifts_and_ignores_stale() {
        let mut net = Net::new();
        let g = net.reps[0].genesis().clone();
        assert_eq!(
            (net.reps[0].high_qc().v, net.reps[0].sec_high_qc().v),
            (View(2), View(1))
        );
        // first real certificate: QC on b2, v = 3
        let mut first = None;
        while let Some((from, to, msg)) = net.queue.pop_front() {
            let out = net.deliver(from, to, msg);
            if let Some(q) = out.events.iter().find_map(|e| match e {
                EngineEvent::QcFormed(q) => Some(q.clone()),
                _ => None,
            }) {
                first = Some((to, q));
                break;
            }
        }
        let (r, q3) = first.unwrap();
        assert_eq!(q3.v, View(3));
        let r = &mut net.reps[r as usize];
        r.process_qc(q3.clone());
        assert_eq!(r.high_qc(), &q3);
        assert_eq!(r.sec_high_qc(), &g.qc1);
        assert!(!r.process_qc(g.qc0.clone()));
        assert_eq!(r.high_qc(), &q3);
    }

    #[test]
    fn view_change_flow() {
        let mut net = Net::new();
        // votes on b4 are lost, so the leader of view 6 never gets its QC
        while let Some((from, to, msg)) = net.queue.pop_front() {
            if !matches!(&msg, Message::Vote(v) if v.v == View(4)) {
                net.deliver(from, to, msg);
            }
        }
        for r in 0..4 {
            assert_eq!(net.reps[r].curr_view(), View(5));
            net.now += 1;
            let out = net.reps[r].on_timer(net.now);
            let tm = out.outbound.iter().find_map(|(_, m)| match m {
                Message::Timeout(t) => Some((t.vf, t.vs)),
                _ => None,
            });
            assert_eq!(tm, Some((View(6), View(7))));
            net.route(r as ReplicaId, out);
        }
        // the first post-timeout block skips the stalled leader of view 6
        let leader7 = net.reps[0].sys().leader_of(View(7));
        let (from, to, msg) = net.run_until(proposal_at(7, 0)).unwrap();
        assert_eq!(from, leader7);
        let Message::Proposal(bf) = msg.clone() else {
            unreachable!()
        };
        let r = &net.reps[0];
        let (tcf, tcs) = r.tc_pair().unwrap().clone();
        assert_eq!((tcf.v, tcs.v), (View(6), View(7)));
        assert_eq!(bf.tc.as_ref().map(|t| t.v), Some(tcf.v));
        assert_eq!(bf.p, bf.qc.bid);
        assert_eq!(r.vote_rule(&bf), Some(VoteBranch::Liveness1));
        net.deliver(from, to, msg);

        // leader of view 8 does not receive its own proposal, so watch a peer
        let peer = (net.reps[0].sys().leader_of(View(8)) + 1) % 4;
        let (from, to, msg) = net.run_until(proposal_at(8, peer)).unwrap();
        let Message::Proposal(bs) = msg.clone() else {
            unreachable!()
        };
        assert_eq!((bs.p, bs.pv), (bf.id, View(7)));
        assert_eq!(bs.tc.as_ref().map(|t| t.v), Some(tcs.v));
        assert_eq!(
            net.reps[peer as usize].vote_rule(&bs),
            Some(VoteBranch::Liveness2)
        );
        net.deliver(from, to, msg);
        assert!(net.reps[peer as usize].tc_pair().is_none());

        // normal operation resumes and commits again
        let before = net.reps[0].committed().len();
        net.run_until(proposal_at(15, 0)).unwrap();
        assert!(net.reps[0].committed().len() > before);
    }
}
