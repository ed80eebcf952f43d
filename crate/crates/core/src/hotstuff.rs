//! Chained HotStuff baseline in the DiemBFT style.
//!
//! Each view takes two message rounds: the leader broadcasts a block
//! extending the block of its highest QC, replicas vote to the next leader,
//! which forms the QC (`qc.v` = certified block's view) and proposes. The
//! lock is the 2-chain QC; a block commits at the head of three certified
//! blocks in consecutive views. Timeouts are broadcast with the sender's
//! highest QC and a quorum of them forms a TC for the timed-out view.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use crate::crypto::{Digest, KeyShare, PartialSig, ThresholdScheme};
use crate::engine::{Behavior, Dest, EngineEvent, EngineOutput, Pacemaker, ProposalKind, Replica};
use crate::genesis::HsGenesis;
use crate::mempool::{Mempool, DEFAULT_BLOCK_SIZE, DEFAULT_DISSEMINATION_BYTES};
use crate::message::Message;
use crate::mph::join_view;
use crate::types::{
    block_digest, proposal_message, timeout_message, vote_message, Block, BlockStore, HsTimeout,
    QuorumCert, ReplicaId, SystemConfig, Time, TimeoutCert, Transaction, View, Vote, MILLIS,
};

const SYNC_DEPTH: usize = 32;
const EXCLUDE_DEPTH: usize = 64;

#[derive(Clone, Debug)]
pub struct HsConfig {
    pub sys: SystemConfig,
    pub timeout: Time,
    pub batch_size: usize,
    pub dissemination_bytes: usize,
    pub behavior: Behavior,
}

impl HsConfig {
    pub fn new(sys: SystemConfig) -> HsConfig {
        HsConfig {
            sys,
            timeout: 500 * MILLIS,
            batch_size: DEFAULT_BLOCK_SIZE,
            dissemination_bytes: DEFAULT_DISSEMINATION_BYTES,
            behavior: Behavior::Honest,
        }
    }
}

pub struct HsReplica {
    id: ReplicaId,
    cfg: HsConfig,
    scheme: Arc<dyn ThresholdScheme>,
    key: KeyShare,
    genesis: HsGenesis,

    curr_view: View,
    high_qc: QuorumCert,
    locked_qc: QuorumCert,
    last_voted: View,
    last_tc: Option<TimeoutCert>,
    last_tm_view: View,

    votes: BTreeMap<View, BTreeMap<Digest, BTreeMap<ReplicaId, PartialSig>>>,
    formed_qc: BTreeSet<View>,
    timeouts: BTreeMap<View, BTreeMap<ReplicaId, HsTimeout>>,
    peer_tm: BTreeMap<ReplicaId, View>,
    qcs: BTreeMap<Digest, QuorumCert>,

    store: BlockStore,
    seen: BTreeMap<View, Digest>,
    buffered: BTreeMap<View, (ReplicaId, Arc<Block>)>,
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

impl HsReplica {
    pub fn new(cfg: HsConfig, scheme: Arc<dyn ThresholdScheme>, key: KeyShare) -> HsReplica {
        let genesis = HsGenesis::new();
        let mut store = BlockStore::default();
        store.insert(genesis.g.clone());
        let mut qcs = BTreeMap::new();
        qcs.insert(genesis.qc.bid, genesis.qc.clone());
        HsReplica {
            id: key.index,
            pacemaker: Pacemaker::new(cfg.timeout),
            mempool: Mempool::new(key.index),
            curr_view: View(1),
            high_qc: genesis.qc.clone(),
            locked_qc: genesis.qc.clone(),
            last_voted: View::ZERO,
            last_tc: None,
            last_tm_view: View::ZERO,
            votes: BTreeMap::new(),
            formed_qc: BTreeSet::new(),
            timeouts: BTreeMap::new(),
            peer_tm: BTreeMap::new(),
            qcs,
            store,
            seen: BTreeMap::new(),
            buffered: BTreeMap::new(),
            requested: BTreeSet::new(),
            proposed: BTreeSet::new(),
            committed: Vec::new(),
            committed_ids: [genesis.g.id].into_iter().collect(),
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

    pub fn locked_qc(&self) -> &QuorumCert {
        &self.locked_qc
    }

    pub fn store(&self) -> &BlockStore {
        &self.store
    }

    fn sys(&self) -> &SystemConfig {
        &self.cfg.sys
    }

    pub fn verify_qc(&self, qc: &QuorumCert) -> bool {
        if self.qcs.get(&qc.bid) == Some(qc) {
            return true;
        }
        if qc.is_genesis() {
            return self.genesis.accepts(qc);
        }
        self.scheme.tverify(&vote_message(&qc.bid, qc.v), &qc.sigma)
    }

    pub fn verify_block(&self, b: &Block) -> bool {
        b.id == b.compute_id()
            && b.qc.v < b.v
            && b.pv < b.v
            && b.p == b.qc.bid
            && b.tcs.is_none()
            && !b.has_duplicate_txs()
            && b.rho.index == self.sys().leader_of(b.v)
            && self.scheme.verify_partial(&proposal_message(&b.id), &b.rho)
            && self.verify_qc(&b.qc)
            && b.tc.as_ref().map_or(true, |tc| {
                tc.v < b.v && self.scheme.tverify(&timeout_message(tc.v), &tc.sigma)
            })
    }

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

    fn request_sync(&mut self, to: ReplicaId, id: Digest) {
        if to != self.id && self.requested.insert(id) {
            self.out.send(Dest::To(to), Message::SyncRequest(vec![id]));
        }
    }

    fn advance_to(&mut self, v: View) {
        if v > self.curr_view {
            self.curr_view = v;
            self.reset_timer();
        }
    }

    fn process_qc(&mut self, qc: &QuorumCert) {
        self.qcs.entry(qc.bid).or_insert_with(|| qc.clone());
        if qc.v > self.high_qc.v {
            self.high_qc = qc.clone();
        }
        self.advance_to(qc.v + 1);
    }

    fn process_tc(&mut self, tc: &TimeoutCert) {
        if self.last_tc.as_ref().map_or(true, |t| t.v < tc.v) {
            self.last_tc = Some(tc.clone());
        }
        self.advance_to(tc.v + 1);
    }

    // ---- proposals ----

    fn on_proposal(&mut self, from: ReplicaId, b: Arc<Block>) {
        if let Some(first) = self.seen.get(&b.v) {
            if *first != b.id {
                self.out
                    .events
                    .push(EngineEvent::Equivocation { view: b.v });
                // never voted on, but later blocks may still build on it
                if self.verify_block(&b) {
                    self.store.insert(b);
                    self.release_buffered();
                }
            }
            return;
        }
        if !self.verify_block(&b) {
            return;
        }
        self.seen.insert(b.v, b.id);
        self.store.insert(b.clone());
        self.process_proposal(from, b);
        self.release_buffered();
    }

    /// Processes buffered blocks whose parent has arrived.
    fn release_buffered(&mut self) {
        let ready: Vec<View> = self
            .buffered
            .iter()
            .filter(|(_, (_, x))| self.store.contains(&x.p))
            .map(|(v, _)| *v)
            .collect();
        for v in ready {
            if let Some((f, x)) = self.buffered.remove(&v) {
                self.process_proposal(f, x);
            }
        }
    }

    fn process_proposal(&mut self, from: ReplicaId, b: Arc<Block>) {
        if !self.store.contains(&b.p) {
            self.buffered.entry(b.v).or_insert((from, b.clone()));
            self.request_sync(from, b.p);
            return;
        }
        self.process_qc(&b.qc);
        if let Some(tc) = &b.tc {
            self.process_tc(tc);
        }
        // 2-chain lock
        if let Some(b1) = self.store.get(&b.qc.bid) {
            if b1.qc.v > self.locked_qc.v {
                self.locked_qc = b1.qc.clone();
                // single lock: reported in both slots
                self.out.events.push(EngineEvent::LockUpdated {
                    curlock: self.locked_qc.v,
                    laslock: self.locked_qc.v,
                });
            }
        }
        self.try_commit(&b);

        if self.vote_rule(&b) {
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
            let to = self.sys().leader_of(b.v + 1);
            self.deliver(Dest::To(to), Message::Vote(vote));
            // now waiting on the next leader; a timeout from here names its view
            self.advance_to(b.v + 1);
        }
    }

    pub fn vote_rule(&self, b: &Block) -> bool {
        if b.v != self.curr_view || b.v <= self.last_voted {
            return false;
        }
        b.v == b.qc.v + 1
            || b.tc
                .as_ref()
                .is_some_and(|tc| b.v == tc.v + 1 && b.qc.v >= self.locked_qc.v)
    }

    /// Commits the head of three certified blocks in consecutive views.
    pub fn try_commit(&mut self, b: &Block) -> Vec<Digest> {
        let head = (|| {
            let b1 = self.store.get(&b.qc.bid)?;
            let b2 = self.store.get(&b1.qc.bid)?;
            let b3 = self.store.get(&b2.qc.bid)?;
            (b1.p == b2.id && b2.p == b3.id && b2.v == b3.v + 1 && b1.v == b2.v + 1)
                .then(|| b3.clone())
        })();
        let Some(b3) = head else { return Vec::new() };
        let mut pending = Vec::new();
        let mut cur = b3;
        while !self.committed_ids.contains(&cur.id) {
            let Some(parent) = self.store.get(&cur.p).cloned() else {
                let (to, p) = (self.sys().leader_of(cur.v), cur.p);
                self.request_sync(to, p);
                return Vec::new();
            };
            pending.push(cur);
            cur = parent;
        }
        pending.reverse();
        let mut ids = Vec::new();
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
        if !ids.is_empty() {
            self.pacemaker.progress();
        }
        ids
    }

    // ---- votes and proposing ----

    fn on_vote(&mut self, vote: Vote) {
        if self.sys().leader_of(vote.v + 1) != self.id
            || self.formed_qc.contains(&vote.v)
            || vote.v < self.high_qc.v
            || vote.rho.index != vote.voter
            || !self
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
            v: vote.v,
            sigma,
        };
        self.formed_qc.insert(vote.v);
        self.votes = self.votes.split_off(&(vote.v + 1));
        self.out.events.push(EngineEvent::QcFormed(qc.clone()));
        self.process_qc(&qc);
        self.maybe_propose();
    }

    fn maybe_propose(&mut self) {
        let v = self.curr_view;
        if self.sys().leader_of(v) != self.id || self.proposed.contains(&v) {
            return;
        }
        let Some(parent) = self.store.get(&self.high_qc.bid).cloned() else {
            return;
        };
        let tc = if self.high_qc.v + 1 == v {
            None
        } else {
            match &self.last_tc {
                Some(tc) if tc.v + 1 == v => Some(tc.clone()),
                _ => return,
            }
        };
        self.proposed.insert(v);
        if !self.cfg.behavior.proposes_in(v) {
            return;
        }
        let kind = if tc.is_some() {
            ProposalKind::TimeoutF
        } else {
            ProposalKind::Normal
        };
        let qc = self.high_qc.clone();
        // with a gap in the branch there is no telling what it already carries
        let txs = match self.branch_digests(&parent) {
            Some(exclude) => self.mempool.next_payload(self.cfg.batch_size, &exclude),
            None => Vec::new(),
        };
        let b = self.build_block(v, &parent, txs, qc.clone(), tc.clone());
        self.out.events.push(EngineEvent::Proposed {
            view: v,
            block: b.clone(),
            kind,
        });
        if self.cfg.behavior == Behavior::Equivocate {
            let mut alt = b.txs.clone();
            alt.push(Digest::of_parts(&[b"mph/equivocate", &v.0.to_le_bytes()]));
            let twin = self.build_block(v, &parent, alt, qc, tc);
            let n = self.cfg.sys.n as ReplicaId;
            for r in (0..n).filter(|r| *r != self.id) {
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
            tcs: None,
            rho: self.scheme.tsign(&self.key, &proposal_message(&id)),
        })
    }

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

    // ---- timeouts ----

    fn send_timeout(&mut self, v: View) {
        self.last_tm_view = self.last_tm_view.max(v);
        // no more votes in a view this replica gave up on
        self.last_voted = self.last_voted.max(v);
        let tm = HsTimeout {
            sender: self.id,
            v,
            rho: self.scheme.tsign(&self.key, &timeout_message(v)),
            high_qc: self.high_qc.clone(),
        };
        self.out.events.push(EngineEvent::TimeoutSent { vf: v });
        self.deliver(Dest::All, Message::HsTimeout(tm));
    }

    fn on_timeout_msg(&mut self, tm: HsTimeout) {
        if tm.rho.index != tm.sender
            || (tm.sender as usize) >= self.cfg.sys.n
            || !self.scheme.verify_partial(&timeout_message(tm.v), &tm.rho)
            || !self.verify_qc(&tm.high_qc)
        {
            return;
        }
        self.qcs
            .entry(tm.high_qc.bid)
            .or_insert_with(|| tm.high_qc.clone());
        if tm.high_qc.v > self.high_qc.v {
            self.high_qc = tm.high_qc.clone();
        }
        if self.last_tc.as_ref().is_some_and(|t| t.v >= tm.v) || tm.v + 1 < self.curr_view {
            return;
        }
        let v = tm.v;
        let peer = self.peer_tm.entry(tm.sender).or_default();
        *peer = (*peer).max(v);
        let set = self.timeouts.entry(v).or_default();
        set.entry(tm.sender).or_insert(tm);
        let count = set.len();
        if let Some(join) = join_view(&self.peer_tm, self.cfg.sys.f) {
            let stale = self.last_tc.as_ref().is_some_and(|t| t.v >= join);
            if join > self.last_tm_view && join + 1 >= self.curr_view && !stale {
                self.send_timeout(join);
            }
        }
        if count < self.cfg.sys.quorum {
            return;
        }
        let parts: Vec<PartialSig> = self.timeouts[&v].values().map(|t| t.rho).collect();
        let Ok(sigma) = self.scheme.tcombine(&timeout_message(v), &parts) else {
            return;
        };
        let tc = TimeoutCert { v, sigma };
        self.out.events.push(EngineEvent::TcFormed(tc.clone()));
        self.timeouts = self.timeouts.split_off(&(v + 1));
        self.process_tc(&tc);
        self.maybe_propose();
    }

    // ---- plumbing ----

    fn on_sync_request(&mut self, from: ReplicaId, ids: Vec<Digest>) {
        let mut blocks = Vec::new();
        for id in ids.into_iter().take(8) {
            let mut chain = Vec::new();
            let mut cur = self.store.get(&id);
            while let Some(b) = cur {
                if chain.len() >= SYNC_DEPTH || b.v == View::ZERO {
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
            if self.store.contains(&b.id) || !self.verify_block(&b) {
                continue;
            }
            self.qcs.entry(b.qc.bid).or_insert_with(|| b.qc.clone());
            let (missing, p) = (!self.store.contains(&b.p), b.p);
            let b = Arc::new(b);
            self.store.insert(b.clone());
            // a proposal that reached us only through sync still gets a vote
            if b.v >= self.curr_view && !self.seen.contains_key(&b.v) {
                self.seen.insert(b.v, b.id);
                self.buffered.entry(b.v).or_insert((from, b));
            }
            if missing {
                self.request_sync(from, p);
            }
        }
        self.release_buffered();
    }

    fn flush_batch(&mut self, force: bool) {
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
            Message::HsTimeout(tm) => self.on_timeout_msg(tm),
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
            Message::Timeout(_) => {}
        }
        self.maybe_propose();
    }

    fn drain(&mut self) -> EngineOutput {
        while let Some(m) = self.local.pop_front() {
            self.dispatch(self.id, m);
        }
        std::mem::take(&mut self.out)
    }
}

impl Replica for HsReplica {
    fn id(&self) -> ReplicaId {
        self.id
    }

    fn start(&mut self, now: Time) -> EngineOutput {
        self.now = now;
        self.reset_timer();
        self.maybe_propose();
        self.drain()
    }

    fn handle(&mut self, from: ReplicaId, msg: Message, now: Time) -> EngineOutput {
        self.now = now;
        self.dispatch(from, msg);
        self.drain()
    }

    fn on_timer(&mut self, now: Time) -> EngineOutput {
        self.now = now;
        self.requested.clear();
        let v = self.curr_view.max(self.last_tm_view);
        self.send_timeout(v);
        let d = self.pacemaker.expired(now);
        self.out.timer_reset = Some(d);
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
