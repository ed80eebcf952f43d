//! Protocol data structures shared by both replicas, the mempool and the
//! simulator.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Sub};
use std::sync::Arc;

use bytes::Bytes;
use thiserror::Error;

use crate::codec::{Decode, DecodeError, Encode, Reader};
use crate::crypto::{Digest, PartialSig, ThresholdSig};

pub type ReplicaId = u16;

/// Simulated or wall-clock time in microseconds.
pub type Time = u64;

pub const MILLIS: Time = 1_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("n = {0} is not of the form 3f+1 with f >= 1")]
    InvalidSize(usize),
}

/// `n = 3f + 1` replicas with quorum `2f + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SystemConfig {
    pub n: usize,
    pub f: usize,
    pub quorum: usize,
}

impl SystemConfig {
    pub fn new(n: usize) -> Result<SystemConfig, ConfigError> {
        if n < 4 || (n - 1) % 3 != 0 {
            return Err(ConfigError::InvalidSize(n));
        }
        let f = (n - 1) / 3;
        Ok(SystemConfig {
            n,
            f,
            quorum: n - f,
        })
    }

    /// Round-robin leader: `v mod n`.
    pub fn leader_of(&self, v: View) -> ReplicaId {
        (v.0 % self.n as u64) as ReplicaId
    }

    pub fn replicas(&self) -> impl Iterator<Item = ReplicaId> {
        0..self.n as ReplicaId
    }
}

/// View number.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct View(pub u64);

impl View {
    pub const ZERO: View = View(0);
}

impl Add<u64> for View {
    type Output = View;
    fn add(self, rhs: u64) -> View {
        View(self.0 + rhs)
    }
}

impl Sub<u64> for View {
    type Output = View;
    fn sub(self, rhs: u64) -> View {
        View(self.0.saturating_sub(rhs))
    }
}

impl fmt::Debug for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Encode for View {
    fn encode_to(&self, out: &mut Vec<u8>) {
        self.0.encode_to(out);
    }
}

impl Decode for View {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(View(u64::decode_from(r)?))
    }
}

/// A client transaction. Its digest is its identity.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Transaction {
    pub digest: Digest,
    pub payload: Bytes,
    pub submit_time: Time,
}

impl Transaction {
    pub fn new(payload: Bytes, submit_time: Time) -> Transaction {
        Transaction {
            digest: Digest::of(&payload),
            payload,
            submit_time,
        }
    }

    pub fn is_well_formed(&self) -> bool {
        self.digest == Digest::of(&self.payload)
    }
}

impl Encode for Transaction {
    fn encode_to(&self, out: &mut Vec<u8>) {
        self.digest.encode_to(out);
        self.payload.encode_to(out);
        self.submit_time.encode_to(out);
    }
}

impl Decode for Transaction {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Transaction {
            digest: Digest::decode_from(r)?,
            payload: Bytes::decode_from(r)?,
            submit_time: u64::decode_from(r)?,
        })
    }
}

/// Proof that a quorum voted for block `bid`.
///
/// For the multi-pipeline replica `v` is the certified block's view plus
/// one; the chained HotStuff baseline uses the certified block's view.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct QuorumCert {
    pub bid: Digest,
    pub v: View,
    pub sigma: ThresholdSig,
}

impl QuorumCert {
    pub fn is_genesis(&self) -> bool {
        self.sigma == ThresholdSig::Genesis
    }
}

impl Encode for QuorumCert {
    fn encode_to(&self, out: &mut Vec<u8>) {
        self.bid.encode_to(out);
        self.v.encode_to(out);
        self.sigma.encode_to(out);
    }
}

impl Decode for QuorumCert {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(QuorumCert {
            bid: Digest::decode_from(r)?,
            v: View::decode_from(r)?,
            sigma: ThresholdSig::decode_from(r)?,
        })
    }
}

/// Proof that a quorum timed out, authorizing entry into view `v`.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct TimeoutCert {
    pub v: View,
    pub sigma: ThresholdSig,
}

impl Encode for TimeoutCert {
    fn encode_to(&self, out: &mut Vec<u8>) {
        self.v.encode_to(out);
        self.sigma.encode_to(out);
    }
}

impl Decode for TimeoutCert {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(TimeoutCert {
            v: View::decode_from(r)?,
            sigma: ThresholdSig::decode_from(r)?,
        })
    }
}

/// A proposal. `id` covers `(v, p, txs, qc)` only.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Block {
    pub id: Digest,
    pub v: View,
    pub p: Digest,
    pub pv: View,
    pub txs: Vec<Digest>,
    pub qc: QuorumCert,
    pub tc: Option<TimeoutCert>,
    pub tcs: Option<(TimeoutCert, TimeoutCert)>,
    pub rho: PartialSig,
}

/// `hash(v, p, txs, qc)` over the canonical encoding.
pub fn block_digest(v: View, p: &Digest, txs: &[Digest], qc: &QuorumCert) -> Digest {
    let mut buf = Vec::with_capacity(64 + 32 * txs.len() + 256);
    buf.extend_from_slice(b"mph/block-id");
    v.encode_to(&mut buf);
    p.encode_to(&mut buf);
    (txs.len() as u32).encode_to(&mut buf);
    for t in txs {
        t.encode_to(&mut buf);
    }
    qc.encode_to(&mut buf);
    Digest::of(&buf)
}

impl Block {
    pub fn compute_id(&self) -> Digest {
        block_digest(self.v, &self.p, &self.txs, &self.qc)
    }

    /// Authenticators carried: proposer share, embedded QC, and the TC pair
    /// when present (the `tc` field repeats one member of the pair).
    pub fn authenticators(&self) -> u64 {
        let tcs = match (&self.tcs, &self.tc) {
            (Some(_), _) => 2,
            (None, Some(_)) => 1,
            (None, None) => 0,
        };
        2 + tcs
    }

    pub fn has_duplicate_txs(&self) -> bool {
        let mut seen = std::collections::BTreeSet::new();
        !self.txs.iter().all(|d| seen.insert(*d))
    }
}

impl Encode for Block {
    fn encode_to(&self, out: &mut Vec<u8>) {
        self.id.encode_to(out);
        self.v.encode_to(out);
        self.p.encode_to(out);
        self.pv.encode_to(out);
        self.txs.encode_to(out);
        self.qc.encode_to(out);
        self.tc.encode_to(out);
        self.tcs.encode_to(out);
        self.rho.encode_to(out);
    }
}

impl Decode for Block {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Block {
            id: Digest::decode_from(r)?,
            v: View::decode_from(r)?,
            p: Digest::decode_from(r)?,
            pv: View::decode_from(r)?,
            txs: Vec::decode_from(r)?,
            qc: QuorumCert::decode_from(r)?,
            tc: Option::decode_from(r)?,
            tcs: Option::decode_from(r)?,
            rho: PartialSig::decode_from(r)?,
        })
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Vote {
    pub voter: ReplicaId,
    pub block_id: Digest,
    /// View of the voted block.
    pub v: View,
    pub rho: PartialSig,
}

impl Encode for Vote {
    fn encode_to(&self, out: &mut Vec<u8>) {
        self.voter.encode_to(out);
        self.block_id.encode_to(out);
        self.v.encode_to(out);
        self.rho.encode_to(out);
    }
}

impl Decode for Vote {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Vote {
            voter: u16::decode_from(r)?,
            block_id: Digest::decode_from(r)?,
            v: View::decode_from(r)?,
            rho: PartialSig::decode_from(r)?,
        })
    }
}

/// Multi-pipeline timeout: shares over both view-change views plus the
/// sender's two highest certificates.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct TimeoutMessage {
    pub sender: ReplicaId,
    pub vf: View,
    pub vs: View,
    pub rho_f: PartialSig,
    pub rho_s: PartialSig,
    pub high_qc: QuorumCert,
    pub sec_high_qc: QuorumCert,
}

impl TimeoutMessage {
    pub const AUTHENTICATORS: u64 = 4;
}

impl Encode for TimeoutMessage {
    fn encode_to(&self, out: &mut Vec<u8>) {
        self.sender.encode_to(out);
        self.vf.encode_to(out);
        self.vs.encode_to(out);
        self.rho_f.encode_to(out);
        self.rho_s.encode_to(out);
        self.high_qc.encode_to(out);
        self.sec_high_qc.encode_to(out);
    }
}

impl Decode for TimeoutMessage {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(TimeoutMessage {
            sender: u16::decode_from(r)?,
            vf: View::decode_from(r)?,
            vs: View::decode_from(r)?,
            rho_f: PartialSig::decode_from(r)?,
            rho_s: PartialSig::decode_from(r)?,
            high_qc: QuorumCert::decode_from(r)?,
            sec_high_qc: QuorumCert::decode_from(r)?,
        })
    }
}

/// Chained HotStuff timeout: one share over the timed-out view plus the
/// sender's highest certificate.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct HsTimeout {
    pub sender: ReplicaId,
    pub v: View,
    pub rho: PartialSig,
    pub high_qc: QuorumCert,
}

impl HsTimeout {
    pub const AUTHENTICATORS: u64 = 2;
}

impl Encode for HsTimeout {
    fn encode_to(&self, out: &mut Vec<u8>) {
        self.sender.encode_to(out);
        self.v.encode_to(out);
        self.rho.encode_to(out);
        self.high_qc.encode_to(out);
    }
}

impl Decode for HsTimeout {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(HsTimeout {
            sender: u16::decode_from(r)?,
            v: View::decode_from(r)?,
            rho: PartialSig::decode_from(r)?,
            high_qc: QuorumCert::decode_from(r)?,
        })
    }
}

/// Signed message for a vote on block `bid` at view `block_view`.
pub fn vote_message(bid: &Digest, block_view: View) -> Vec<u8> {
    let mut m = b"mph/vote".to_vec();
    bid.encode_to(&mut m);
    block_view.encode_to(&mut m);
    m
}

/// Signed message for a timeout share over view `v`.
pub fn timeout_message(v: View) -> Vec<u8> {
    let mut m = b"mph/timeout".to_vec();
    v.encode_to(&mut m);
    m
}

/// Signed message for a proposer's share over a block id.
pub fn proposal_message(id: &Digest) -> Vec<u8> {
    let mut m = b"mph/proposal".to_vec();
    id.encode_to(&mut m);
    m
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChainError {
    #[error("block {0:?} missing from store")]
    Gap(Digest),
}

/// Block store keyed by id.
#[derive(Default, Clone, Debug)]
pub struct BlockStore {
    blocks: BTreeMap<Digest, Arc<Block>>,
}

impl BlockStore {
    pub fn insert(&mut self, b: Arc<Block>) {
        self.blocks.entry(b.id).or_insert(b);
    }

    pub fn get(&self, id: &Digest) -> Option<&Arc<Block>> {
        self.blocks.get(id)
    }

    pub fn contains(&self, id: &Digest) -> bool {
        self.blocks.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<Block>> {
        self.blocks.values()
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// True iff following parent links from `descendant` reaches
    /// `ancestor`. Walks stop below the ancestor's view.
    pub fn extends(&self, ancestor: &Block, descendant: &Block) -> Result<bool, ChainError> {
        let mut cur = descendant;
        loop {
            if cur.id == ancestor.id {
                return Ok(true);
            }
            if cur.v <= ancestor.v || cur.p == Digest::ZERO {
                return Ok(false);
            }
            cur = self.get(&cur.p).ok_or(ChainError::Gap(cur.p))?;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qc(bid: Digest, v: u64) -> QuorumCert {
        QuorumCert {
            bid,
            v: View(v),
            sigma: ThresholdSig::Genesis,
        }
    }

    fn block(v: u64, p: &Block) -> Block {
        let q = qc(p.id, v);
        let mut b = Block {
            id: Digest::ZERO,
            v: View(v),
            p: p.id,
            pv: p.v,
            txs: vec![],
            qc: q,
            tc: None,
            tcs: None,
            rho: PartialSig::GENESIS,
        };
        b.id = b.compute_id();
        b
    }

    fn root() -> Block {
        let mut g = Block {
            id: Digest::ZERO,
            v: View(0),
            p: Digest::ZERO,
            pv: View(0),
            txs: vec![],
            qc: qc(Digest::ZERO, 0),
            tc: None,
            tcs: None,
            rho: PartialSig::GENESIS,
        };
        g.id = g.compute_id();
        g
    }

    #[test]
    fn config_sizes() {
        let c = SystemConfig::new(7).unwrap();
        assert_eq!((c.f, c.quorum), (2, 5));
        assert!(SystemConfig::new(3).is_err());
        assert!(SystemConfig::new(5).is_err());
        assert!(SystemConfig::new(1).is_err());
    }

    #[test]
    fn leader_rotation() {
        let c4 = SystemConfig::new(4).unwrap();
        assert_eq!(c4.leader_of(View(5)), 1);
        assert_eq!(c4.leader_of(View(0)), 0);
        let c7 = SystemConfig::new(7).unwrap();
        assert_eq!(c7.leader_of(View(7)), 0);
    }

    #[test]
    fn digest_is_deterministic_and_view_bound() {
        let g = root();
        let q = qc(g.id, 1);
        let a = block_digest(View(3), &g.id, &[], &q);
        assert_eq!(a, block_digest(View(3), &g.id, &[], &q));
        assert_ne!(a, block_digest(View(4), &g.id, &[], &q));
    }

    #[test]
    fn extends_walks_parents() {
        let g = root();
        let b1 = block(1, &g);
        let b2 = block(2, &b1);
        let mut s = BlockStore::default();
        for b in [&g, &b1, &b2] {
            s.insert(Arc::new(b.clone()));
        }
        assert!(s.extends(&g, &g).unwrap());
        assert!(s.extends(&g, &b2).unwrap());
        assert!(!s.extends(&b2, &g).unwrap());

        let mut gap = BlockStore::default();
        gap.insert(Arc::new(g.clone()));
        gap.insert(Arc::new(b2.clone()));
        assert_eq!(gap.extends(&g, &b2), Err(ChainError::Gap(b1.id)));
    }

    #[test]
    fn block_round_trip_and_auth_count() {
        let g = root();
        let mut b = block(2, &g);
        b.txs = vec![Digest::of(b"a"), Digest::of(b"b")];
        assert_eq!(Block::from_bytes(&b.to_bytes()).unwrap(), b);
        assert_eq!(b.authenticators(), 2);
        assert!(!b.has_duplicate_txs());
        b.txs.push(Digest::of(b"a"));
        assert!(b.has_duplicate_txs());
    }
}
