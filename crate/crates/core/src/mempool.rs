//! Shared mempool.
//!
//! Transaction bodies travel in batches outside consensus; blocks only
//! order digests. A replica proposes a digest only once it holds the
//! batch carrying it, and resolves committed digests back to payloads
//! asynchronously.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::OnceLock;

use bytes::Bytes;
use thiserror::Error;

use crate::codec::{Decode, DecodeError, Encode, Reader};
use crate::crypto::Digest;
use crate::types::{ReplicaId, Time, Transaction};

pub const DEFAULT_BLOCK_SIZE: usize = 800;
pub const DEFAULT_PAYLOAD_BYTES: usize = 1024;
pub const DEFAULT_DISSEMINATION_BYTES: usize = 512 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MempoolError {
    #[error("transaction {0:?} already known")]
    DuplicateTx(Digest),
    #[error("transaction digest does not match payload")]
    Malformed,
    #[error("batch id does not match its contents")]
    BadBatch,
    #[error("{} digests not yet disseminated", .0.len())]
    MissingBatch(BTreeSet<Digest>),
}

/// A dissemination unit. The validity check is memoized, so the fields
/// must not change once `is_well_formed` has been called. Clones start
/// unchecked.
#[derive(Debug)]
pub struct Batch {
    pub batch_id: Digest,
    pub origin: ReplicaId,
    pub txs: Vec<Transaction>,
    // a batch shared behind an Arc is checked once, not once per receiver
    checked: OnceLock<bool>,
}

impl PartialEq for Batch {
    fn eq(&self, other: &Batch) -> bool {
        self.batch_id == other.batch_id && self.origin == other.origin && self.txs == other.txs
    }
}

impl Eq for Batch {}

impl Clone for Batch {
    fn clone(&self) -> Batch {
        Batch {
            batch_id: self.batch_id,
            origin: self.origin,
            txs: self.txs.clone(),
            checked: OnceLock::new(),
        }
    }
}

impl Batch {
    pub fn new(origin: ReplicaId, txs: Vec<Transaction>) -> Batch {
        Batch {
            batch_id: Self::id_of(txs.iter().map(|t| &t.digest)),
            origin,
            txs,
            checked: OnceLock::new(),
        }
    }

    /// `hash(concatenated tx digests)`.
    pub fn id_of<'a>(digests: impl Iterator<Item = &'a Digest>) -> Digest {
        let mut buf = Vec::new();
        for d in digests {
            buf.extend_from_slice(&d.0);
        }
        Digest::of(&buf)
    }

    pub fn tx_digests(&self) -> Vec<Digest> {
        self.txs.iter().map(|t| t.digest).collect()
    }

    pub fn payload_bytes(&self) -> usize {
        self.txs.iter().map(|t| t.payload.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.txs.is_empty()
    }

    pub fn is_well_formed(&self) -> bool {
        *self.checked.get_or_init(|| {
            self.batch_id == Self::id_of(self.txs.iter().map(|t| &t.digest))
                && self.txs.iter().all(Transaction::is_well_formed)
        })
    }
}

impl Encode for Batch {
    fn encode_to(&self, out: &mut Vec<u8>) {
        self.batch_id.encode_to(out);
        self.origin.encode_to(out);
        self.txs.encode_to(out);
    }
}

impl Decode for Batch {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Batch {
            batch_id: Digest::decode_from(r)?,
            origin: u16::decode_from(r)?,
            txs: Vec::decode_from(r)?,
            checked: OnceLock::new(),
        })
    }
}

/// Per-replica pool.
#[derive(Debug, Default)]
pub struct Mempool {
    id: ReplicaId,
    // locally submitted, not yet batched
    pending: VecDeque<Digest>,
    pending_bytes: usize,
    // digest -> transaction, for anything held locally and not yet resolved
    known: HashMap<Digest, Transaction>,
    // digests from fully stored batches, in arrival order
    proposable: VecDeque<Digest>,
    batches: BTreeMap<Digest, Vec<Digest>>,
    proposed: BTreeSet<Digest>,
    committed: BTreeSet<Digest>,
    resolved: usize,
}

impl Mempool {
    pub fn new(id: ReplicaId) -> Mempool {
        Mempool {
            id,
            ..Default::default()
        }
    }

    /// Accepts a client transaction. `submit_time` is overwritten with
    /// `now`, the latency anchor.
    pub fn submit(&mut self, mut tx: Transaction, now: Time) -> Result<(), MempoolError> {
        if !tx.is_well_formed() {
            return Err(MempoolError::Malformed);
        }
        if self.known.contains_key(&tx.digest) || self.committed.contains(&tx.digest) {
            return Err(MempoolError::DuplicateTx(tx.digest));
        }
        tx.submit_time = now;
        self.pending_bytes += tx.payload.len();
        self.pending.push_back(tx.digest);
        self.known.insert(tx.digest, tx);
        Ok(())
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn pending_bytes(&self) -> usize {
        self.pending_bytes
    }

    /// Drains pending transactions in FIFO order into a batch of at most
    /// `max_bytes` payload (always at least one transaction when any is
    /// pending). The batch is stored locally; the caller disseminates it.
    pub fn make_batch(&mut self, max_bytes: usize) -> Batch {
        let mut txs = Vec::new();
        let mut bytes = 0;
        while let Some(d) = self.pending.front() {
            let tx = &self.known[d];
            if !txs.is_empty() && bytes + tx.payload.len() > max_bytes {
                break;
            }
            bytes += tx.payload.len();
            txs.push(tx.clone());
            self.pending.pop_front();
        }
        self.pending_bytes -= bytes;
        let batch = Batch::new(self.id, txs);
        if !batch.is_empty() {
            self.store_batch_digests(&batch);
        }
        batch
    }

    fn store_batch_digests(&mut self, batch: &Batch) {
        let digests = batch.tx_digests();
        for d in &digests {
            if !self.committed.contains(d) {
                self.proposable.push_back(*d);
            }
        }
        self.batches.insert(batch.batch_id, digests);
    }

    /// Stores a batch disseminated by another replica.
    pub fn receive_batch(&mut self, batch: &Batch) -> Result<(), MempoolError> {
        if !batch.is_well_formed() {
            return Err(MempoolError::BadBatch);
        }
        if self.batches.contains_key(&batch.batch_id) {
            return Ok(());
        }
        for tx in &batch.txs {
            self.known.entry(tx.digest).or_insert_with(|| tx.clone());
        }
        self.store_batch_digests(batch);
        Ok(())
    }

    /// Up to `max_count` proposable digests in FIFO order, skipping
    /// anything committed or in `exclude` (digests already carried by
    /// uncommitted blocks on the proposer's branch).
    pub fn next_payload(&mut self, max_count: usize, exclude: &BTreeSet<Digest>) -> Vec<Digest> {
        while self
            .proposable
            .front()
            .is_some_and(|d| self.committed.contains(d))
        {
            self.proposable.pop_front();
        }
        let mut out = Vec::with_capacity(max_count.min(self.proposable.len()));
        let mut picked = BTreeSet::new();
        for d in &self.proposable {
            if out.len() >= max_count {
                break;
            }
            if self.committed.contains(d) || exclude.contains(d) || !picked.insert(*d) {
                continue;
            }
            out.push(*d);
        }
        self.proposed.extend(out.iter().copied());
        out
    }

    pub fn was_proposed(&self, d: &Digest) -> bool {
        self.proposed.contains(d)
    }

    pub fn is_committed(&self, d: &Digest) -> bool {
        self.committed.contains(d)
    }

    pub fn submit_time(&self, d: &Digest) -> Option<Time> {
        self.known.get(d).map(|t| t.submit_time)
    }

    /// Marks digests committed. Returns those that were already committed,
    /// which indicates a duplicated digest in the committed log.
    pub fn mark_committed(&mut self, digests: &[Digest]) -> Vec<Digest> {
        digests
            .iter()
            .filter(|d| !self.committed.insert(**d))
            .copied()
            .collect()
    }

    /// Payloads for `digests`, or the set still missing. Resolved payloads
    /// are released from the pool.
    pub fn resolve(&mut self, digests: &[Digest]) -> Result<Vec<Bytes>, MempoolError> {
        let missing: BTreeSet<Digest> = digests
            .iter()
            .filter(|d| !self.known.contains_key(d))
            .copied()
            .collect();
        if !missing.is_empty() {
            return Err(MempoolError::MissingBatch(missing));
        }
        let out = digests
            .iter()
            .map(|d| self.known[d].payload.clone())
            .collect();
        Ok(out)
    }

    /// Drops payloads of committed, resolved digests.
    pub fn release(&mut self, digests: &[Digest]) {
        for d in digests {
            if self.known.remove(d).is_some() {
                self.resolved += 1;
            }
        }
    }

    /// Transactions for a fetch request, from whatever is still held.
    pub fn lookup(&self, digests: &[Digest]) -> Vec<Transaction> {
        digests
            .iter()
            .filter_map(|d| self.known.get(d).cloned())
            .collect()
    }

    /// Accepts fetched transactions for digests this replica committed but
    /// could not resolve.
    pub fn receive_fetched(&mut self, txs: &[Transaction]) {
        for tx in txs {
            if tx.is_well_formed() {
                self.known.entry(tx.digest).or_insert_with(|| tx.clone());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tx(i: u64, size: usize) -> Transaction {
        let mut p = vec![0u8; size];
        p[..8].copy_from_slice(&i.to_le_bytes());
        Transaction::new(Bytes::from(p), 0)
    }

    #[test]
    fn submit_and_duplicates() {
        let mut m = Mempool::new(0);
        m.submit(tx(1, 16), 5).unwrap();
        assert_eq!(
            m.submit(tx(1, 16), 6),
            Err(MempoolError::DuplicateTx(tx(1, 16).digest))
        );
        let mut bad = tx(2, 16);
        bad.digest = Digest::ZERO;
        assert_eq!(m.submit(bad, 0), Err(MempoolError::Malformed));
        assert_eq!(m.submit_time(&tx(1, 16).digest), Some(5));
    }

    #[test]
    fn thousand_kib_transactions_queue() {
        let mut m = Mempool::new(0);
        for i in 0..1000 {
            m.submit(tx(i, DEFAULT_PAYLOAD_BYTES), 0).unwrap();
        }
        assert_eq!(m.pending_len(), 1000);
        // 512 KiB / 1 KiB
        let b = m.make_batch(DEFAULT_DISSEMINATION_BYTES);
        assert_eq!(b.txs.len(), 512);
        assert!(b.is_well_formed());
        assert_eq!(m.pending_len(), 488);
        assert_eq!(m.make_batch(DEFAULT_DISSEMINATION_BYTES).txs.len(), 488);
        assert!(m.make_batch(DEFAULT_DISSEMINATION_BYTES).is_empty());
    }

    #[test]
    fn small_batch() {
        let mut m = Mempool::new(0);
        for i in 0..3 {
            m.submit(tx(i, 100), 0).unwrap();
        }
        assert_eq!(m.make_batch(DEFAULT_DISSEMINATION_BYTES).txs.len(), 3);
    }

    #[test]
    fn next_payload_caps_and_skips_committed() {
        let mut m = Mempool::new(0);
        for i in 0..1000 {
            m.submit(tx(i, 8), 0).unwrap();
        }
        m.make_batch(usize::MAX);
        let first = m.next_payload(DEFAULT_BLOCK_SIZE, &BTreeSet::new());
        assert_eq!(first.len(), 800);
        let done: Vec<_> = first[..100].to_vec();
        assert!(m.mark_committed(&done).is_empty());
        let excl: BTreeSet<_> = first[100..].iter().copied().collect();
        let next = m.next_payload(DEFAULT_BLOCK_SIZE, &excl);
        assert_eq!(next.len(), 200);
        assert!(next.iter().all(|d| !done.contains(d) && !excl.contains(d)));
        assert!(Mempool::new(1)
            .next_payload(800, &BTreeSet::new())
            .is_empty());
    }

    #[test]
    fn resolve_reports_missing_then_succeeds() {
        let mut origin = Mempool::new(0);
        let mut peer = Mempool::new(1);
        for i in 0..4 {
            origin.submit(tx(i, 8), 0).unwrap();
        }
        let b = origin.make_batch(usize::MAX);
        let ds = b.tx_digests();
        match peer.resolve(&ds) {
            Err(MempoolError::MissingBatch(missing)) => assert_eq!(missing.len(), 4),
            other => panic!("{other:?}"),
        }
        peer.receive_fetched(&origin.lookup(&ds));
        assert_eq!(peer.resolve(&ds).unwrap().len(), 4);
        assert_eq!(peer.resolve(&ds).unwrap().len(), 4);
        peer.receive_batch(&b).unwrap();
        let mut tampered = b.clone();
        tampered.txs.pop();
        assert_eq!(peer.receive_batch(&tampered), Err(MempoolError::BadBatch));
    }
}
