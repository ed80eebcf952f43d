//! Seeded Poisson client arrivals.

use std::cell::RefCell;
use std::collections::{BTreeSet, HashMap};
use std::rc::Rc;

use bytes::Bytes;
use mph_core::net::sim::Workload;
use mph_core::types::{ReplicaId, Time, Transaction};
use mph_core::Digest;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

/// Submit time of every generated transaction, shared with the caller.
pub type Submitted = Rc<RefCell<HashMap<Digest, Time>>>;

pub struct Poisson {
    rng: ChaCha8Rng,
    gap: Option<Exp<f64>>,
    next: f64,
    until: Time,
    targets: Vec<ReplicaId>,
    turn: usize,
    seq: u64,
    seed: u64,
    payload_bytes: usize,
    submitted: Submitted,
}

impl Poisson {
    /// `rate` is transactions per second across all `targets`, which are
    /// fed round-robin. Arrivals stop at `until`.
    pub fn new(
        rate: f64,
        payload_bytes: usize,
        targets: Vec<ReplicaId>,
        until: Time,
        seed: u64,
    ) -> (Poisson, Submitted) {
        let submitted = Submitted::default();
        // rate is per second, time is in microseconds
        let gap = if rate > 0.0 && !targets.is_empty() {
            Exp::new(rate / 1e6).ok()
        } else {
            None
        };
        let mut p = Poisson {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c11e),
            gap,
            next: 0.0,
            until,
            targets,
            turn: 0,
            seq: 0,
            seed,
            payload_bytes: payload_bytes.max(16),
            submitted: submitted.clone(),
        };
        p.advance();
        (p, submitted)
    }

    fn advance(&mut self) {
        if let Some(g) = &self.gap {
            self.next += g.sample(&mut self.rng);
        }
    }

    /// Unique payload: run seed and sequence number, zero padded.
    fn payload(&self) -> Bytes {
        let mut p = vec![0u8; self.payload_bytes];
        p[..8].copy_from_slice(&self.seed.to_le_bytes());
        p[8..16].copy_from_slice(&self.seq.to_le_bytes());
        Bytes::from(p)
    }
}

impl Workload for Poisson {
    fn next_arrival(&mut self) -> Option<(Time, ReplicaId, Transaction)> {
        self.gap?;
        let at = self.next.ceil() as Time;
        if at >= self.until {
            return None;
        }
        let tx = Transaction::new(self.payload(), at);
        let dst = self.targets[self.turn % self.targets.len()];
        self.turn += 1;
        self.seq += 1;
        self.submitted.borrow_mut().insert(tx.digest, at);
        self.advance();
        Some((at, dst, tx))
    }
}

/// Replicas that never crash receive client traffic.
pub fn live_targets(n: usize, crashed: &BTreeSet<ReplicaId>) -> Vec<ReplicaId> {
    (0..n as ReplicaId)
        .filter(|r| !crashed.contains(r))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use mph_core::types::MILLIS;

    #[test]
    fn rate_and_uniqueness() {
        let (mut w, sub) = Poisson::new(10_000.0, 1024, vec![0, 2], 1000 * MILLIS, 3);
        let mut last = 0;
        let mut count = 0;
        let mut dsts = BTreeSet::new();
        while let Some((t, d, tx)) = w.next_arrival() {
            assert!(t >= last);
            assert_eq!(tx.payload.len(), 1024);
            last = t;
            count += 1;
            dsts.insert(d);
        }
        // 10k expected; Poisson stddev is 100
        assert!((9_500..10_500).contains(&count), "{count}");
        assert_eq!(sub.borrow().len(), count);
        assert_eq!(dsts, BTreeSet::from([0, 2]));
    }

    #[test]
    fn zero_rate_is_empty() {
        let (mut w, _) = Poisson::new(0.0, 1024, vec![0], 1000, 1);
        assert!(w.next_arrival().is_none());
    }
}
