//! Fixed genesis blocks and their synthetic certificates.

use std::sync::Arc;

use crate::crypto::{Digest, PartialSig, ThresholdSig};
use crate::types::{Block, QuorumCert, View};

fn genesis_block(v: View, p: Digest, qc: QuorumCert) -> Block {
    let mut b = Block {
        id: Digest::ZERO,
        v,
        p,
        pv: View::ZERO,
        txs: Vec::new(),
        qc,
        tc: None,
        tcs: None,
        rho: PartialSig::GENESIS,
    };
    b.id = b.compute_id();
    b
}

fn marker(bid: Digest, v: View) -> QuorumCert {
    QuorumCert {
        bid,
        v,
        sigma: ThresholdSig::Genesis,
    }
}

/// The two pre-certified blocks the multi-pipeline replica starts from.
#[derive(Clone, Debug)]
pub struct MphGenesis {
    pub g0: Arc<Block>,
    pub g1: Arc<Block>,
    /// Certifies `g0`, `v = 1`.
    pub qc0: QuorumCert,
    /// Certifies `g1`, `v = 2`.
    pub qc1: QuorumCert,
}

impl MphGenesis {
    pub fn new() -> MphGenesis {
        let g0 = genesis_block(View(0), Digest::ZERO, marker(Digest::ZERO, View(0)));
        let qc0 = marker(g0.id, View(1));
        let g1 = genesis_block(View(1), g0.id, marker(Digest::ZERO, View(0)));
        let qc1 = marker(g1.id, View(2));
        MphGenesis {
            g0: Arc::new(g0),
            g1: Arc::new(g1),
            qc0,
            qc1,
        }
    }

    /// Genesis markers are only valid on exactly these certificates.
    pub fn accepts(&self, qc: &QuorumCert) -> bool {
        *qc == self.qc0 || *qc == self.qc1
    }
}

impl Default for MphGenesis {
    fn default() -> Self {
        Self::new()
    }
}

/// Single genesis block for the chained baseline, certified at view 0.
#[derive(Clone, Debug)]
pub struct HsGenesis {
    pub g: Arc<Block>,
    pub qc: QuorumCert,
}

impl HsGenesis {
    pub fn new() -> HsGenesis {
        let g = genesis_block(View(0), Digest::ZERO, marker(Digest::ZERO, View(0)));
        let qc = marker(g.id, View(0));
        HsGenesis { g: Arc::new(g), qc }
    }

    pub fn accepts(&self, qc: &QuorumCert) -> bool {
        *qc == self.qc
    }
}

impl Default for HsGenesis {
    fn default() -> Self {
        Self::new()
    }
}
