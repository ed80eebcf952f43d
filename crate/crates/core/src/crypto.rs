//! Hashing and threshold signatures.
//!
//! Protocol code only talks to [`ThresholdScheme`]. The default
//! [`HashThreshold`] scheme is a deterministic stand-in for a real
//! `(2f+1, n)` threshold scheme: a partial signature is a keyed SHA-256
//! tag and a combined signature is the sorted list of contributing tags.
//! It is not unforgeable against anyone holding the key registry, which is
//! fine for simulation. Certificate size grows with the quorum; complexity
//! is accounted in authenticators, not bytes.

use std::collections::BTreeMap;
use std::fmt;

use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::codec::{Decode, DecodeError, Encode, Reader};
use crate::types::{ReplicaId, SystemConfig};

/// SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0; 32]);

    pub fn of(bytes: &[u8]) -> Digest {
        Digest(Sha256::digest(bytes).into())
    }

    /// Hash of several byte slices, fed in order.
    pub fn of_parts(parts: &[&[u8]]) -> Digest {
        let mut h = Sha256::new();
        for p in parts {
            h.update(p);
        }
        Digest(h.finalize().into())
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Encode for Digest {
    fn encode_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.0);
    }
}

impl Decode for Digest {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Digest(r.array()?))
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct KeyShare {
    pub index: ReplicaId,
    pub secret: [u8; 32],
}

impl fmt::Debug for KeyShare {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyShare")
            .field("index", &self.index)
            .finish_non_exhaustive()
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct PartialSig {
    pub index: ReplicaId,
    pub tag: [u8; 32],
}

impl PartialSig {
    /// Placeholder carried by genesis blocks, which nobody signs.
    pub const GENESIS: PartialSig = PartialSig {
        index: 0,
        tag: [0; 32],
    };
}

impl Encode for PartialSig {
    fn encode_to(&self, out: &mut Vec<u8>) {
        self.index.encode_to(out);
        self.tag.encode_to(out);
    }
}

impl Decode for PartialSig {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(PartialSig {
            index: u16::decode_from(r)?,
            tag: r.array()?,
        })
    }
}

/// A combined signature, or the reserved marker carried by genesis
/// certificates. The marker never passes [`ThresholdScheme::tverify`];
/// protocol code accepts it only for its own configured genesis ids.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub enum ThresholdSig {
    Genesis,
    Combined {
        msg_digest: Digest,
        shares: Vec<PartialSig>,
    },
}

impl ThresholdSig {
    /// Indices that contributed to this signature.
    pub fn signers(&self) -> Vec<ReplicaId> {
        match self {
            ThresholdSig::Genesis => Vec::new(),
            ThresholdSig::Combined { shares, .. } => shares.iter().map(|s| s.index).collect(),
        }
    }
}

impl Encode for ThresholdSig {
    fn encode_to(&self, out: &mut Vec<u8>) {
        match self {
            ThresholdSig::Genesis => out.push(0),
            ThresholdSig::Combined { msg_digest, shares } => {
                out.push(1);
                msg_digest.encode_to(out);
                shares.encode_to(out);
            }
        }
    }
}

impl Decode for ThresholdSig {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match u8::decode_from(r)? {
            0 => Ok(ThresholdSig::Genesis),
            1 => Ok(ThresholdSig::Combined {
                msg_digest: Digest::decode_from(r)?,
                shares: Vec::decode_from(r)?,
            }),
            tag => Err(DecodeError::InvalidTag {
                what: "threshold signature",
                tag,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("only {have} distinct valid shares, need {need}")]
    InsufficientShares { have: usize, need: usize },
    #[error("share from replica {0} does not verify")]
    InvalidShare(ReplicaId),
}

/// A `(quorum, n)` threshold signature scheme.
pub trait ThresholdScheme: Send + Sync {
    fn config(&self) -> &SystemConfig;

    fn tsign(&self, share: &KeyShare, msg: &[u8]) -> PartialSig;

    fn verify_partial(&self, msg: &[u8], partial: &PartialSig) -> bool;

    fn tcombine(&self, msg: &[u8], partials: &[PartialSig]) -> Result<ThresholdSig, CryptoError>;

    /// Never panics; malformed or under-quorum signatures are `false`.
    fn tverify(&self, msg: &[u8], sigma: &ThresholdSig) -> bool;
}

/// Deterministic keyed-hash threshold scheme.
#[derive(Clone, Debug)]
pub struct HashThreshold {
    cfg: SystemConfig,
    // index -> verification key; symmetric in this scheme
    keys: BTreeMap<ReplicaId, [u8; 32]>,
}

fn keyed_tag(secret: &[u8; 32], msg: &[u8]) -> [u8; 32] {
    Digest::of_parts(&[b"mph/share", secret, msg]).0
}

impl HashThreshold {
    /// Derives one key share per replica from `seed` and registers the
    /// matching verification keys.
    pub fn generate(cfg: SystemConfig, seed: u64) -> (HashThreshold, Vec<KeyShare>) {
        let shares: Vec<KeyShare> = (0..cfg.n as ReplicaId)
            .map(|i| KeyShare {
                index: i,
                secret: Digest::of_parts(&[b"mph/key", &seed.to_le_bytes(), &i.to_le_bytes()]).0,
            })
            .collect();
        let scheme = HashThreshold::from_shares(cfg, &shares);
        (scheme, shares)
    }

    pub fn from_shares(cfg: SystemConfig, shares: &[KeyShare]) -> HashThreshold {
        HashThreshold {
            cfg,
            keys: shares.iter().map(|s| (s.index, s.secret)).collect(),
        }
    }
}

impl ThresholdScheme for HashThreshold {
    fn config(&self) -> &SystemConfig {
        &self.cfg
    }

    fn tsign(&self, share: &KeyShare, msg: &[u8]) -> PartialSig {
        PartialSig {
            index: share.index,
            tag: keyed_tag(&share.secret, msg),
        }
    }

    fn verify_partial(&self, msg: &[u8], partial: &PartialSig) -> bool {
        self.keys
            .get(&partial.index)
            .is_some_and(|k| keyed_tag(k, msg) == partial.tag)
    }

    fn tcombine(&self, msg: &[u8], partials: &[PartialSig]) -> Result<ThresholdSig, CryptoError> {
        let mut by_index = BTreeMap::new();
        for p in partials {
            if !self.verify_partial(msg, p) {
                return Err(CryptoError::InvalidShare(p.index));
            }
            by_index.entry(p.index).or_insert(*p);
        }
        if by_index.len() < self.cfg.quorum {
            return Err(CryptoError::InsufficientShares {
                have: by_index.len(),
                need: self.cfg.quorum,
            });
        }
        Ok(ThresholdSig::Combined {
            msg_digest: Digest::of(msg),
            shares: by_index.into_values().take(self.cfg.quorum).collect(),
        })
    }

    fn tverify(&self, msg: &[u8], sigma: &ThresholdSig) -> bool {
        let ThresholdSig::Combined { msg_digest, shares } = sigma else {
            return false;
        };
        if *msg_digest != Digest::of(msg) || shares.len() < self.cfg.quorum {
            return false;
        }
        // strictly increasing indices: distinct and canonical
        if shares.windows(2).any(|w| w[0].index >= w[1].index) {
            return false;
        }
        shares.iter().all(|s| self.verify_partial(msg, s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (HashThreshold, Vec<KeyShare>) {
        HashThreshold::generate(SystemConfig::new(4).unwrap(), 7)
    }

    #[test]
    fn tsign_is_deterministic_and_bound() {
        let (s, keys) = setup();
        assert_eq!(s.tsign(&keys[0], b"m"), s.tsign(&keys[0], b"m"));
        assert_ne!(s.tsign(&keys[0], b"m").tag, s.tsign(&keys[1], b"m").tag);
        assert_ne!(s.tsign(&keys[0], b"m").tag, s.tsign(&keys[0], b"m2").tag);
    }

    #[test]
    fn combine_three_of_four() {
        let (s, keys) = setup();
        let parts: Vec<_> = keys[..3].iter().map(|k| s.tsign(k, b"m")).collect();
        let sig = s.tcombine(b"m", &parts).unwrap();
        assert!(s.tverify(b"m", &sig));
        assert!(!s.tverify(b"other", &sig));
        assert_eq!(sig.signers(), vec![0, 1, 2]);
    }

    #[test]
    fn combine_errors() {
        let (s, keys) = setup();
        let two: Vec<_> = keys[..2].iter().map(|k| s.tsign(k, b"m")).collect();
        assert_eq!(
            s.tcombine(b"m", &two),
            Err(CryptoError::InsufficientShares { have: 2, need: 3 })
        );
        let mut three = two.clone();
        three.push(s.tsign(&keys[2], b"different"));
        assert_eq!(s.tcombine(b"m", &three), Err(CryptoError::InvalidShare(2)));
        // duplicates do not count twice
        let dup = vec![two[0], two[0], two[1]];
        assert!(matches!(
            s.tcombine(b"m", &dup),
            Err(CryptoError::InsufficientShares { have: 2, .. })
        ));
    }

    #[test]
    fn tampered_signature_fails() {
        let (s, keys) = setup();
        let parts: Vec<_> = keys.iter().map(|k| s.tsign(k, b"m")).collect();
        let sig = s.tcombine(b"m", &parts).unwrap();
        let ThresholdSig::Combined {
            msg_digest,
            mut shares,
        } = sig.clone()
        else {
            unreachable!()
        };
        shares[1].tag[5] ^= 1;
        assert!(!s.tverify(b"m", &ThresholdSig::Combined { msg_digest, shares }));
        assert!(!s.tverify(b"m", &ThresholdSig::Genesis));
        let round = ThresholdSig::from_bytes(&sig.to_bytes()).unwrap();
        assert_eq!(round, sig);
    }

    #[test]
    fn f_adversarial_shares_never_verify() {
        let (s, keys) = setup();
        let one = s.tsign(&keys[3], b"m");
        // pad a single real share with forged tags under other indices
        let forged = ThresholdSig::Combined {
            msg_digest: Digest::of(b"m"),
            shares: vec![
                PartialSig {
                    index: 0,
                    tag: [1; 32],
                },
                PartialSig {
                    index: 1,
                    tag: [2; 32],
                },
                one,
            ],
        };
        assert!(!s.tverify(b"m", &forged));
    }
}
