//! Multi-pipeline HotStuff and a chained HotStuff baseline as deterministic,
//! message-driven replica state machines, plus a seeded network simulator.

pub mod codec;
pub mod crypto;
pub mod engine;
pub mod genesis;
pub mod hotstuff;
pub mod mempool;
pub mod message;
pub mod mph;
pub mod net;
pub mod types;

pub use crypto::{Digest, HashThreshold, KeyShare, ThresholdScheme};
pub use engine::{Dest, EngineEvent, EngineOutput, Replica};
pub use message::Message;
pub use types::{Block, QuorumCert, ReplicaId, SystemConfig, Time, TimeoutCert, View};
