//! Transports: a deterministic simulator and a loopback stream transport.

pub mod sim;
pub mod tcp;
