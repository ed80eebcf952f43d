//! Message envelope and stream framing.
//!
//! Envelope: one type tag byte followed by the canonical payload encoding.
//! Frame (stream transport): 4-byte little-endian length of the envelope,
//! then the envelope.

use std::sync::Arc;

use thiserror::Error;

use crate::codec::{Decode, DecodeError, Encode, Reader};
use crate::crypto::Digest;
use crate::mempool::Batch;
use crate::types::{Block, HsTimeout, TimeoutMessage, Transaction, View, Vote};

/// Largest accepted frame body.
pub const MAX_FRAME: usize = 64 << 20;

#[derive(Clone, Copy, PartialEq, Eq, Debug, PartialOrd, Ord)]
#[repr(u8)]
pub enum MessageKind {
    Proposal = 1,
    Vote = 2,
    Timeout = 3,
    SyncRequest = 4,
    SyncResponse = 5,
    Batch = 6,
    BatchFetch = 7,
    BatchFetchResponse = 8,
    HsTimeout = 9,
}

impl MessageKind {
    pub fn from_tag(tag: u8) -> Option<MessageKind> {
        use MessageKind::*;
        Some(match tag {
            1 => Proposal,
            2 => Vote,
            3 => Timeout,
            4 => SyncRequest,
            5 => SyncResponse,
            6 => Batch,
            7 => BatchFetch,
            8 => BatchFetchResponse,
            9 => HsTimeout,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        use MessageKind::*;
        match self {
            Proposal => "proposal",
            Vote => "vote",
            Timeout => "timeout",
            SyncRequest => "sync-request",
            SyncResponse => "sync-response",
            Batch => "batch",
            BatchFetch => "batch-fetch",
            BatchFetchResponse => "batch-fetch-response",
            HsTimeout => "hs-timeout",
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Message {
    Proposal(Arc<Block>),
    Vote(Vote),
    Timeout(TimeoutMessage),
    /// Ids of blocks the sender is missing.
    SyncRequest(Vec<Digest>),
    /// Requested blocks, ancestors first.
    SyncResponse(Vec<Block>),
    Batch(Arc<Batch>),
    BatchFetch(Vec<Digest>),
    BatchFetchResponse(Vec<Transaction>),
    HsTimeout(HsTimeout),
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::Proposal(_) => MessageKind::Proposal,
            Message::Vote(_) => MessageKind::Vote,
            Message::Timeout(_) => MessageKind::Timeout,
            Message::SyncRequest(_) => MessageKind::SyncRequest,
            Message::SyncResponse(_) => MessageKind::SyncResponse,
            Message::Batch(_) => MessageKind::Batch,
            Message::BatchFetch(_) => MessageKind::BatchFetch,
            Message::BatchFetchResponse(_) => MessageKind::BatchFetchResponse,
            Message::HsTimeout(_) => MessageKind::HsTimeout,
        }
    }

    /// The consensus view a message belongs to, if any.
    pub fn view(&self) -> Option<View> {
        match self {
            Message::Proposal(b) => Some(b.v),
            Message::Vote(v) => Some(v.v),
            Message::Timeout(t) => Some(t.vf),
            Message::HsTimeout(t) => Some(t.v),
            _ => None,
        }
    }

    /// Signatures and certificates carried, the unit of authenticator
    /// complexity. Sync and mempool traffic carries none of its own.
    pub fn authenticators(&self) -> u64 {
        match self {
            Message::Proposal(b) => b.authenticators(),
            Message::Vote(_) => 1,
            Message::Timeout(_) => TimeoutMessage::AUTHENTICATORS,
            Message::HsTimeout(_) => HsTimeout::AUTHENTICATORS,
            _ => 0,
        }
    }
}

impl Encode for Message {
    fn encode_to(&self, out: &mut Vec<u8>) {
        out.push(self.kind() as u8);
        match self {
            Message::Proposal(b) => b.encode_to(out),
            Message::Vote(v) => v.encode_to(out),
            Message::Timeout(t) => t.encode_to(out),
            Message::SyncRequest(ids) => ids.encode_to(out),
            Message::SyncResponse(bs) => bs.encode_to(out),
            Message::Batch(b) => b.encode_to(out),
            Message::BatchFetch(ids) => ids.encode_to(out),
            Message::BatchFetchResponse(txs) => txs.encode_to(out),
            Message::HsTimeout(t) => t.encode_to(out),
        }
    }
}

impl Decode for Message {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let tag = u8::decode_from(r)?;
        let kind = MessageKind::from_tag(tag).ok_or(DecodeError::InvalidTag {
            what: "message",
            tag,
        })?;
        Ok(match kind {
            MessageKind::Proposal => Message::Proposal(Arc::new(Block::decode_from(r)?)),
            MessageKind::Vote => Message::Vote(Vote::decode_from(r)?),
            MessageKind::Timeout => Message::Timeout(TimeoutMessage::decode_from(r)?),
            MessageKind::SyncRequest => Message::SyncRequest(Vec::decode_from(r)?),
            MessageKind::SyncResponse => Message::SyncResponse(Vec::decode_from(r)?),
            MessageKind::Batch => Message::Batch(Arc::new(Batch::decode_from(r)?)),
            MessageKind::BatchFetch => Message::BatchFetch(Vec::decode_from(r)?),
            MessageKind::BatchFetchResponse => Message::BatchFetchResponse(Vec::decode_from(r)?),
            MessageKind::HsTimeout => Message::HsTimeout(HsTimeout::decode_from(r)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("frame incomplete")]
    Incomplete,
    #[error("frame length {0} exceeds limit")]
    TooLarge(usize),
    #[error("empty frame")]
    Empty,
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

pub fn encode_frame(msg: &Message) -> Vec<u8> {
    let body = msg.to_bytes();
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

/// Decodes one frame from the front of `buf`, returning the message and
/// the number of bytes consumed.
pub fn decode_frame(buf: &[u8]) -> Result<(Message, usize), FrameError> {
    if buf.len() < 4 {
        return Err(FrameError::Incomplete);
    }
    let len = u32::from_le_bytes(buf[..4].try_into().unwrap()) as usize;
    if len > MAX_FRAME {
        return Err(FrameError::TooLarge(len));
    }
    if len == 0 {
        return Err(FrameError::Empty);
    }
    if buf.len() < 4 + len {
        return Err(FrameError::Incomplete);
    }
    let msg = Message::from_bytes(&buf[4..4 + len])?;
    Ok((msg, 4 + len))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::PartialSig;
    use crate::types::View;

    #[test]
    fn frame_layout() {
        let m = Message::SyncRequest(vec![Digest::ZERO]);
        let f = encode_frame(&m);
        assert_eq!(&f[..4], &(1 + 4 + 32u32).to_le_bytes());
        assert_eq!(f[4], MessageKind::SyncRequest as u8);
        assert_eq!(decode_frame(&f).unwrap(), (m, f.len()));
        assert_eq!(decode_frame(&f[..10]), Err(FrameError::Incomplete));
    }

    #[test]
    fn unknown_tag_and_oversize() {
        assert!(matches!(
            Message::from_bytes(&[42]),
            Err(DecodeError::InvalidTag { tag: 42, .. })
        ));
        let mut f = vec![0xff, 0xff, 0xff, 0x7f];
        f.push(1);
        assert!(matches!(decode_frame(&f), Err(FrameError::TooLarge(_))));
    }

    #[test]
    fn vote_authenticators() {
        let v = Message::Vote(Vote {
            voter: 1,
            block_id: Digest::ZERO,
            v: View(3),
            rho: PartialSig::GENESIS,
        });
        assert_eq!(v.authenticators(), 1);
        assert_eq!(Message::from_bytes(&v.to_bytes()).unwrap(), v);
    }
}
