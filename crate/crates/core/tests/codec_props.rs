use std::sync::Arc;

use bytes::Bytes;
use mph_core::codec::{Decode, Encode};
use mph_core::crypto::{Digest, PartialSig, ThresholdSig};
use mph_core::mempool::Batch;
use mph_core::message::{decode_frame, encode_frame, Message};
use mph_core::types::{
    Block, HsTimeout, QuorumCert, TimeoutCert, TimeoutMessage, Transaction, View, Vote,
};
use proptest::prelude::*;

fn digest() -> impl Strategy<Value = Digest> {
    any::<[u8; 32]>().prop_map(Digest)
}

fn partial() -> impl Strategy<Value = PartialSig> {
    (any::<u16>(), any::<[u8; 32]>()).prop_map(|(index, tag)| PartialSig { index, tag })
}

fn sigma() -> impl Strategy<Value = ThresholdSig> {
    prop_oneof![
        Just(ThresholdSig::Genesis),
        (digest(), prop::collection::vec(partial(), 0..5))
            .prop_map(|(msg_digest, shares)| ThresholdSig::Combined { msg_digest, shares }),
    ]
}

fn view() -> impl Strategy<Value = View> {
    any::<u64>().prop_map(View)
}

fn qc() -> impl Strategy<Value = QuorumCert> {
    (digest(), view(), sigma()).prop_map(|(bid, v, sigma)| QuorumCert { bid, v, sigma })
}

fn tc() -> impl Strategy<Value = TimeoutCert> {
    (view(), sigma()).prop_map(|(v, sigma)| TimeoutCert { v, sigma })
}

fn block() -> impl Strategy<Value = Block> {
    (
        (digest(), view(), digest(), view()),
        prop::collection::vec(digest(), 0..6),
        qc(),
        prop::option::of(tc()),
        prop::option::of((tc(), tc())),
        partial(),
    )
        .prop_map(|((id, v, p, pv), txs, qc, tc, tcs, rho)| Block {
            id,
            v,
            p,
            pv,
            txs,
            qc,
            tc,
            tcs,
            rho,
        })
}

fn tx() -> impl Strategy<Value = Transaction> {
    (prop::collection::vec(any::<u8>(), 0..64), any::<u64>())
        .prop_map(|(p, t)| Transaction::new(Bytes::from(p), t))
}

fn message() -> impl Strategy<Value = Message> {
    prop_oneof![
        block().prop_map(|b| Message::Proposal(Arc::new(b))),
        (any::<u16>(), digest(), view(), partial()).prop_map(|(voter, block_id, v, rho)| {
            Message::Vote(Vote {
                voter,
                block_id,
                v,
                rho,
            })
        }),
        (
            any::<u16>(),
            view(),
            view(),
            partial(),
            partial(),
            qc(),
            qc()
        )
            .prop_map(|(sender, vf, vs, rho_f, rho_s, high_qc, sec_high_qc)| {
                Message::Timeout(TimeoutMessage {
                    sender,
                    vf,
                    vs,
                    rho_f,
                    rho_s,
                    high_qc,
                    sec_high_qc,
                })
            }),
        (any::<u16>(), view(), partial(), qc()).prop_map(|(sender, v, rho, high_qc)| {
            Message::HsTimeout(HsTimeout {
                sender,
                v,
                rho,
                high_qc,
            })
        }),
        prop::collection::vec(digest(), 0..4).prop_map(Message::SyncRequest),
        prop::collection::vec(block(), 0..3).prop_map(Message::SyncResponse),
        (any::<u16>(), prop::collection::vec(tx(), 0..4))
            .prop_map(|(o, txs)| Message::Batch(Arc::new(Batch::new(o, txs)))),
        prop::collection::vec(digest(), 0..4).prop_map(Message::BatchFetch),
        prop::collection::vec(tx(), 0..4).prop_map(Message::BatchFetchResponse),
    ]
}

proptest! {
    #[test]
    fn message_round_trip(m in message()) {
        let bytes = m.to_bytes();
        let back = Message::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn block_round_trip(b in block()) {
        prop_assert_eq!(Block::from_bytes(&b.to_bytes()).unwrap(), b);
    }

    #[test]
    fn frame_round_trip_with_trailing(m in message(), tail in prop::collection::vec(any::<u8>(), 0..16)) {
        let mut buf = encode_frame(&m);
        let n = buf.len();
        buf.extend_from_slice(&tail);
        let (back, used) = decode_frame(&buf).unwrap();
        prop_assert_eq!(used, n);
        prop_assert_eq!(back.to_bytes(), m.to_bytes());
    }

    #[test]
    fn truncated_frames_are_incomplete(m in message(), cut in any::<prop::sample::Index>()) {
        let buf = encode_frame(&m);
        let k = cut.index(buf.len());
        prop_assert!(decode_frame(&buf[..k]).is_err());
    }

    #[test]
    fn arbitrary_bytes_never_panic(buf in prop::collection::vec(any::<u8>(), 0..512)) {
        let _ = decode_frame(&buf);
        let _ = Message::from_bytes(&buf);
        let _ = Block::from_bytes(&buf);
    }
}
