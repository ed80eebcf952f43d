//! The checked-in fuzz seeds must decode, and pass the same round-trip
//! checks the fuzz targets assert.

use std::fs;
use std::path::PathBuf;

use mph_core::codec::{Decode, Encode};
use mph_core::message::{decode_frame, encode_frame, Message};
use mph_core::types::Block;

fn seeds(target: &str) -> Vec<Vec<u8>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| fs::read(e.unwrap().path()).unwrap())
        .collect();
    out.sort();
    assert!(!out.is_empty());
    out
}

#[test]
fn message_seeds_round_trip() {
    for s in seeds("decode_message") {
        let m = Message::from_bytes(&s).unwrap();
        assert_eq!(m.to_bytes(), s);
    }
}

#[test]
fn frame_seeds_round_trip() {
    for s in seeds("decode_frame") {
        let (m, used) = decode_frame(&s).unwrap();
        assert_eq!(used, s.len());
        assert_eq!(encode_frame(&m), s);
    }
}

#[test]
fn block_seeds_round_trip() {
    for s in seeds("decode_block") {
        let b = Block::from_bytes(&s).unwrap();
        assert_eq!(b.to_bytes(), s);
        assert_eq!(b.compute_id(), b.id);
    }
}
