#![no_main]
use libfuzzer_sys::fuzz_target;
use mph_core::codec::{Decode, Encode};
use mph_core::types::Block;

fuzz_target!(|data: &[u8]| {
    if let Ok(b) = Block::from_bytes(data) {
        let again = Block::from_bytes(&b.to_bytes()).unwrap();
        assert_eq!(b, again);
        let _ = b.compute_id();
    }
});
