#![no_main]
use libfuzzer_sys::fuzz_target;
use mph_core::codec::{Decode, Encode};
use mph_core::message::Message;

// Anything that decodes must re-encode to bytes that decode to the same value.
fuzz_target!(|data: &[u8]| {
    if let Ok(m) = Message::from_bytes(data) {
        let again = Message::from_bytes(&m.to_bytes()).expect("re-encoded message decodes");
        assert_eq!(m, again);
    }
});
