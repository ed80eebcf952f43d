#![no_main]
use libfuzzer_sys::fuzz_target;
use mph_core::message::{decode_frame, encode_frame};

fuzz_target!(|data: &[u8]| {
    // walk the buffer the way the TCP reader does
    let mut rest = data;
    while let Ok((msg, used)) = decode_frame(rest) {
        assert!(used > 4 && used <= rest.len());
        let frame = encode_frame(&msg);
        assert_eq!(decode_frame(&frame).unwrap(), (msg, frame.len()));
        rest = &rest[used..];
    }
});
