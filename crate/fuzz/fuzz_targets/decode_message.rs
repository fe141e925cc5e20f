#![no_main]

use libfuzzer_sys::fuzz_target;
use iotstage::behaviors::{decode_message, encode_message};

fuzz_target!(|data: &[u8]| {
    if let Some((kind, sender)) = decode_message(data) {
        // the frame must be self-consistent: re-encoding the decoded pair
        // reproduces the accepted prefix
        let encoded = encode_message(kind, sender);
        assert_eq!(&encoded[..], &data[..encoded.len()]);
    }
});
