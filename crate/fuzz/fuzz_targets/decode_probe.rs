#![no_main]

use libfuzzer_sys::fuzz_target;
use iotstage::calibrate::{decode_probe, encode_probe};

fuzz_target!(|data: &[u8]| {
    if let Some((seq, nonce)) = decode_probe(data) {
        // any accepted datagram must re-encode to the same bytes
        assert_eq!(encode_probe(seq, nonce).as_slice(), data);
    }
});
