#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        // must never panic; on success, validation and re-serialization
        // must hold up too
        if let Ok(s) = iotstage::scenario::parse_scenario(text) {
            let _ = iotstage::scenario::validate(&s);
            let out = iotstage::scenario::serialize_scenario(&s);
            let again = iotstage::scenario::parse_scenario(&out)
                .expect("serialized scenario must re-parse");
            assert_eq!(s, again, "round-trip must be the identity");
        }
    }
});
