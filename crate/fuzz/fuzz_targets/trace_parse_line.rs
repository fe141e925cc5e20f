#![no_main]

use libfuzzer_sys::fuzz_target;
use iotstage::trace::TraceRecord;

fuzz_target!(|data: &[u8]| {
    if let Ok(line) = std::str::from_utf8(data) {
        if let Ok(record) = TraceRecord::parse_line(line) {
            // canonical form must be stable under a second parse
            let canon = record.canonical_line();
            let again = TraceRecord::parse_line(&canon)
                .expect("canonical line must re-parse");
            assert_eq!(canon, again.canonical_line());
        }
    }
});
