#![no_main]

use boxrank::dataio::{format_detections, parse_detections};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    // anything accepted must survive a round trip unchanged
    if let Ok(set) = parse_detections(text) {
        let again = parse_detections(&format_detections(&set)).expect("formatted dump parses");
        assert_eq!(again, set);
    }
});
