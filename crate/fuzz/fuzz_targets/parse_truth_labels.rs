#![no_main]

use boxrank::dataio::parse_truth_labels;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_truth_labels(text);
    }
});
