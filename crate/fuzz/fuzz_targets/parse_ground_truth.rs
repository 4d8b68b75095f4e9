#![no_main]

use boxrank::dataio::{format_ground_truth, parse_ground_truth};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(gt) = parse_ground_truth(text) {
        let again = parse_ground_truth(&format_ground_truth(&gt)).expect("formatted ground truth parses");
        assert_eq!(again, gt);
    }
});
