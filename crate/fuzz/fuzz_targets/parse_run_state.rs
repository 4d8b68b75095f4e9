#![no_main]

use boxrank::dataio::parse_run_state;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    // accepted states already passed every structural check
    if let Ok(run) = parse_run_state(text) {
        assert!(run.check().is_ok());
    }
});
