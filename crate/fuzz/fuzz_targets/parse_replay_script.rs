#![no_main]

use boxrank::oracle::ReplayScript;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(script) = ReplayScript::parse(text) {
        assert_eq!(ReplayScript::parse(&script.to_json()).expect("serialized script parses"), script);
    }
});
