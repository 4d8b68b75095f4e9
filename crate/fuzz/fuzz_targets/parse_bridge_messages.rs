#![no_main]

use boxrank::oracle::bridge::{parse_rescore_reply, parse_train_reply, Request};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else { return };
    let _ = parse_train_reply(line);
    let _ = parse_rescore_reply(line);
    if let Ok(req) = Request::parse(line) {
        assert_eq!(Request::parse(&req.to_line()).expect("serialized request parses"), req);
    }
});
