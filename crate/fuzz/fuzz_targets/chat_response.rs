#![no_main]

use libfuzzer_sys::fuzz_target;
use stagewise::teacher::parse_chat_response;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_chat_response(text);
    }
});
