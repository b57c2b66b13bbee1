#![no_main]

use libfuzzer_sys::fuzz_target;
use stagewise::student::checkpoint::{from_bytes, to_bytes};

fuzz_target!(|data: &[u8]| {
    if let Ok(student) = from_bytes(data) {
        assert_eq!(to_bytes(&student), data);
    }
});
