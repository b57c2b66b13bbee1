#![no_main]

use libfuzzer_sys::fuzz_target;
use stagewise::corpus::{parse_jsonl, QuestionRecord, ReasoningTrace, StageExample};
use stagewise::reflection::PreferencePair;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_jsonl::<QuestionRecord>(text) {
        for r in &records {
            let _ = r.validate();
        }
    }
    let _ = parse_jsonl::<ReasoningTrace>(text);
    let _ = parse_jsonl::<StageExample>(text);
    let _ = parse_jsonl::<PreferencePair>(text);
});
