#![no_main]

use libfuzzer_sys::fuzz_target;
use stagewise::corpus::{extract_answer, QuestionRecord};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let record = QuestionRecord::new("q", "Which one?", &["a", "b", "c", "d", "e"], 'A').expect("valid record");
    if let Some(label) = extract_answer(text, &record) {
        assert!(record.has_label(label));
        assert!(text
            .to_lowercase()
            .contains(&format!("({})", label.to_ascii_lowercase())));
    }
});
