#![no_main]

use libfuzzer_sys::fuzz_target;
use stagewise::corpus::QuestionRecord;
use stagewise::teacher::{parse_pack_example, parse_teacher_output, render_curation_prompt, PromptPack};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(pack) = PromptPack::parse(text) else { return };
    for (i, example) in pack.examples.iter().enumerate() {
        if let Ok((record, answer)) = parse_pack_example(&format!("ex{i}"), example) {
            let _ = parse_teacher_output(&answer, &record);
        }
    }
    let record = QuestionRecord::new("t", "Which one?", &["a", "b", "c"], 'C').expect("valid record");
    render_curation_prompt(&record, &pack).expect("non-empty pack renders");
});
