#![no_main]

use libfuzzer_sys::fuzz_target;
use stagewise::corpus::QuestionRecord;
use stagewise::teacher::parse_teacher_output;

fuzz_target!(|data: &[u8]| {
    let Some((&pick, rest)) = data.split_first() else {
        return;
    };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    let n = 2 + usize::from(pick % 4);
    let texts = ["alpha", "beta", "gamma", "delta", "epsilon"];
    let gold = (b'A' + pick / 4 % n as u8) as char;
    let record = QuestionRecord::new("fuzz", "Which one is it?", &texts[..n], gold).expect("valid record");
    if let Ok(trace) = parse_teacher_output(text, &record) {
        assert_eq!(trace.specifics.len(), n);
        for (label, block) in &trace.specifics {
            let verdict = if *label == gold { "correct" } else { "incorrect" };
            assert!(block.starts_with(&format!("{label} is {verdict}. Because")));
        }
    }
});
