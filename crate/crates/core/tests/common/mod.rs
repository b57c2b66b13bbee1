//! Reference oracles shared by the integration suites. They are written
//! independently of the library code they check.

#![allow(dead_code)]

use std::collections::BTreeMap;

use stagewise::corpus::{QuestionRecord, ReasoningTrace, Stage, TraceSource};

/// Template renderer built from the written format rules only.
pub fn reference_header(stem: &str, options: &[(char, &str)]) -> String {
    let mut parts = vec![stem.to_string(), "Options:".to_string()];
    for (label, text) in options {
        parts.push(format!("({label})"));
        parts.push(text.to_string());
    }
    parts.join(" ")
}

fn dotted(text: &str) -> String {
    if text.ends_with('.') {
        text.to_string()
    } else {
        format!("{text}.")
    }
}

pub fn reference_input(
    record: &QuestionRecord,
    stage: Stage,
    general: Option<&str>,
    specifics: Option<&BTreeMap<char, String>>,
    label: Option<char>,
) -> String {
    let options: Vec<(char, &str)> = record.options.iter().map(|c| (c.label, c.text.as_str())).collect();
    let header = reference_header(&record.stem, &options);
    match stage {
        Stage::Recall => format!("{header}\n Recall:"),
        Stage::Analyze => format!(
            "{header}\n Recall: {}\n Analyze: For option {},",
            dotted(general.unwrap()),
            label.unwrap()
        ),
        Stage::Summarize => {
            let specifics = specifics.unwrap();
            let body: Vec<String> = options
                .iter()
                .map(|(l, _)| format!("For option {l}, {}", dotted(&specifics[l])))
                .collect();
            format!(
                "{header}\n Recall: {}\n Analyze: {}\n Summarize:",
                dotted(general.unwrap()),
                body.join(" ")
            )
        }
    }
}

/// Knowledge recovered from a stage input by splitting on the cue strings.
#[derive(Debug, Default, PartialEq, Eq)]
pub struct Parsed {
    pub header: String,
    pub general: Option<String>,
    pub specifics: Vec<(char, String)>,
    pub cue: String,
}

pub fn reference_parse(input: &str, labels: &[char]) -> Parsed {
    let mut out = Parsed::default();
    let sections: Vec<&str> = input.split("\n ").collect();
    out.header = sections[0].to_string();
    out.cue = sections.last().unwrap().to_string();
    for section in &sections[1..sections.len() - 1] {
        if let Some(rest) = section.strip_prefix("Recall: ") {
            out.general = Some(rest.to_string());
        } else if let Some(rest) = section.strip_prefix("Analyze: ") {
            // Locate each "For option X, " marker in label order.
            let mut starts = Vec::new();
            let mut from = 0;
            for &l in labels {
                let marker = format!("For option {l}, ");
                let at = from + rest[from..].find(&marker).expect("marker present");
                starts.push((l, at, at + marker.len()));
                from = at + marker.len();
            }
            for (i, &(l, _, body)) in starts.iter().enumerate() {
                let end = starts.get(i + 1).map(|s| s.1 - 1).unwrap_or(rest.len());
                out.specifics.push((l, rest[body..end].to_string()));
            }
        }
    }
    out
}

/// All `answer is (X)` verdicts, scanning every offset.
pub fn scan_all_answers(summary: &str) -> Vec<char> {
    let lower = summary.to_lowercase();
    let bytes = lower.as_bytes();
    let mut out = Vec::new();
    for i in 0..bytes.len() {
        if !lower.is_char_boundary(i) || !lower[i..].starts_with("answer") {
            continue;
        }
        let rest = &lower[i + "answer".len()..];
        let after_ws = rest.trim_start();
        if after_ws.len() == rest.len() {
            continue;
        }
        let Some(after_is) = after_ws.strip_prefix("is") else {
            continue;
        };
        let after_ws2 = after_is.trim_start();
        if after_ws2.len() == after_is.len() {
            continue;
        }
        let mut chars = after_ws2.chars();
        if let (Some('('), Some(c), Some(')')) = (chars.next(), chars.next(), chars.next()) {
            if c.is_ascii_lowercase() {
                out.push(c.to_ascii_uppercase());
            }
        }
    }
    out
}

pub fn trace_for(record: &QuestionRecord, general: &str, specific: impl Fn(char) -> String) -> ReasoningTrace {
    ReasoningTrace {
        question_id: record.id.clone(),
        general: general.to_string(),
        specifics: record.labels().map(|l| (l, specific(l))).collect(),
        summary: format!("Therefore, the answer is ({}).", record.gold),
        source: TraceSource::SyntheticOracle,
    }
}

pub const TINY_CORPUS: [&str; 3] = ["the cat sat on a mat .", "a dog ran ( A ) ?", "B : yes no"];

/// A student of well under a thousand parameters.
pub fn tiny_student(seed: u64) -> stagewise::student::Student {
    use stagewise::student::{ModelConfig, Student, Vocab};
    let vocab = Vocab::build(TINY_CORPUS, 100).unwrap();
    let cfg = ModelConfig {
        d_model: 4,
        n_heads: 2,
        d_ff: 8,
        enc_layers: 1,
        dec_layers: 1,
        max_len: 10,
        ..Default::default()
    };
    Student::new(vocab, cfg, seed).unwrap()
}

/// Central-difference check of `grads` against `loss` on 20 random
/// coordinates of every tensor class. Returns the worst relative error.
pub fn gradcheck(
    student: &mut stagewise::student::Student,
    grads: &stagewise::student::Gradients,
    seed: u64,
    loss: impl Fn(&stagewise::student::Student) -> f64,
) -> f64 {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let kinds: std::collections::BTreeSet<String> =
        student.params.specs().iter().map(|s| format!("{:?}", s.kind)).collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for kind in kinds {
        let coords: Vec<(usize, usize)> = student
            .params
            .specs()
            .iter()
            .enumerate()
            .filter(|(_, s)| format!("{:?}", s.kind) == kind)
            .flat_map(|(t, s)| (0..s.rows * s.cols).map(move |j| (t, j)))
            .collect();
        for _ in 0..20 {
            let (t, j) = coords[rng.random_range(0..coords.len())];
            let orig = student.params.tensors[t].data[j];
            student.params.tensors[t].data[j] = orig + h;
            let up = loss(student);
            student.params.tensors[t].data[j] = orig - h;
            let down = loss(student);
            student.params.tensors[t].data[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let analytic = grads.tensors[t].data[j];
            let rel = (analytic - fd).abs() / (analytic.abs() + 1e-8);
            worst = worst.max(rel);
        }
    }
    worst
}
