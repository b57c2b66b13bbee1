//! Few-shot curation prompts and the teacher output parser.
//!
//! A pack file holds the instruction followed by worked examples, each block
//! separated by a line containing only `###`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{make_summary_label, TeacherError};
use crate::corpus::{Choice, QuestionRecord, ReasoningTrace, TraceSource};

const DELIMITER: &str = "###";
const KEY_INFO: &str = "Key Information:";
const EXPLANATIONS: &str = "Explanations:";
const SLOT: &str = "<>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PackStyle {
    Csqa,
    Obqa,
    StrategyQa,
}

impl PackStyle {
    pub const ALL: [PackStyle; 3] = [PackStyle::Csqa, PackStyle::Obqa, PackStyle::StrategyQa];

    pub fn as_str(self) -> &'static str {
        match self {
            PackStyle::Csqa => "csqa",
            PackStyle::Obqa => "obqa",
            PackStyle::StrategyQa => "strategyqa",
        }
    }

    fn source(self) -> &'static str {
        match self {
            PackStyle::Csqa => include_str!("../../assets/packs/csqa.txt"),
            PackStyle::Obqa => include_str!("../../assets/packs/obqa.txt"),
            PackStyle::StrategyQa => include_str!("../../assets/packs/strategyqa.txt"),
        }
    }
}

impl FromStr for PackStyle {
    type Err = TeacherError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PackStyle::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| TeacherError::Config(format!("unknown prompt pack {s:?}")))
    }
}

impl fmt::Display for PackStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptPack {
    pub instruction: String,
    pub examples: Vec<String>,
    /// Whether option lines carry an `Options:` prefix.
    pub options_prefix: bool,
}

impl PromptPack {
    pub fn parse(text: &str) -> Result<Self, TeacherError> {
        let mut blocks = vec![String::new()];
        for line in text.lines() {
            if line.trim_end() == DELIMITER {
                blocks.push(String::new());
            } else {
                let block = blocks.last_mut().expect("non-empty");
                if !block.is_empty() {
                    block.push('\n');
                }
                block.push_str(line);
            }
        }
        let mut blocks = blocks.into_iter().map(|b| b.trim().to_string());
        let instruction = blocks.next().unwrap_or_default();
        let examples: Vec<String> = blocks.filter(|b| !b.is_empty()).collect();
        if examples.is_empty() {
            return Err(TeacherError::EmptyPromptPack);
        }
        let options_prefix = examples
            .iter()
            .all(|e| e.lines().nth(1).is_some_and(|l| l.starts_with("Options:")));
        Ok(Self {
            instruction,
            examples,
            options_prefix,
        })
    }

    pub fn builtin(style: PackStyle) -> Self {
        Self::parse(style.source()).expect("bundled packs are well formed")
    }

    /// Loads a bundled pack by name, or a pack file by path.
    pub fn load(name_or_path: &str) -> Result<Self, TeacherError> {
        match name_or_path.parse::<PackStyle>() {
            Ok(style) => Ok(Self::builtin(style)),
            Err(_) => Self::parse(&std::fs::read_to_string(Path::new(name_or_path))?),
        }
    }
}

fn option_line(record: &QuestionRecord, prefix: bool) -> String {
    let mut out = String::new();
    if prefix {
        out.push_str("Options:");
    }
    for choice in &record.options {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&format!("({}) {}", choice.label, choice.text));
    }
    out
}

/// Instruction, the pack's examples, then the target question with every
/// option's verdict pre-marked from the gold label and `<>` slots to fill.
pub fn render_curation_prompt(record: &QuestionRecord, pack: &PromptPack) -> Result<String, TeacherError> {
    if pack.examples.is_empty() {
        return Err(TeacherError::EmptyPromptPack);
    }
    let mut out = String::new();
    out.push_str(&pack.instruction);
    for example in &pack.examples {
        out.push('\n');
        out.push_str(DELIMITER);
        out.push('\n');
        out.push_str(example);
    }
    out.push('\n');
    out.push_str(DELIMITER);
    out.push('\n');
    out.push_str(&format!("{}. {}\n", pack.examples.len() + 1, record.stem));
    out.push_str(&option_line(record, pack.options_prefix));
    out.push_str(&format!("\n{KEY_INFO} {SLOT}\n{EXPLANATIONS} "));
    for (i, choice) in record.options.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let verdict = if choice.label == record.gold {
            "correct"
        } else {
            "incorrect"
        };
        out.push_str(&format!("{} is {verdict}. Because {SLOT}", choice.label));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("missing section {0:?}")]
    MissingSection(&'static str),
    #[error("section {0:?} is empty")]
    EmptySection(&'static str),
    #[error("no explanation for option {0}")]
    MissingOption(char),
    #[error("option {0} is explained twice")]
    DuplicateOption(char),
    #[error("option {0} is not part of the question")]
    UnknownOption(char),
    #[error("explanation for option {0} is empty")]
    EmptyExplanation(char),
    #[error("verdict for option {0} contradicts the gold label")]
    VerdictContradictsGold(char),
}

fn marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b([A-Z]) is (correct|incorrect)\. Because\b").expect("valid regex"))
}

fn is_blank(text: &str) -> bool {
    let t = text.trim();
    t.is_empty() || t == SLOT
}

/// Parses a completion holding `Key Information:` and `Explanations:`
/// sections. `specifics[X]` is the whole `X is ... Because ...` block; the
/// summary is derived from the gold label.
pub fn parse_teacher_output(text: &str, record: &QuestionRecord) -> Result<ReasoningTrace, ParseError> {
    let ki = text.find(KEY_INFO).ok_or(ParseError::MissingSection(KEY_INFO))?;
    let after_ki = &text[ki + KEY_INFO.len()..];
    let ex = after_ki
        .find(EXPLANATIONS)
        .ok_or(ParseError::MissingSection(EXPLANATIONS))?;
    let general = after_ki[..ex].trim();
    if is_blank(general) {
        return Err(ParseError::EmptySection(KEY_INFO));
    }
    let mut body = &after_ki[ex + EXPLANATIONS.len()..];
    if let Some(end) = body.find(&format!("\n{DELIMITER}")) {
        body = &body[..end];
    }

    let markers: Vec<_> = marker_re().captures_iter(body).collect();
    if markers.is_empty() {
        return Err(ParseError::EmptySection(EXPLANATIONS));
    }
    let mut specifics = BTreeMap::new();
    for (i, caps) in markers.iter().enumerate() {
        let whole = caps.get(0).expect("match");
        let label = caps[1].chars().next().expect("one letter");
        if !record.has_label(label) {
            return Err(ParseError::UnknownOption(label));
        }
        let end = markers
            .get(i + 1)
            .map_or(body.len(), |m| m.get(0).expect("match").start());
        let block = body[whole.start()..end].trim();
        if is_blank(&body[whole.end()..end]) {
            return Err(ParseError::EmptyExplanation(label));
        }
        let claims_correct = &caps[2] == "correct";
        if claims_correct != (label == record.gold) {
            return Err(ParseError::VerdictContradictsGold(label));
        }
        if specifics.insert(label, block.to_string()).is_some() {
            return Err(ParseError::DuplicateOption(label));
        }
    }
    if let Some(missing) = record.labels().find(|l| !specifics.contains_key(l)) {
        return Err(ParseError::MissingOption(missing));
    }
    Ok(ReasoningTrace {
        question_id: record.id.clone(),
        general: general.to_string(),
        specifics,
        summary: make_summary_label(record),
        source: TraceSource::RemoteTeacher,
    })
}

fn option_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\(([A-Z])\) ").expect("valid regex"))
}

/// Splits a worked pack example into its question and its answer text
/// (everything from `Key Information:` on). The gold label is the option
/// marked correct.
pub fn parse_pack_example(id: &str, example: &str) -> Result<(QuestionRecord, String), TeacherError> {
    let bad = |why: &str| TeacherError::Config(format!("pack example {id}: {why}"));
    let mut lines = example.lines();
    let stem_line = lines.next().ok_or_else(|| bad("empty"))?;
    let stem = stem_line
        .split_once(". ")
        .filter(|(n, _)| n.chars().all(|c| c.is_ascii_digit()))
        .map_or(stem_line, |(_, s)| s)
        .trim()
        .to_string();
    let opts = lines.next().ok_or_else(|| bad("no option line"))?;
    let opts = opts.strip_prefix("Options:").unwrap_or(opts);
    let starts: Vec<_> = option_re().captures_iter(opts).collect();
    if starts.is_empty() {
        return Err(bad("no options"));
    }
    let mut options = Vec::new();
    for (i, caps) in starts.iter().enumerate() {
        let m = caps.get(0).expect("match");
        let end = starts
            .get(i + 1)
            .map_or(opts.len(), |n| n.get(0).expect("match").start());
        options.push(Choice {
            label: caps[1].chars().next().expect("one letter"),
            text: opts[m.end()..end].trim().to_string(),
        });
    }
    let answer = example
        .find(KEY_INFO)
        .map(|i| example[i..].to_string())
        .ok_or_else(|| bad("no Key Information section"))?;
    let gold = marker_re()
        .captures_iter(&answer)
        .find(|c| &c[2] == "correct")
        .and_then(|c| c[1].chars().next())
        .ok_or_else(|| bad("no option marked correct"))?;
    let record = QuestionRecord {
        id: id.to_string(),
        stem,
        options,
        gold,
    };
    record.validate().map_err(|e| bad(&e.to_string()))?;
    Ok((record, answer))
}
