//! Multiple-choice data model, stage input/label formats, answer extraction,
//! stage dataset assembly, de-duplication and JSONL persistence.
//!
//! The stage formats are the contract shared by every other module. An input
//! is the question header followed by zero or more knowledge sections and a
//! terminal cue:
//!
//! ```text
//! <stem> Options: (A) <a> (B) <b>\n Recall: <general>\n Analyze: For option A, <spec A> For option B, <spec B>\n Summarize:
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("missing knowledge: {0}")]
    MissingKnowledge(String),
    #[error("option label {0} is not part of the question")]
    UnknownLabel(char),
    #[error("trace references unknown question {0:?}")]
    DanglingTrace(String),
    #[error("invalid question {id:?}: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("malformed JSONL at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// One answer option, e.g. `(B) oven`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Choice {
    pub label: char,
    pub text: String,
}

/// A multiple-choice question. Serialized in the common
/// `{id, question, choices, answerKey}` ingestion layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionRecord {
    pub id: String,
    #[serde(rename = "question")]
    pub stem: String,
    #[serde(rename = "choices")]
    pub options: Vec<Choice>,
    #[serde(rename = "answerKey")]
    pub gold: char,
}

impl QuestionRecord {
    /// Builds a record with labels A, B, C, ... assigned in order.
    pub fn new(id: impl Into<String>, stem: impl Into<String>, options: &[&str], gold: char) -> Result<Self> {
        let record = Self {
            id: id.into(),
            stem: stem.into(),
            options: options
                .iter()
                .zip('A'..='Z')
                .map(|(text, label)| Choice {
                    label,
                    text: (*text).to_string(),
                })
                .collect(),
            gold,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |reason: String| {
            Err(CorpusError::InvalidRecord {
                id: self.id.clone(),
                reason,
            })
        };
        let n = self.options.len();
        if !(2..=26).contains(&n) {
            return invalid(format!("{n} options, expected 2..=26"));
        }
        for (choice, expected) in self.options.iter().zip('A'..='Z') {
            if choice.label != expected {
                return invalid(format!("label {} where {expected} was expected", choice.label));
            }
            if choice.text.trim().is_empty() {
                return invalid(format!("option {} has empty text", choice.label));
            }
        }
        if self.stem.trim().is_empty() {
            return invalid("empty stem".into());
        }
        if !self.has_label(self.gold) {
            return invalid(format!("gold {} is not an option label", self.gold));
        }
        Ok(())
    }

    pub fn labels(&self) -> impl Iterator<Item = char> + '_ {
        self.options.iter().map(|c| c.label)
    }

    pub fn has_label(&self, label: char) -> bool {
        self.options.iter().any(|c| c.label == label)
    }

    pub fn option_text(&self, label: char) -> Option<&str> {
        self.options.iter().find(|c| c.label == label).map(|c| c.text.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Recall,
    Analyze,
    Summarize,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Recall, Stage::Analyze, Stage::Summarize];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Recall => "recall",
            Stage::Analyze => "analyze",
            Stage::Summarize => "summarize",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceSource {
    RemoteTeacher,
    SyntheticOracle,
    StudentGenerated,
}

/// General knowledge, per-option specific knowledge and the final summary
/// produced for one question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReasoningTrace {
    pub question_id: String,
    pub general: String,
    pub specifics: BTreeMap<char, String>,
    pub summary: String,
    pub source: TraceSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageExample {
    pub stage: Stage,
    pub question_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub option_label: Option<char>,
    pub input: String,
    pub label: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StageDatasets {
    pub recall: Vec<StageExample>,
    pub analyze: Vec<StageExample>,
    pub summarize: Vec<StageExample>,
}

impl StageDatasets {
    pub fn get(&self, stage: Stage) -> &[StageExample] {
        match stage {
            Stage::Recall => &self.recall,
            Stage::Analyze => &self.analyze,
            Stage::Summarize => &self.summarize,
        }
    }

    pub fn get_mut(&mut self, stage: Stage) -> &mut Vec<StageExample> {
        match stage {
            Stage::Recall => &mut self.recall,
            Stage::Analyze => &mut self.analyze,
            Stage::Summarize => &mut self.summarize,
        }
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        (self.recall.len(), self.analyze.len(), self.summarize.len())
    }

    pub fn iter(&self) -> impl Iterator<Item = &StageExample> {
        self.recall.iter().chain(&self.analyze).chain(&self.summarize)
    }

    /// Writes `stage_{recall,analyze,summarize}.jsonl` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for stage in Stage::ALL {
            write_jsonl(&dir.join(format!("stage_{stage}.jsonl")), self.get(stage))?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let mut out = Self::default();
        for stage in Stage::ALL {
            let path = dir.join(format!("stage_{stage}.jsonl"));
            *out.get_mut(stage) = if path.exists() { read_jsonl(&path)? } else { Vec::new() };
        }
        Ok(out)
    }
}

/// The cue that terminates a stage input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cue {
    Recall,
    Analyze(char),
    Summarize,
}

pub fn format_question_header(record: &QuestionRecord) -> String {
    let mut out = String::with_capacity(record.stem.len() + 16 * record.options.len());
    out.push_str(&record.stem);
    out.push_str(" Options:");
    for choice in &record.options {
        out.push_str(" (");
        out.push(choice.label);
        out.push_str(") ");
        out.push_str(&choice.text);
    }
    out
}

fn push_with_period(out: &mut String, text: &str) {
    out.push_str(text);
    if !text.ends_with('.') {
        out.push('.');
    }
}

/// Renders an input with an optional recall section, an optional analyze
/// section and the given cue. Sections that are `None` are omitted wholesale,
/// which is how the ablation variants are laid out.
pub fn render_input(
    record: &QuestionRecord,
    general: Option<&str>,
    specifics: Option<&[(char, &str)]>,
    cue: Cue,
) -> String {
    let mut out = format_question_header(record);
    if let Some(general) = general {
        out.push_str("\n Recall: ");
        push_with_period(&mut out, general);
    }
    if let Some(specifics) = specifics {
        out.push_str("\n Analyze:");
        for (label, text) in specifics {
            out.push_str(" For option ");
            out.push(*label);
            out.push_str(", ");
            push_with_period(&mut out, text);
        }
    }
    match cue {
        Cue::Recall => out.push_str("\n Recall:"),
        Cue::Analyze(label) => {
            out.push_str("\n Analyze: For option ");
            out.push(label);
            out.push(',');
        }
        Cue::Summarize => out.push_str("\n Summarize:"),
    }
    out
}

/// Collects specifics in option order, failing if any option is missing.
pub fn ordered_specifics<'a>(
    record: &QuestionRecord,
    specifics: &'a BTreeMap<char, String>,
) -> Result<Vec<(char, &'a str)>> {
    record
        .labels()
        .map(|label| {
            specifics
                .get(&label)
                .map(|s| (label, s.as_str()))
                .ok_or_else(|| CorpusError::MissingKnowledge(format!("specific knowledge for option {label}")))
        })
        .collect()
}

pub fn format_stage_input(
    record: &QuestionRecord,
    stage: Stage,
    general: Option<&str>,
    specifics: Option<&BTreeMap<char, String>>,
    option_label: Option<char>,
) -> Result<String> {
    let need_general = || general.ok_or_else(|| CorpusError::MissingKnowledge("general knowledge".into()));
    match stage {
        Stage::Recall => Ok(render_input(record, None, None, Cue::Recall)),
        Stage::Analyze => {
            let general = need_general()?;
            let label = option_label.ok_or_else(|| CorpusError::MissingKnowledge("option label".into()))?;
            if !record.has_label(label) {
                return Err(CorpusError::UnknownLabel(label));
            }
            Ok(render_input(record, Some(general), None, Cue::Analyze(label)))
        }
        Stage::Summarize => {
            let general = need_general()?;
            let specifics = specifics.ok_or_else(|| CorpusError::MissingKnowledge("specific knowledge".into()))?;
            if let Some(label) = specifics.keys().find(|l| !record.has_label(**l)) {
                return Err(CorpusError::UnknownLabel(*label));
            }
            let ordered = ordered_specifics(record, specifics)?;
            Ok(render_input(record, Some(general), Some(&ordered), Cue::Summarize))
        }
    }
}

pub fn build_stage_datasets(records: &[QuestionRecord], traces: &[ReasoningTrace]) -> Result<StageDatasets> {
    let by_id: HashMap<&str, &QuestionRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut out = StageDatasets::default();
    for trace in traces {
        let record = by_id
            .get(trace.question_id.as_str())
            .ok_or_else(|| CorpusError::DanglingTrace(trace.question_id.clone()))?;
        let example = |stage, option_label, input, label: &str| StageExample {
            stage,
            question_id: record.id.clone(),
            option_label,
            input,
            label: label.to_string(),
        };
        out.recall.push(example(
            Stage::Recall,
            None,
            format_stage_input(record, Stage::Recall, None, None, None)?,
            &trace.general,
        ));
        for (label, text) in ordered_specifics(record, &trace.specifics)? {
            out.analyze.push(example(
                Stage::Analyze,
                Some(label),
                format_stage_input(record, Stage::Analyze, Some(&trace.general), None, Some(label))?,
                text,
            ));
        }
        out.summarize.push(example(
            Stage::Summarize,
            None,
            format_stage_input(
                record,
                Stage::Summarize,
                Some(&trace.general),
                Some(&trace.specifics),
                None,
            )?,
            &trace.summary,
        ));
    }
    Ok(out)
}

/// Lowercases and collapses whitespace runs.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Drops examples whose normalized (stage, input, label) was already seen.
pub fn dedup(dataset: &StageDatasets) -> StageDatasets {
    let mut seen = HashSet::new();
    let mut out = StageDatasets::default();
    for stage in Stage::ALL {
        *out.get_mut(stage) = dataset
            .get(stage)
            .iter()
            .filter(|ex| seen.insert((ex.stage, normalize(&ex.input), normalize(&ex.label))))
            .cloned()
            .collect();
    }
    out
}

fn answer_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)answer\s+is\s+\(([a-z])\)").expect("valid regex"))
}

/// Reads the verdict from the last `answer is (X)` in a summary.
pub fn extract_answer(summary: &str, record: &QuestionRecord) -> Option<char> {
    let last = answer_pattern().captures_iter(summary).last()?;
    let label = last[1].chars().next()?.to_ascii_uppercase();
    record.has_label(label).then_some(label)
}

/// Parses JSONL text, rejecting unknown fields. Blank lines are skipped.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (idx, line) in text.split('\n').enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    let reader = BufReader::new(File::open(path)?);
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut writer, item).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads and validates a questions file.
pub fn read_questions(path: &Path) -> Result<Vec<QuestionRecord>> {
    let records: Vec<QuestionRecord> = read_jsonl(path)?;
    for record in &records {
        record.validate()?;
    }
    Ok(records)
}
