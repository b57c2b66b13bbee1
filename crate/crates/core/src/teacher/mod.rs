//! Reasoning-trace producers: an offline micro-world oracle and a client for a
//! remote chat-completions teacher.

pub mod mock;
mod prompt;
mod remote;
mod world;

pub use prompt::{parse_pack_example, parse_teacher_output, render_curation_prompt, PackStyle, ParseError, PromptPack};
pub use remote::{curate_remote, parse_chat_response, CurationReport, RawGeneration, TeacherConfig};
pub use world::{gen_microworld, specific_text, split_by_hash, synth_trace, Attribute, Entity, MicroWorld, Splits};

use crate::corpus::QuestionRecord;

#[derive(Debug, thiserror::Error)]
pub enum TeacherError {
    #[error("infeasible world: {0}")]
    InfeasibleWorld(String),
    #[error("record not generated from this world: {0}")]
    ForeignRecord(String),
    #[error("prompt pack has no few-shot examples")]
    EmptyPromptPack,
    #[error("unparseable teacher output: {0}")]
    Parse(#[from] ParseError),
    #[error("invalid teacher config: {0}")]
    Config(String),
    #[error("API key variable {0} is not set")]
    AuthMissing(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited")]
    RateLimited,
    #[error("retry budget exhausted for question {question_id} after {attempts} attempts")]
    BudgetExceeded { question_id: String, attempts: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn make_summary_label(record: &QuestionRecord) -> String {
    format!("Therefore, the answer is ({}).", record.gold)
}
