//! Experiment orchestration: inference chains and evaluation, configs,
//! acquisition and reflection runs with manifests, and reports.

mod config;
mod experiment;
mod pipeline;
mod report;

pub use config::{ExperimentConfig, ExperimentSection, ModelSection, TeacherSection, TraceSourceKind, WorldConfig};
pub use experiment::{
    acquire, build_vocab, curate, load_questions, prepare_data, reflect, replay_manifest, run_experiment,
    run_experiment_jobs, run_id, write_manifest, Acquired, AcquisitionSummary, Phase, PhaseAccuracy, PreparedData,
    RunManifest, RunStatus, CODE_VERSION,
};
pub use pipeline::{
    analyze_input, build_variant_datasets, evaluate, greedy_specifics, recall_input, run_chain, summarize_input,
    ChainOutput, Evaluation, PipelineVariant, TextModel, Verdict,
};
pub use report::{
    collect_manifests, read_results_csv, report, result_rows, summarize, summary_markdown, write_results_csv,
    ReportFiles, ResultRow, SummaryCell,
};

use crate::acquisition::AcquisitionError;
use crate::corpus::CorpusError;
use crate::reflection::ReflectionError;
use crate::student::StudentError;
use crate::teacher::TeacherError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Teacher(#[from] TeacherError),
    #[error(transparent)]
    Student(#[from] StudentError),
    #[error(transparent)]
    Acquisition(#[from] AcquisitionError),
    #[error(transparent)]
    Reflection(#[from] ReflectionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// Whether the error stems from user input (configs, paths, credentials)
    /// rather than a failure inside a run.
    pub fn is_user_error(&self) -> bool {
        match self {
            HarnessError::Config(_) | HarnessError::Io(_) => true,
            HarnessError::Corpus(e) => !matches!(e, CorpusError::MissingKnowledge(_)),
            HarnessError::Teacher(e) => matches!(
                e,
                TeacherError::AuthMissing(_)
                    | TeacherError::Config(_)
                    | TeacherError::InfeasibleWorld(_)
                    | TeacherError::EmptyPromptPack
                    | TeacherError::Io(_)
            ),
            HarnessError::Student(e) => matches!(
                e,
                StudentError::Io(_)
                    | StudentError::VersionMismatch { .. }
                    | StudentError::CorruptChecksum
                    | StudentError::Config(_)
                    | StudentError::SequenceTooLong { .. }
            ),
            HarnessError::Acquisition(AcquisitionError::ConfigInvalid(_) | AcquisitionError::EmptyStage(_)) => true,
            HarnessError::Reflection(ReflectionError::ConfigInvalid(_)) => true,
            _ => false,
        }
    }
}
