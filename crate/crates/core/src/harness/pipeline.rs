use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_stage_datasets, extract_answer, ordered_specifics, render_input, Cue, QuestionRecord, ReasoningTrace,
    Result as CorpusResult, Stage, StageDatasets, StageExample,
};
use crate::student::{DecodeConfig, Student, StudentError};

/// Which knowledge sections a model is trained with and chains through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineVariant {
    SummarizeOnly,
    RecallSummarize,
    AnalyzeSummarize,
    Full,
}

impl PipelineVariant {
    pub const ALL: [PipelineVariant; 4] = [
        PipelineVariant::SummarizeOnly,
        PipelineVariant::RecallSummarize,
        PipelineVariant::AnalyzeSummarize,
        PipelineVariant::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PipelineVariant::SummarizeOnly => "summarize_only",
            PipelineVariant::RecallSummarize => "recall_summarize",
            PipelineVariant::AnalyzeSummarize => "analyze_summarize",
            PipelineVariant::Full => "full",
        }
    }

    pub fn uses_recall(self) -> bool {
        matches!(self, PipelineVariant::RecallSummarize | PipelineVariant::Full)
    }

    pub fn uses_analyze(self) -> bool {
        matches!(self, PipelineVariant::AnalyzeSummarize | PipelineVariant::Full)
    }
}

impl fmt::Display for PipelineVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PipelineVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PipelineVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

/// Text-to-text generation as used by the inference chains. Implemented by
/// [`Student`]; tests substitute scripted models.
pub trait TextModel {
    fn greedy(&self, input: &str, max_new_tokens: usize) -> Result<String, StudentError>;

    fn sample(
        &self,
        input: &str,
        temperature: f64,
        max_new_tokens: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<String, StudentError>;
}

impl TextModel for Student {
    fn greedy(&self, input: &str, max_new_tokens: usize) -> Result<String, StudentError> {
        self.decode(input, &DecodeConfig::greedy(max_new_tokens))
    }

    fn sample(
        &self,
        input: &str,
        temperature: f64,
        max_new_tokens: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<String, StudentError> {
        self.decode_with_rng(input, &DecodeConfig::sample(temperature, max_new_tokens, 0), rng)
    }
}

pub fn recall_input(record: &QuestionRecord) -> String {
    render_input(record, None, None, Cue::Recall)
}

pub fn analyze_input(record: &QuestionRecord, general: Option<&str>, label: char) -> String {
    render_input(record, general, None, Cue::Analyze(label))
}

pub fn summarize_input(record: &QuestionRecord, general: Option<&str>, specifics: Option<&[(char, String)]>) -> String {
    let borrowed: Option<Vec<(char, &str)>> = specifics.map(|s| s.iter().map(|(l, t)| (*l, t.as_str())).collect());
    render_input(record, general, borrowed.as_deref(), Cue::Summarize)
}

/// Outputs of one greedy pass through a variant's chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainOutput {
    pub recall: Option<String>,
    pub specifics: Option<Vec<(char, String)>>,
    pub summary: String,
    pub predicted: Option<char>,
}

/// Greedy analyze outputs for every option, given a fixed recall section.
pub fn greedy_specifics<M: TextModel + ?Sized>(
    model: &M,
    record: &QuestionRecord,
    general: Option<&str>,
    max_new_tokens: usize,
) -> Result<Vec<(char, String)>, StudentError> {
    record
        .labels()
        .map(|l| Ok((l, model.greedy(&analyze_input(record, general, l), max_new_tokens)?)))
        .collect()
}

pub fn run_chain<M: TextModel + ?Sized>(
    model: &M,
    record: &QuestionRecord,
    variant: PipelineVariant,
    max_new_tokens: usize,
) -> Result<ChainOutput, StudentError> {
    let recall = if variant.uses_recall() {
        Some(model.greedy(&recall_input(record), max_new_tokens)?)
    } else {
        None
    };
    let specifics = if variant.uses_analyze() {
        Some(greedy_specifics(model, record, recall.as_deref(), max_new_tokens)?)
    } else {
        None
    };
    let summary = model.greedy(
        &summarize_input(record, recall.as_deref(), specifics.as_deref()),
        max_new_tokens,
    )?;
    let predicted = extract_answer(&summary, record);
    Ok(ChainOutput {
        recall,
        specifics,
        summary,
        predicted,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub question_id: String,
    pub gold: char,
    pub predicted: Option<char>,
    pub correct: bool,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub variant: PipelineVariant,
    pub accuracy: f64,
    pub verdicts: Vec<Verdict>,
    /// Questions whose chain failed to decode; counted as incorrect.
    pub decode_errors: usize,
}

/// Greedy-chain accuracy over `records`. Undecodable chains and summaries
/// without an answer count as incorrect.
pub fn evaluate<M: TextModel + ?Sized>(
    model: &M,
    records: &[QuestionRecord],
    variant: PipelineVariant,
    max_new_tokens: usize,
) -> Evaluation {
    let mut verdicts = Vec::with_capacity(records.len());
    let mut decode_errors = 0;
    for record in records {
        let (predicted, summary) = match run_chain(model, record, variant, max_new_tokens) {
            Ok(out) => (out.predicted, out.summary),
            Err(e) => {
                log::warn!("{}: {e}", record.id);
                decode_errors += 1;
                (None, String::new())
            }
        };
        verdicts.push(Verdict {
            question_id: record.id.clone(),
            gold: record.gold,
            predicted,
            correct: predicted == Some(record.gold),
            summary,
        });
    }
    let correct = verdicts.iter().filter(|v| v.correct).count();
    Evaluation {
        variant,
        accuracy: if records.is_empty() {
            0.0
        } else {
            correct as f64 / records.len() as f64
        },
        verdicts,
        decode_errors,
    }
}

/// Stage datasets laid out for `variant`: sections the variant does not use
/// are omitted from every input, and stages it does not use are empty.
pub fn build_variant_datasets(
    records: &[QuestionRecord],
    traces: &[ReasoningTrace],
    variant: PipelineVariant,
) -> CorpusResult<StageDatasets> {
    let full = build_stage_datasets(records, traces)?;
    if variant == PipelineVariant::Full {
        return Ok(full);
    }
    let by_id: std::collections::HashMap<&str, &QuestionRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut out = StageDatasets::default();
    if variant.uses_recall() {
        out.recall = full.recall;
    }
    for trace in traces {
        let record = by_id[trace.question_id.as_str()];
        let general = variant.uses_recall().then_some(trace.general.as_str());
        let ordered = ordered_specifics(record, &trace.specifics)?;
        if variant.uses_analyze() {
            for (label, text) in &ordered {
                out.analyze.push(StageExample {
                    stage: Stage::Analyze,
                    question_id: record.id.clone(),
                    option_label: Some(*label),
                    input: render_input(record, general, None, Cue::Analyze(*label)),
                    label: text.to_string(),
                });
            }
        }
        let specifics = variant.uses_analyze().then_some(ordered.as_slice());
        out.summarize.push(StageExample {
            stage: Stage::Summarize,
            question_id: record.id.clone(),
            option_label: None,
            input: render_input(record, general, specifics, Cue::Summarize),
            label: trace.summary.clone(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::format_question_header;
    use crate::teacher::{gen_microworld, make_summary_label, synth_trace};

    /// Answers every summarize prompt with the gold verdict.
    struct Oracle<'a>(&'a [QuestionRecord]);

    impl TextModel for Oracle<'_> {
        fn greedy(&self, input: &str, _: usize) -> Result<String, StudentError> {
            if !input.ends_with("Summarize:") {
                return Ok("something".into());
            }
            let r = self
                .0
                .iter()
                .find(|r| input.starts_with(&format_question_header(r)))
                .expect("known record");
            Ok(make_summary_label(r))
        }

        fn sample(&self, input: &str, _: f64, n: usize, _: &mut ChaCha8Rng) -> Result<String, StudentError> {
            self.greedy(input, n)
        }
    }

    struct Mute;

    impl TextModel for Mute {
        fn greedy(&self, _: &str, _: usize) -> Result<String, StudentError> {
            Ok("no verdict".into())
        }

        fn sample(&self, _: &str, _: f64, _: usize, _: &mut ChaCha8Rng) -> Result<String, StudentError> {
            Ok("no verdict".into())
        }
    }

    fn data() -> (Vec<QuestionRecord>, Vec<ReasoningTrace>) {
        let (world, records) = gen_microworld(5, 30, 4, 8).unwrap();
        let traces = records.iter().map(|r| synth_trace(&world, r).unwrap()).collect();
        (records, traces)
    }

    #[test]
    fn oracle_and_mute_models() {
        let (records, _) = data();
        for v in PipelineVariant::ALL {
            let e = evaluate(&Oracle(&records), &records, v, 16);
            assert_eq!(e.accuracy, 1.0);
            assert_eq!(evaluate(&Mute, &records, v, 16).accuracy, 0.0);
        }
    }

    #[test]
    fn accuracy_matches_verdict_recount() {
        let (records, _) = data();
        // correct only on even-indexed records
        struct Half<'a>(&'a [QuestionRecord]);
        impl TextModel for Half<'_> {
            fn greedy(&self, input: &str, n: usize) -> Result<String, StudentError> {
                let i = self
                    .0
                    .iter()
                    .position(|r| input.starts_with(&format_question_header(r)))
                    .unwrap();
                if i % 2 == 0 {
                    Oracle(self.0).greedy(input, n)
                } else {
                    Ok("the answer is (Z)".into())
                }
            }
            fn sample(&self, input: &str, _: f64, n: usize, _: &mut ChaCha8Rng) -> Result<String, StudentError> {
                self.greedy(input, n)
            }
        }
        let e = evaluate(&Half(&records), &records, PipelineVariant::Full, 16);
        let recount = e.verdicts.iter().filter(|v| v.predicted == Some(v.gold)).count();
        assert_eq!(e.accuracy, recount as f64 / records.len() as f64);
        assert_eq!(recount, 15);
    }

    #[test]
    fn variant_layouts() {
        let (records, traces) = data();
        let full = build_stage_datasets(&records, &traces).unwrap();
        assert_eq!(
            build_variant_datasets(&records, &traces, PipelineVariant::Full).unwrap(),
            full
        );

        let so = build_variant_datasets(&records, &traces, PipelineVariant::SummarizeOnly).unwrap();
        assert_eq!(so.counts(), (0, 0, 30));
        for (ex, r) in so.summarize.iter().zip(&records) {
            assert_eq!(ex.input, format!("{}\n Summarize:", format_question_header(r)));
        }

        let rs = build_variant_datasets(&records, &traces, PipelineVariant::RecallSummarize).unwrap();
        assert_eq!(rs.counts(), (30, 0, 30));
        assert!(rs
            .summarize
            .iter()
            .all(|e| e.input.contains("\n Recall: ") && !e.input.contains("Analyze")));

        let az = build_variant_datasets(&records, &traces, PipelineVariant::AnalyzeSummarize).unwrap();
        assert_eq!(az.counts(), (0, 120, 30));
        assert!(az.iter().all(|e| !e.input.contains("Recall")));
    }
}
