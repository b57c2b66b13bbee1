//! Self-reflection: preference pairs collected from the student's own chains
//! and iterative DPO training with an added NLL term.
//!
//! With `L(m, y)` the unnormalized log-likelihood of `y` given `x` under `m`:
//!
//! ```text
//! z    = beta * ((L(policy, yw) - L(ref, yw)) - (L(policy, yl) - L(ref, yl)))
//! loss = -log sigmoid(z) - alpha * L(policy, yw) / |yw|
//! ```
//!
//! where `|yw|` counts label tokens plus eos.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acquisition::StageIterator;
use crate::corpus::{extract_answer, normalize, QuestionRecord, Stage};
use crate::harness::{analyze_input, greedy_specifics, recall_input, summarize_input, TextModel};
use crate::student::{AdamW, AdamWConfig, EncodedPair, Gradients, Student, StudentError};

#[derive(Debug, thiserror::Error)]
pub enum ReflectionError {
    #[error("iteration {0} collected no usable preference pairs")]
    NoPairsCollected(usize),
    #[error("invalid reflection config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Student(#[from] StudentError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ReflectionError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReflectionConfig {
    pub iterations: usize,
    pub samples: usize,
    pub temperature: f64,
    pub beta: f64,
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Cap on pairs per question (recall) or per question and option (analyze).
    pub max_pairs: usize,
    pub seed: u64,
    pub max_new_tokens: usize,
    pub optimizer: AdamWConfig,
}

impl Default for ReflectionConfig {
    fn default() -> Self {
        Self {
            iterations: 5,
            samples: 10,
            temperature: 0.7,
            beta: 0.5,
            alpha: 0.5,
            epochs: 10,
            batch_size: 64,
            lr: 5e-6,
            max_pairs: 4,
            seed: 0,
            max_new_tokens: 64,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl ReflectionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ReflectionError::ConfigInvalid(m.into()));
        if !(self.beta > 0.0) {
            return bad("beta must be positive");
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha must be non-negative");
        }
        if self.samples < 2 {
            return bad("samples must be at least 2");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.max_pairs == 0 || self.max_new_tokens == 0 {
            return bad("batch_size, epochs, max_pairs and max_new_tokens must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        Ok(())
    }
}

/// Which stages receive DPO updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DpoToggles {
    pub recall: bool,
    pub analyze: bool,
}

impl DpoToggles {
    pub const BOTH: DpoToggles = DpoToggles {
        recall: true,
        analyze: true,
    };

    pub fn any(self) -> bool {
        self.recall || self.analyze
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferencePair {
    pub stage: Stage,
    pub question_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub option_label: Option<char>,
    pub input: String,
    pub preferred: String,
    pub dispreferred: String,
    pub iteration: usize,
    /// For analyze pairs, the summarize inputs built from the winning and
    /// losing analyze sets, so that the verdicts can be replayed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preferred_context: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dispreferred_context: Option<String>,
}

/// Per-question rng stream, independent of collection order.
fn stream(seed: u64, iteration: usize, question_id: &str, pass: u8, sample: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((iteration as u64).to_le_bytes());
    h.update(question_id.as_bytes());
    h.update([0, pass]);
    h.update((sample as u64).to_le_bytes());
    let digest = h.finalize();
    ChaCha8Rng::from_seed(digest.into())
}

fn judge<M: TextModel + ?Sized>(
    model: &M,
    record: &QuestionRecord,
    summarize: &str,
    max_new: usize,
) -> std::result::Result<bool, StudentError> {
    let summary = model.greedy(summarize, max_new)?;
    Ok(extract_answer(&summary, record) == Some(record.gold))
}

/// Greedy analyze and summarize downstream of a fixed recall.
pub fn judge_recall<M: TextModel + ?Sized>(
    model: &M,
    record: &QuestionRecord,
    recall: &str,
    max_new: usize,
) -> std::result::Result<bool, StudentError> {
    let specifics = greedy_specifics(model, record, Some(recall), max_new)?;
    judge(
        model,
        record,
        &summarize_input(record, Some(recall), Some(&specifics)),
        max_new,
    )
}

fn distinct(texts: Vec<String>) -> Vec<String> {
    let mut seen = HashSet::new();
    texts.into_iter().filter(|t| seen.insert(normalize(t))).collect()
}

#[derive(Debug, Clone, Default)]
pub struct RecallCollection {
    pub pairs: Vec<PreferencePair>,
    /// First recall (by sample index) whose chain was judged correct.
    pub preferred: BTreeMap<String, String>,
    pub skipped: usize,
}

/// Pass one: sample recalls, judge each by its greedy chain and pair winners
/// with losers.
pub fn collect_recall_pairs<M: TextModel + ?Sized>(
    model: &M,
    records: &[QuestionRecord],
    cfg: &ReflectionConfig,
    iteration: usize,
) -> RecallCollection {
    let mut out = RecallCollection::default();
    'questions: for record in records {
        let input = recall_input(record);
        let (mut winners, mut losers) = (Vec::new(), Vec::new());
        for s in 0..cfg.samples {
            let mut rng = stream(cfg.seed, iteration, &record.id, 1, s);
            let judged = model
                .sample(&input, cfg.temperature, cfg.max_new_tokens, &mut rng)
                .and_then(|recall| Ok((judge_recall(model, record, &recall, cfg.max_new_tokens)?, recall)));
            match judged {
                Ok((true, recall)) => winners.push(recall),
                Ok((false, recall)) => losers.push(recall),
                Err(e) => {
                    log::warn!("{}: recall collection skipped: {e}", record.id);
                    out.skipped += 1;
                    continue 'questions;
                }
            }
        }
        if let Some(first) = winners.first() {
            out.preferred.insert(record.id.clone(), first.clone());
        }
        out.pairs.extend(
            distinct(winners)
                .into_iter()
                .zip(distinct(losers))
                .filter(|(w, l)| normalize(w) != normalize(l))
                .take(cfg.max_pairs)
                .map(|(preferred, dispreferred)| PreferencePair {
                    stage: Stage::Recall,
                    question_id: record.id.clone(),
                    option_label: None,
                    input: input.clone(),
                    preferred,
                    dispreferred,
                    iteration,
                    preferred_context: None,
                    dispreferred_context: None,
                }),
        );
    }
    if out.skipped > 0 {
        log::warn!("recall collection skipped {} questions", out.skipped);
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct AnalyzeCollection {
    pub pairs: Vec<PreferencePair>,
    pub without_recall: usize,
    pub skipped: usize,
}

struct AnalyzeSet {
    texts: Vec<String>,
    summarize: String,
}

/// Pass two: with the preferred recall fixed, sample whole analyze sets,
/// judge each by a greedy summary, then pair option by option.
pub fn collect_analyze_pairs<M: TextModel + ?Sized>(
    model: &M,
    records: &[QuestionRecord],
    preferred: &BTreeMap<String, String>,
    cfg: &ReflectionConfig,
    iteration: usize,
) -> AnalyzeCollection {
    let mut out = AnalyzeCollection::default();
    'questions: for record in records {
        let Some(recall) = preferred.get(&record.id) else {
            out.without_recall += 1;
            continue;
        };
        let labels: Vec<char> = record.labels().collect();
        let inputs: Vec<String> = labels.iter().map(|&l| analyze_input(record, Some(recall), l)).collect();
        let (mut winners, mut losers) = (Vec::<AnalyzeSet>::new(), Vec::<AnalyzeSet>::new());
        let mut seen = HashSet::new();
        for s in 0..cfg.samples {
            let mut rng = stream(cfg.seed, iteration, &record.id, 2, s);
            let texts: std::result::Result<Vec<String>, _> = inputs
                .iter()
                .map(|x| model.sample(x, cfg.temperature, cfg.max_new_tokens, &mut rng))
                .collect();
            let judged = texts.and_then(|texts| {
                let specifics: Vec<(char, String)> = labels.iter().copied().zip(texts.iter().cloned()).collect();
                let summarize = summarize_input(record, Some(recall), Some(&specifics));
                Ok((
                    judge(model, record, &summarize, cfg.max_new_tokens)?,
                    AnalyzeSet { texts, summarize },
                ))
            });
            match judged {
                Ok((correct, set)) => {
                    let key: Vec<String> = set.texts.iter().map(|t| normalize(t)).collect();
                    if !seen.insert(key) {
                        continue;
                    }
                    if correct {
                        winners.push(set);
                    } else {
                        losers.push(set);
                    }
                }
                Err(e) => {
                    log::warn!("{}: analyze collection skipped: {e}", record.id);
                    out.skipped += 1;
                    continue 'questions;
                }
            }
        }
        for (j, &label) in labels.iter().enumerate() {
            out.pairs.extend(
                winners
                    .iter()
                    .zip(&losers)
                    .filter(|(w, l)| normalize(&w.texts[j]) != normalize(&l.texts[j]))
                    .take(cfg.max_pairs)
                    .map(|(w, l)| PreferencePair {
                        stage: Stage::Analyze,
                        question_id: record.id.clone(),
                        option_label: Some(label),
                        input: inputs[j].clone(),
                        preferred: w.texts[j].clone(),
                        dispreferred: l.texts[j].clone(),
                        iteration,
                        preferred_context: Some(w.summarize.clone()),
                        dispreferred_context: Some(l.summarize.clone()),
                    }),
            );
        }
    }
    if out.without_recall + out.skipped > 0 {
        log::warn!(
            "analyze collection skipped {} questions without a preferred recall and {} on decode errors",
            out.without_recall,
            out.skipped
        );
    }
    out
}

/// Drops pairs repeating an earlier `(input, preferred, dispreferred)`.
pub fn dedup_pairs(pairs: Vec<PreferencePair>) -> Vec<PreferencePair> {
    let mut seen = HashSet::new();
    pairs
        .into_iter()
        .filter(|p| seen.insert((p.input.clone(), p.preferred.clone(), p.dispreferred.clone())))
        .collect()
}

/// Re-runs the judging chain for both sides of a pair: the preferred side
/// must judge correct and the dispreferred side incorrect.
pub fn replay_pair<M: TextModel + ?Sized>(
    model: &M,
    record: &QuestionRecord,
    pair: &PreferencePair,
    max_new: usize,
) -> std::result::Result<bool, StudentError> {
    match pair.stage {
        Stage::Recall => Ok(judge_recall(model, record, &pair.preferred, max_new)?
            && !judge_recall(model, record, &pair.dispreferred, max_new)?),
        Stage::Analyze => {
            let (Some(label), Some(win), Some(lose)) =
                (pair.option_label, &pair.preferred_context, &pair.dispreferred_context)
            else {
                return Ok(false);
            };
            let embeds = |ctx: &str, text: &str| ctx.contains(&format!("For option {label}, {text}"));
            Ok(embeds(win, &pair.preferred)
                && embeds(lose, &pair.dispreferred)
                && judge(model, record, win, max_new)?
                && !judge(model, record, lose, max_new)?)
        }
        Stage::Summarize => Ok(false),
    }
}

fn neg_log_sigmoid(z: f64) -> f64 {
    (-z).max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// An encoded pair with its reference log-likelihoods.
#[derive(Debug, Clone)]
pub struct ScoredPair {
    pub preferred: EncodedPair,
    pub dispreferred: EncodedPair,
    pub ref_preferred: f64,
    pub ref_dispreferred: f64,
}

impl ScoredPair {
    pub fn new(
        policy: &Student,
        reference: &Student,
        pair: &PreferencePair,
    ) -> std::result::Result<Self, StudentError> {
        let preferred = policy.encode_pair(&pair.input, &pair.preferred)?;
        let dispreferred = policy.encode_pair(&pair.input, &pair.dispreferred)?;
        Ok(Self {
            ref_preferred: reference.pair_log_prob(&preferred),
            ref_dispreferred: reference.pair_log_prob(&dispreferred),
            preferred,
            dispreferred,
        })
    }

    /// Loss for this pair, with `scale * dloss/dθ` added into `grads`.
    pub fn loss_and_grad(&self, policy: &Student, beta: f64, alpha: f64, scale: f64, grads: &mut Gradients) -> f64 {
        let len_w = self.preferred.label_len() as f64;
        let (r_w, r_l) = (self.ref_preferred, self.ref_dispreferred);
        let mut loss = 0.0;
        policy.log_probs_with_grad(&[&self.preferred, &self.dispreferred], grads, |lp| {
            let z = beta * ((lp[0] - r_w) - (lp[1] - r_l));
            loss = neg_log_sigmoid(z) - alpha * lp[0] / len_w;
            let s = sigmoid(-z);
            vec![scale * (-beta * s - alpha / len_w), scale * beta * s]
        });
        loss
    }
}

/// Loss and policy gradient for one pair. The reference only supplies
/// log-likelihoods; no gradient flows into it.
pub fn dpo_nll_loss(
    policy: &Student,
    reference: &Student,
    pair: &PreferencePair,
    beta: f64,
    alpha: f64,
) -> std::result::Result<(f64, Gradients), StudentError> {
    let scored = ScoredPair::new(policy, reference, pair)?;
    let mut grads = Gradients::zeros_like(&policy.params);
    let loss = scored.loss_and_grad(policy, beta, alpha, 1.0, &mut grads);
    Ok((loss, grads))
}

#[derive(Debug, Clone)]
pub struct IterationState {
    pub t: usize,
    pub policy: Student,
    pub reference: Student,
}

impl IterationState {
    pub fn new(model: Student) -> Self {
        Self {
            t: 0,
            policy: model.clone(),
            reference: model,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    /// 1-based iteration number.
    pub iteration: usize,
    pub recall_pairs: usize,
    pub analyze_pairs: usize,
    pub recall_steps: usize,
    pub analyze_steps: usize,
    pub recall_loss: Option<f64>,
    pub analyze_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub aborted: bool,
}

#[derive(Debug, Clone)]
pub struct IterationOutcome {
    pub state: IterationState,
    pub recall_pairs: Vec<PreferencePair>,
    pub analyze_pairs: Vec<PreferencePair>,
    pub metrics: IterationMetrics,
}

fn train_stage_blocks(
    policy: &mut Student,
    data: [&[ScoredPair]; 2],
    cfg: &ReflectionConfig,
) -> std::result::Result<([usize; 2], [Option<f64>; 2]), StudentError> {
    let bs = cfg.batch_size;
    let block = data.iter().map(|d| d.len().div_ceil(bs)).max().unwrap_or(0);
    let mut iters = [
        StageIterator::new(data[0].len(), cfg.seed ^ 0x5EED_0001),
        StageIterator::new(data[1].len(), cfg.seed ^ 0x5EED_0002),
    ];
    let mut optimizer = AdamW::new(cfg.optimizer, &policy.params);
    let mut steps = [0usize; 2];
    let mut sums = [0.0f64; 2];
    for _ in 0..cfg.epochs {
        for k in 0..2 {
            if data[k].is_empty() {
                continue;
            }
            for _ in 0..block {
                let batch = iters[k].next_batch(bs.min(data[k].len()));
                let mut grads = Gradients::zeros_like(&policy.params);
                let scale = 1.0 / batch.len() as f64;
                let loss: f64 = batch
                    .iter()
                    .map(|&i| data[k][i].loss_and_grad(policy, cfg.beta, cfg.alpha, scale, &mut grads))
                    .sum::<f64>()
                    * scale;
                optimizer.step(&mut policy.params, &grads, cfg.lr)?;
                steps[k] += 1;
                sums[k] += loss;
            }
        }
    }
    let mean = |k: usize| (steps[k] > 0).then(|| sums[k] / steps[k] as f64);
    Ok((steps, [mean(0), mean(1)]))
}

/// Collects pairs with the frozen reference, trains a fresh copy of it on the
/// enabled stages, and returns the state for the next iteration.
pub fn run_reflection_iteration(
    state: &IterationState,
    records: &[QuestionRecord],
    cfg: &ReflectionConfig,
    toggles: DpoToggles,
) -> Result<IterationOutcome> {
    cfg.validate()?;
    let iteration = state.t + 1;
    let reference = &state.reference;
    let recall = collect_recall_pairs(reference, records, cfg, iteration);
    let analyze_pairs = if toggles.analyze {
        dedup_pairs(collect_analyze_pairs(reference, records, &recall.preferred, cfg, iteration).pairs)
    } else {
        Vec::new()
    };
    let recall_pairs = dedup_pairs(recall.pairs);
    let trainable = |on: bool, pairs: &[PreferencePair]| -> Result<Vec<ScoredPair>> {
        if !on {
            return Ok(Vec::new());
        }
        Ok(pairs
            .iter()
            .map(|p| ScoredPair::new(reference, reference, p))
            .collect::<std::result::Result<_, _>>()?)
    };
    let recall_data = trainable(toggles.recall, &recall_pairs)?;
    let analyze_data = trainable(toggles.analyze, &analyze_pairs)?;
    log::info!(
        "iteration {iteration}: {} recall pairs, {} analyze pairs",
        recall_pairs.len(),
        analyze_pairs.len()
    );
    if recall_data.is_empty() && analyze_data.is_empty() {
        return Err(ReflectionError::NoPairsCollected(iteration));
    }
    let mut policy = reference.clone();
    let (steps, losses) = train_stage_blocks(&mut policy, [&recall_data, &analyze_data], cfg)?;
    let metrics = IterationMetrics {
        iteration,
        recall_pairs: recall_pairs.len(),
        analyze_pairs: analyze_pairs.len(),
        recall_steps: steps[0],
        analyze_steps: steps[1],
        recall_loss: losses[0],
        analyze_loss: losses[1],
        val_accuracy: None,
        aborted: false,
    };
    Ok(IterationOutcome {
        state: IterationState {
            t: iteration,
            reference: policy.clone(),
            policy,
        },
        recall_pairs,
        analyze_pairs,
        metrics,
    })
}

#[derive(Debug, Clone)]
pub struct ReflectionOutcome {
    pub final_model: Student,
    /// Best model by validation accuracy; iteration 0 is the input model.
    pub best_model: Student,
    pub best_iteration: usize,
    pub metrics: Vec<IterationMetrics>,
    pub pairs: Vec<PreferencePair>,
}

/// Runs `cfg.iterations` reflection iterations. `validate(iteration, model)`
/// scores the input model (iteration 0) and every completed iteration.
/// Iterations without pairs are recorded as aborted and leave the model as is.
pub fn run_self_reflection<F>(
    model: Student,
    records: &[QuestionRecord],
    cfg: &ReflectionConfig,
    toggles: DpoToggles,
    mut validate: F,
) -> Result<ReflectionOutcome>
where
    F: FnMut(usize, &Student) -> f64,
{
    cfg.validate()?;
    let mut best_acc = validate(0, &model);
    let mut best = (0, model.clone());
    let mut state = IterationState::new(model);
    let mut metrics = Vec::with_capacity(cfg.iterations);
    let mut pairs = Vec::new();
    for _ in 0..cfg.iterations {
        match run_reflection_iteration(&state, records, cfg, toggles) {
            Ok(mut outcome) => {
                let acc = validate(outcome.state.t, &outcome.state.policy);
                outcome.metrics.val_accuracy = Some(acc);
                if acc > best_acc {
                    best_acc = acc;
                    best = (outcome.state.t, outcome.state.policy.clone());
                }
                metrics.push(outcome.metrics);
                pairs.extend(outcome.recall_pairs);
                pairs.extend(outcome.analyze_pairs);
                state = outcome.state;
            }
            Err(ReflectionError::NoPairsCollected(iteration)) => {
                log::warn!("iteration {iteration} aborted: no pairs");
                metrics.push(IterationMetrics {
                    iteration,
                    recall_pairs: 0,
                    analyze_pairs: 0,
                    recall_steps: 0,
                    analyze_steps: 0,
                    recall_loss: None,
                    analyze_loss: None,
                    val_accuracy: None,
                    aborted: true,
                });
                state.t = iteration;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(ReflectionOutcome {
        final_model: state.policy,
        best_model: best.1,
        best_iteration: best.0,
        metrics,
        pairs,
    })
}

pub fn write_pairs(dir: &Path, pairs: &[PreferencePair]) -> std::result::Result<(), crate::corpus::CorpusError> {
    let mut iterations: Vec<usize> = pairs.iter().map(|p| p.iteration).collect();
    iterations.sort_unstable();
    iterations.dedup();
    for t in iterations {
        for stage in [Stage::Recall, Stage::Analyze] {
            let subset: Vec<PreferencePair> = pairs
                .iter()
                .filter(|p| p.iteration == t && p.stage == stage)
                .cloned()
                .collect();
            crate::corpus::write_jsonl(&dir.join(format!("pairs_{stage}_iter{t}.jsonl")), &subset)?;
        }
    }
    Ok(())
}

pub fn write_reflection_metrics(path: &Path, metrics: &[IterationMetrics]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "iteration,stage,pairs,mean_loss,val_accuracy")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for m in metrics {
        for (stage, pairs, loss) in [
            (Stage::Recall, m.recall_pairs, m.recall_loss),
            (Stage::Analyze, m.analyze_pairs, m.analyze_loss),
        ] {
            writeln!(
                w,
                "{},{stage},{pairs},{},{}",
                m.iteration,
                opt(loss),
                opt(m.val_accuracy)
            )?;
        }
    }
    w.flush()
}
