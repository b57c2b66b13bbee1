//! Supervised reasoning acquisition: per-stage NLL training under an
//! interleaved recall, analyze, summarize cycle.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Stage, StageDatasets};
use crate::student::{AdamW, AdamWConfig, EncodedPair, Student, StudentError};

#[derive(Debug, thiserror::Error)]
pub enum AcquisitionError {
    #[error("stage {0} has no examples")]
    EmptyStage(Stage),
    #[error("invalid schedule: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Student(#[from] StudentError),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AcquisitionError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Base number of steps per stage in one cycle.
    pub interval: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            interval: 100,
            epochs: 10,
            batch_size: 64,
            lr: 5e-4,
            seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(AcquisitionError::ConfigInvalid(
                "interval, epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(AcquisitionError::ConfigInvalid(format!("lr = {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CyclePlan {
    pub recall: usize,
    pub analyze: usize,
    pub summarize: usize,
    pub cycles_per_epoch: usize,
}

impl CyclePlan {
    pub fn steps(&self, stage: Stage) -> usize {
        match stage {
            Stage::Recall => self.recall,
            Stage::Analyze => self.analyze,
            Stage::Summarize => self.summarize,
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.cycles_per_epoch * (self.recall + self.analyze + self.summarize)
    }
}

fn proportional(interval: usize, count: usize, base: usize) -> usize {
    ((interval as f64 * count as f64 / base as f64).round() as usize).max(interval)
}

/// Plan for three non-empty stages of the given sizes.
pub fn plan_cycle_counts(recall: usize, analyze: usize, summarize: usize, cfg: &ScheduleConfig) -> Result<CyclePlan> {
    for (stage, n) in Stage::ALL.into_iter().zip([recall, analyze, summarize]) {
        if n == 0 {
            return Err(AcquisitionError::EmptyStage(stage));
        }
    }
    plan_partial(recall, analyze, summarize, cfg)
}

pub fn plan_cycle(datasets: &StageDatasets, cfg: &ScheduleConfig) -> Result<CyclePlan> {
    let (r, a, s) = datasets.counts();
    plan_cycle_counts(r, a, s, cfg)
}

/// Like [`plan_cycle_counts`], but absent recall or analyze stages get zero
/// steps. Analyze is scaled against summarize when recall is absent.
pub fn plan_partial(recall: usize, analyze: usize, summarize: usize, cfg: &ScheduleConfig) -> Result<CyclePlan> {
    cfg.validate()?;
    if summarize == 0 {
        return Err(AcquisitionError::EmptyStage(Stage::Summarize));
    }
    let interval = cfg.interval;
    let base = if recall > 0 { recall } else { summarize };
    Ok(CyclePlan {
        recall: if recall > 0 { interval } else { 0 },
        analyze: if analyze > 0 {
            proportional(interval, analyze, base)
        } else {
            0
        },
        summarize: interval,
        cycles_per_epoch: summarize.div_ceil(interval * cfg.batch_size),
    })
}

/// Endless shuffled index stream over one dataset. Each pass is a fresh
/// seeded permutation; the position persists across calls.
#[derive(Debug, Clone)]
pub struct StageIterator {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl StageIterator {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut it = Self {
            order: (0..len).collect(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        it.order.shuffle(&mut it.rng);
        it
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        if self.order.is_empty() {
            return out;
        }
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub cycle: usize,
    pub stage: Stage,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct AcquisitionOutcome {
    /// The model from the epoch with the best validation accuracy.
    pub best: Student,
    pub best_epoch: usize,
    pub final_model: Student,
    pub plan: CyclePlan,
    pub log: Vec<StepRecord>,
    pub epoch_accuracy: Vec<f64>,
}

impl AcquisitionOutcome {
    /// Mean loss per stage over the last epoch.
    pub fn final_losses(&self) -> Vec<(Stage, f64)> {
        let last = self.epoch_accuracy.len().saturating_sub(1);
        Stage::ALL
            .into_iter()
            .filter_map(|stage| {
                let losses: Vec<f64> = self
                    .log
                    .iter()
                    .filter(|r| r.epoch == last && r.stage == stage)
                    .map(|r| r.loss)
                    .collect();
                (!losses.is_empty()).then(|| (stage, losses.iter().sum::<f64>() / losses.len() as f64))
            })
            .collect()
    }
}

fn encode_stage(student: &Student, datasets: &StageDatasets, stage: Stage) -> Result<Vec<EncodedPair>> {
    datasets
        .get(stage)
        .iter()
        .map(|e| Ok(student.encode_pair(&e.input, &e.label)?))
        .collect()
}

/// Trains `student` on the stage datasets. `validate(epoch, model)` is called
/// at the end of every epoch and returns the accuracy used for model
/// selection; later epochs win ties.
pub fn run_acquisition<F>(
    mut student: Student,
    datasets: &StageDatasets,
    cfg: &ScheduleConfig,
    mut validate: F,
) -> Result<AcquisitionOutcome>
where
    F: FnMut(usize, &Student) -> Result<f64>,
{
    let (r, a, s) = datasets.counts();
    let plan = plan_partial(r, a, s, cfg)?;
    let encoded = Stage::ALL
        .into_iter()
        .map(|stage| encode_stage(&student, datasets, stage))
        .collect::<Result<Vec<_>>>()?;
    let mut iters: Vec<StageIterator> = encoded
        .iter()
        .zip([1u64, 2, 3])
        .map(|(data, salt)| StageIterator::new(data.len(), cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(salt)))
        .collect();
    let mut optimizer = AdamW::new(cfg.optimizer, &student.params);
    let mut log = Vec::with_capacity(cfg.epochs * plan.steps_per_epoch());
    let mut epoch_accuracy = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Student)> = None;

    for epoch in 0..cfg.epochs {
        for cycle in 0..plan.cycles_per_epoch {
            for (k, stage) in Stage::ALL.into_iter().enumerate() {
                for step in 0..plan.steps(stage) {
                    let batch: Vec<EncodedPair> = iters[k]
                        .next_batch(cfg.batch_size)
                        .into_iter()
                        .map(|i| encoded[k][i].clone())
                        .collect();
                    let (loss, grads) = student.nll_loss_and_grad_encoded(&batch)?;
                    optimizer.step(&mut student.params, &grads, cfg.lr)?;
                    log.push(StepRecord {
                        epoch,
                        cycle,
                        stage,
                        step,
                        loss,
                    });
                }
            }
        }
        let acc = validate(epoch, &student)?;
        log::info!("epoch {epoch}: validation accuracy {acc:.4}");
        epoch_accuracy.push(acc);
        if best.as_ref().is_none_or(|(_, b, _)| acc >= *b) {
            best = Some((epoch, acc, student.clone()));
        }
    }
    let (best_epoch, _, best) = best.expect("at least one epoch");
    Ok(AcquisitionOutcome {
        best,
        best_epoch,
        final_model: student,
        plan,
        log,
        epoch_accuracy,
    })
}

pub fn write_metrics_csv(path: &Path, log: &[StepRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "epoch,cycle,stage,step,loss")?;
    for r in log {
        writeln!(w, "{},{},{},{},{}", r.epoch, r.cycle, r.stage, r.step, r.loss)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_six_ratio() {
        let cfg = ScheduleConfig::default();
        let plan = plan_cycle_counts(66_739, 334_331, 66_869, &cfg).unwrap();
        assert_eq!((plan.recall, plan.analyze, plan.summarize), (100, 501, 100));
    }

    #[test]
    fn equal_sizes_and_cycle_count() {
        let cfg = ScheduleConfig::default();
        let plan = plan_cycle_counts(6400, 6400, 6400, &cfg).unwrap();
        assert_eq!(
            plan,
            CyclePlan {
                recall: 100,
                analyze: 100,
                summarize: 100,
                cycles_per_epoch: 1
            }
        );
        assert_eq!(plan_cycle_counts(10, 10, 6401, &cfg).unwrap().cycles_per_epoch, 2);
        assert!(matches!(
            plan_cycle_counts(10, 0, 10, &cfg),
            Err(AcquisitionError::EmptyStage(Stage::Analyze))
        ));
    }

    #[test]
    fn partial_plans() {
        let cfg = ScheduleConfig {
            interval: 20,
            ..Default::default()
        };
        assert_eq!(plan_partial(0, 0, 400, &cfg).unwrap().steps_per_epoch(), 20);
        let p = plan_partial(0, 1600, 400, &cfg).unwrap();
        assert_eq!((p.recall, p.analyze, p.summarize), (0, 80, 20));
    }

    #[test]
    fn iterator_fairness_within_a_pass() {
        let mut it = StageIterator::new(10, 3);
        let mut seen = [0usize; 10];
        for i in it.next_batch(25) {
            seen[i] += 1;
        }
        // 2.5 passes: every index twice or three times
        assert!(seen.iter().all(|&c| c == 2 || c == 3));
    }
}
