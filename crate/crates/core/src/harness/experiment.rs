use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, TraceSourceKind};
use super::{build_variant_datasets, evaluate, HarnessError, PipelineVariant};
use crate::acquisition::{run_acquisition, write_metrics_csv, AcquisitionError, CyclePlan, ScheduleConfig};
use crate::corpus::{
    build_stage_datasets, format_question_header, read_jsonl, read_questions, write_jsonl, QuestionRecord,
    ReasoningTrace,
};
use crate::reflection::{run_self_reflection, write_pairs, write_reflection_metrics, DpoToggles, IterationMetrics};
use crate::student::{checkpoint, save_checkpoint, Student, Vocab};
use crate::teacher::{curate_remote, gen_microworld, split_by_hash, synth_trace, MicroWorld};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Questions, training traces and the shared vocabulary for one config.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub world: Option<MicroWorld>,
    pub train: Vec<QuestionRecord>,
    pub validation: Vec<QuestionRecord>,
    pub test: Vec<QuestionRecord>,
    pub traces: Vec<ReasoningTrace>,
    pub vocab: Vocab,
}

impl PreparedData {
    pub fn write(&self, dir: &Path) -> Result<(), HarnessError> {
        fs::create_dir_all(dir)?;
        write_jsonl(&dir.join("train.jsonl"), &self.train)?;
        write_jsonl(&dir.join("validation.jsonl"), &self.validation)?;
        write_jsonl(&dir.join("test.jsonl"), &self.test)?;
        write_jsonl(&dir.join("traces.jsonl"), &self.traces)?;
        if let Some(world) = &self.world {
            atomic_write(&dir.join("world.json"), serde_json::to_string_pretty(world)?.as_bytes())?;
        }
        Ok(())
    }
}

/// Generated or loaded questions, split by id hash, with curated traces for
/// the training split.
pub fn load_questions(cfg: &ExperimentConfig) -> Result<(Option<MicroWorld>, Vec<QuestionRecord>), HarnessError> {
    match &cfg.world.questions {
        Some(path) => Ok((None, read_questions(path)?)),
        None => {
            let w = &cfg.world;
            let (world, records) = gen_microworld(w.seed, w.n_questions, w.n_options, w.n_attributes)?;
            Ok((Some(world), records))
        }
    }
}

pub fn curate(
    cfg: &ExperimentConfig,
    world: Option<&MicroWorld>,
    train: &[QuestionRecord],
) -> Result<Vec<ReasoningTrace>, HarnessError> {
    if let Some(path) = &cfg.world.traces {
        return Ok(read_jsonl(path)?);
    }
    match cfg.teacher.source {
        TraceSourceKind::Oracle => {
            let world =
                world.ok_or_else(|| HarnessError::Config("the oracle teacher needs a generated world".into()))?;
            Ok(train.iter().map(|r| synth_trace(world, r)).collect::<Result<_, _>>()?)
        }
        TraceSourceKind::Remote => {
            let report = curate_remote(train, &cfg.teacher.remote)?;
            log::info!(
                "curated {} traces ({} malformed, {} duplicates)",
                report.traces.len(),
                report.malformed,
                report.duplicates
            );
            Ok(report.traces)
        }
    }
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData, HarnessError> {
    let (world, records) = load_questions(cfg)?;
    let splits = split_by_hash(&records);
    let traces = curate(cfg, world.as_ref(), &splits.train)?;
    let vocab = build_vocab(&splits.train, &traces, &records, cfg.model.vocab_cap)?;
    Ok(PreparedData {
        world,
        train: splits.train,
        validation: splits.validation,
        test: splits.test,
        traces,
        vocab,
    })
}

/// Vocabulary over the full-format training data plus every question header,
/// so held-out inputs encode without unknown words where possible.
pub fn build_vocab(
    train: &[QuestionRecord],
    traces: &[ReasoningTrace],
    all_records: &[QuestionRecord],
    cap: usize,
) -> Result<Vocab, HarnessError> {
    let full = build_stage_datasets(train, traces)?;
    let headers: Vec<String> = all_records.iter().map(format_question_header).collect();
    let texts = full
        .iter()
        .flat_map(|e| [e.input.as_str(), e.label.as_str()])
        .chain(headers.iter().map(String::as_str));
    Ok(Vocab::build(texts, cap).map_err(crate::student::StudentError::from)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Acquisition,
    Reflection,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Acquisition => "acquisition",
            Phase::Reflection => "reflection",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseAccuracy {
    pub phase: Phase,
    pub iteration: usize,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionSummary {
    pub plan: CyclePlan,
    pub best_epoch: usize,
    pub epoch_accuracy: Vec<f64>,
    pub final_losses: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub code_version: String,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub variant: PipelineVariant,
    pub toggles: DpoToggles,
    pub phases: Vec<PhaseAccuracy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acquisition: Option<AcquisitionSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reflection: Vec<IterationMetrics>,
    /// Artifact name to path, relative to the experiment output directory.
    pub artifacts: BTreeMap<String, String>,
    /// SHA-256 of each checkpoint artifact.
    pub checkpoint_digests: BTreeMap<String, String>,
    pub wall_clock_secs: BTreeMap<String, f64>,
}

impl RunManifest {
    /// Accuracy of the last completed phase on the test split.
    pub fn final_accuracy(&self) -> Option<f64> {
        self.phases.last().map(|p| p.test_accuracy)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

pub fn run_id(variant: PipelineVariant, toggles: DpoToggles, seed: u64) -> String {
    format!(
        "{variant}-r{}a{}-s{seed}",
        u8::from(toggles.recall),
        u8::from(toggles.analyze)
    )
}

fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}

pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<PathBuf, HarnessError> {
    let path = dir.join("manifest.json");
    fs::create_dir_all(dir)?;
    atomic_write(&path, serde_json::to_string_pretty(manifest)?.as_bytes())?;
    Ok(path)
}

fn digest(student: &Student) -> String {
    Sha256::digest(checkpoint::to_bytes(student))
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn rel(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).display().to_string()
}

/// An acquisition-trained model shared by the cells of one (seed, variant).
#[derive(Debug, Clone)]
pub struct Acquired {
    pub model: Student,
    pub manifest: RunManifest,
}

fn base_manifest(cfg: &ExperimentConfig, seed: u64, variant: PipelineVariant, toggles: DpoToggles) -> RunManifest {
    RunManifest {
        run_id: run_id(variant, toggles, seed),
        status: RunStatus::Complete,
        error: None,
        code_version: CODE_VERSION.into(),
        config: cfg.clone(),
        seed,
        variant,
        toggles,
        phases: Vec::new(),
        acquisition: None,
        reflection: Vec::new(),
        artifacts: BTreeMap::new(),
        checkpoint_digests: BTreeMap::new(),
        wall_clock_secs: BTreeMap::new(),
    }
}

const OFF: DpoToggles = DpoToggles {
    recall: false,
    analyze: false,
};

/// Runs acquisition for one (seed, variant) and writes its baseline manifest.
pub fn acquire(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    seed: u64,
    variant: PipelineVariant,
    root: &Path,
) -> Result<Acquired, HarnessError> {
    let mut manifest = base_manifest(cfg, seed, variant, OFF);
    let dir = root.join("runs").join(&manifest.run_id);
    fs::create_dir_all(&dir)?;
    let started = Instant::now();
    let max_new = cfg.model.max_new_tokens;

    let datasets = build_variant_datasets(&data.train, &data.traces, variant)?;
    datasets.write_dir(&dir)?;
    let student = Student::new(data.vocab.clone(), cfg.model.model_config(), seed)?;
    let schedule = ScheduleConfig {
        seed,
        ..cfg.schedule.clone()
    };
    let mut epoch_paths = Vec::new();
    let outcome = run_acquisition(student, &datasets, &schedule, |epoch, model| {
        let path = dir.join(format!("epoch_{epoch}.ckpt"));
        save_checkpoint(model, &path).map_err(AcquisitionError::Student)?;
        epoch_paths.push(path);
        Ok(evaluate(model, &data.validation, variant, max_new).accuracy)
    })?;
    write_metrics_csv(&dir.join("metrics.csv"), &outcome.log)?;
    let best_path = dir.join("best.ckpt");
    save_checkpoint(&outcome.best, &best_path)?;

    let test = evaluate(&outcome.best, &data.test, variant, max_new);
    write_jsonl(&dir.join("verdicts_test.jsonl"), &test.verdicts)?;
    manifest.phases.push(PhaseAccuracy {
        phase: Phase::Acquisition,
        iteration: 0,
        val_accuracy: outcome.epoch_accuracy[outcome.best_epoch],
        test_accuracy: test.accuracy,
    });
    manifest.acquisition = Some(AcquisitionSummary {
        plan: outcome.plan,
        best_epoch: outcome.best_epoch,
        epoch_accuracy: outcome.epoch_accuracy.clone(),
        final_losses: outcome
            .final_losses()
            .into_iter()
            .map(|(s, l)| (s.to_string(), l))
            .collect(),
    });
    for (i, p) in epoch_paths.iter().enumerate() {
        manifest.artifacts.insert(format!("epoch_{i}"), rel(root, p));
    }
    manifest.artifacts.insert("best".into(), rel(root, &best_path));
    manifest
        .artifacts
        .insert("metrics".into(), rel(root, &dir.join("metrics.csv")));
    manifest
        .artifacts
        .insert("verdicts".into(), rel(root, &dir.join("verdicts_test.jsonl")));
    manifest.checkpoint_digests.insert("best".into(), digest(&outcome.best));
    manifest
        .wall_clock_secs
        .insert("acquisition".into(), started.elapsed().as_secs_f64());
    write_manifest(&dir, &manifest)?;
    Ok(Acquired {
        model: outcome.best,
        manifest,
    })
}

/// Runs self-reflection from a shared acquisition checkpoint.
pub fn reflect(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    acquired: &Acquired,
    toggles: DpoToggles,
    root: &Path,
) -> Result<RunManifest, HarnessError> {
    let seed = acquired.manifest.seed;
    let variant = acquired.manifest.variant;
    let mut manifest = base_manifest(cfg, seed, variant, toggles);
    let dir = root.join("runs").join(&manifest.run_id);
    fs::create_dir_all(&dir)?;
    let started = Instant::now();
    let max_new = cfg.model.max_new_tokens;
    manifest
        .artifacts
        .insert("acquisition".into(), acquired.manifest.artifacts["best"].clone());

    let rcfg = crate::reflection::ReflectionConfig {
        seed,
        ..cfg.reflection.clone()
    };
    let mut phases = Vec::new();
    let outcome = run_self_reflection(acquired.model.clone(), &data.train, &rcfg, toggles, |t, model| {
        let val = evaluate(model, &data.validation, variant, max_new).accuracy;
        if t > 0 {
            let test = evaluate(model, &data.test, variant, max_new).accuracy;
            phases.push(PhaseAccuracy {
                phase: Phase::Reflection,
                iteration: t,
                val_accuracy: val,
                test_accuracy: test,
            });
        }
        val
    })?;
    // an aborted iteration leaves the model, and so its accuracy, unchanged
    let mut previous = acquired.manifest.phases[0].clone();
    for m in &outcome.metrics {
        let current = phases
            .iter()
            .find(|p| p.iteration == m.iteration)
            .cloned()
            .unwrap_or(PhaseAccuracy {
                phase: Phase::Reflection,
                iteration: m.iteration,
                ..previous
            });
        manifest.phases.push(current.clone());
        previous = current;
    }
    write_pairs(&dir, &outcome.pairs)?;
    write_reflection_metrics(&dir.join("reflection_metrics.csv"), &outcome.metrics)?;
    let final_path = dir.join("final.ckpt");
    let best_path = dir.join("best.ckpt");
    save_checkpoint(&outcome.final_model, &final_path)?;
    save_checkpoint(&outcome.best_model, &best_path)?;
    manifest.artifacts.insert("final".into(), rel(root, &final_path));
    manifest.artifacts.insert("best".into(), rel(root, &best_path));
    manifest.artifacts.insert(
        "reflection_metrics".into(),
        rel(root, &dir.join("reflection_metrics.csv")),
    );
    manifest
        .checkpoint_digests
        .insert("final".into(), digest(&outcome.final_model));
    manifest
        .checkpoint_digests
        .insert("best".into(), digest(&outcome.best_model));
    manifest.reflection = outcome.metrics;
    manifest
        .wall_clock_secs
        .insert("reflection".into(), started.elapsed().as_secs_f64());
    write_manifest(&dir, &manifest)?;
    Ok(manifest)
}

fn failed(
    cfg: &ExperimentConfig,
    seed: u64,
    variant: PipelineVariant,
    toggles: DpoToggles,
    err: &HarnessError,
    root: &Path,
) -> RunManifest {
    log::error!("{}: {err}", run_id(variant, toggles, seed));
    let mut m = base_manifest(cfg, seed, variant, toggles);
    m.status = RunStatus::Failed;
    m.error = Some(err.to_string());
    let _ = write_manifest(&root.join("runs").join(&m.run_id), &m);
    m
}

/// Runs every configured cell on one thread. See [`run_experiment_jobs`].
pub fn run_experiment(cfg: &ExperimentConfig, root: &Path) -> Result<Vec<RunManifest>, HarnessError> {
    run_experiment_jobs(cfg, root, 1)
}

/// Applies `f` to every item on up to `jobs` threads; results keep item order.
fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, items.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let out = f(item);
                slots.lock().expect("result slot lock")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slot lock")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

/// Runs every configured cell. The acquisition model of each (seed, variant)
/// is trained once and shared by all DPO toggle rows. Failed cells yield
/// manifests marked failed; other cells still run. Acquisition cells, then
/// reflection cells, run on up to `jobs` threads; each cell is
/// single-threaded and seeded on its own, so results do not depend on `jobs`.
pub fn run_experiment_jobs(cfg: &ExperimentConfig, root: &Path, jobs: usize) -> Result<Vec<RunManifest>, HarnessError> {
    cfg.validate()?;
    fs::create_dir_all(root)?;
    let data = prepare_data(cfg)?;
    data.write(&root.join("data"))?;
    atomic_write(&root.join("config.toml"), cfg.to_toml().as_bytes())?;
    let units: Vec<(u64, PipelineVariant)> = cfg
        .experiment
        .seeds
        .iter()
        .flat_map(|&s| cfg.experiment.variants.iter().map(move |&v| (s, v)))
        .collect();
    let acquired = parallel_map(&units, jobs, |&(seed, variant)| {
        log::info!("seed {seed}: acquisition for {variant}");
        let out = acquire(cfg, &data, seed, variant, root);
        if let Ok(a) = &out {
            log::info!(
                "seed {seed}: {variant} acquisition accuracy {:.3}",
                a.manifest.final_accuracy().unwrap_or(0.0)
            );
        }
        out
    });
    let mut cells = Vec::new();
    if cfg.experiment.reflect {
        for (u, a) in acquired.iter().enumerate() {
            if let (PipelineVariant::Full, Ok(a)) = (units[u].1, a) {
                cells.extend(cfg.experiment.dpo_rows().into_iter().map(|t| (u, a, t)));
            }
        }
    }
    let reflected = parallel_map(&cells, jobs, |&(_, a, toggles)| {
        log::info!("seed {}: reflection with {toggles:?}", a.manifest.seed);
        let out = reflect(cfg, &data, a, toggles, root);
        if let Ok(m) = &out {
            log::info!("{}: accuracy {:.3}", m.run_id, m.final_accuracy().unwrap_or(0.0));
        }
        out
    });
    let mut out = Vec::new();
    for (u, (&(seed, variant), a)) in units.iter().zip(&acquired).enumerate() {
        match a {
            Ok(a) => out.push(a.manifest.clone()),
            Err(e) => out.push(failed(cfg, seed, variant, OFF, e, root)),
        }
        for (&(cu, _, toggles), r) in cells.iter().zip(&reflected) {
            if cu != u {
                continue;
            }
            match r {
                Ok(m) => out.push(m.clone()),
                Err(e) => out.push(failed(cfg, seed, variant, toggles, e, root)),
            }
        }
    }
    Ok(out)
}

/// Re-runs the cell a manifest describes from its own config snapshot.
pub fn replay_manifest(manifest: &RunManifest, root: &Path) -> Result<RunManifest, HarnessError> {
    let cfg = &manifest.config;
    let data = prepare_data(cfg)?;
    let acquired = acquire(cfg, &data, manifest.seed, manifest.variant, root)?;
    if manifest.toggles.any() {
        reflect(cfg, &data, &acquired, manifest.toggles, root)
    } else {
        Ok(acquired.manifest)
    }
}
