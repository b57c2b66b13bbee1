//! Command-line driver for stagewise experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use stagewise::corpus::write_jsonl;
use stagewise::harness::{
    acquire, build_variant_datasets, collect_manifests, curate, evaluate, load_questions, prepare_data, reflect,
    report, run_experiment_jobs, Acquired, ExperimentConfig, HarnessError, PipelineVariant, RunManifest,
    TraceSourceKind,
};
use stagewise::reflection::DpoToggles;
use stagewise::student::load_checkpoint;
use stagewise::teacher::{curate_remote, split_by_hash};

#[derive(Parser, Debug)]
#[command(name = "stagewise", version, about = "Stage-wise reasoning distillation experiments")]
struct Cli {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; replaces the configured seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Source {
    Oracle,
    Remote,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Validation,
    Test,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the micro-world and its question splits.
    World,
    /// Curate reasoning traces for the training split.
    Curate {
        #[arg(value_enum)]
        source: Source,
    },
    /// Write the stage datasets of one pipeline variant.
    Build {
        #[arg(long, default_value = "full")]
        variant: PipelineVariant,
    },
    /// Run reasoning acquisition for one variant.
    Train {
        #[arg(long, default_value = "full")]
        variant: PipelineVariant,
    },
    /// Run self-reflection from the full variant's acquisition checkpoint.
    Reflect {
        #[arg(long)]
        recall_dpo: bool,
        #[arg(long)]
        analyze_dpo: bool,
        /// Acquisition manifest; defaults to the one `train` writes for the seed.
        #[arg(long)]
        acquisition: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a held-out split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "full")]
        variant: PipelineVariant,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Run the full variant grid and DPO toggle grid, then report.
    Ablate {
        /// Worker threads for independent (seed, variant) cells.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Summarize every manifest below a directory.
    Report {
        /// Directory holding run manifests; defaults to --out.
        #[arg(long)]
        runs: Option<PathBuf>,
    },
}

/// Failure caused by the invocation rather than by a run.
#[derive(Debug)]
struct UserError(String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

fn user(msg: impl Into<String>) -> anyhow::Error {
    UserError(msg.into()).into()
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.experiment.seeds = vec![seed];
    }
    Ok(cfg)
}

fn first_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.experiment.seeds[0]
}

fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

/// Uses traces from an earlier `curate` run when no trace file is configured.
fn reuse_traces(cfg: &mut ExperimentConfig, out: &Path) {
    let curated = data_dir(out).join("traces.jsonl");
    if cfg.world.traces.is_none() && curated.exists() {
        info!("using curated traces from {}", curated.display());
        cfg.world.traces = Some(curated);
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = load_config(cli)?;
    let out = &cli.out;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match &cli.command {
        Command::World => {
            let (world, records) = load_questions(&cfg)?;
            if world.is_none() {
                bail!(user(
                    "world: the config names a question file instead of a generated world"
                ));
            }
            let splits = split_by_hash(&records);
            let dir = data_dir(out);
            std::fs::create_dir_all(&dir)?;
            write_jsonl(&dir.join("train.jsonl"), &splits.train)?;
            write_jsonl(&dir.join("validation.jsonl"), &splits.validation)?;
            write_jsonl(&dir.join("test.jsonl"), &splits.test)?;
            std::fs::write(dir.join("world.json"), serde_json::to_string_pretty(&world)?)?;
            info!(
                "{} questions ({} train, {} validation, {} test) in {}",
                records.len(),
                splits.train.len(),
                splits.validation.len(),
                splits.test.len(),
                dir.display()
            );
        }
        Command::Curate { source } => {
            let (world, records) = load_questions(&cfg)?;
            let train = split_by_hash(&records).train;
            let dir = data_dir(out);
            std::fs::create_dir_all(&dir)?;
            cfg.world.traces = None;
            let traces = match source {
                Source::Oracle => {
                    cfg.teacher.source = TraceSourceKind::Oracle;
                    curate(&cfg, world.as_ref(), &train)?
                }
                Source::Remote => {
                    info!(
                        "requesting {} questions from {}",
                        train.len(),
                        cfg.teacher.remote.endpoint
                    );
                    let report = curate_remote(&train, &cfg.teacher.remote).map_err(HarnessError::from)?;
                    write_jsonl(&dir.join("raw_generations.jsonl"), &report.raw)?;
                    info!(
                        "{} malformed samples, {} duplicates dropped",
                        report.malformed, report.duplicates
                    );
                    report.traces
                }
            };
            write_jsonl(&dir.join("traces.jsonl"), &traces)?;
            info!(
                "{} traces for {} questions in {}",
                traces.len(),
                train.len(),
                dir.display()
            );
        }
        Command::Build { variant } => {
            reuse_traces(&mut cfg, out);
            let data = prepare_data(&cfg)?;
            let datasets = build_variant_datasets(&data.train, &data.traces, *variant)?;
            let dir = out.join("stages").join(variant.to_string());
            datasets.write_dir(&dir)?;
            let (r, a, s) = datasets.counts();
            info!(
                "{variant}: {r} recall, {a} analyze, {s} summarize examples in {}",
                dir.display()
            );
        }
        Command::Train { variant } => {
            reuse_traces(&mut cfg, out);
            let data = prepare_data(&cfg)?;
            data.write(&data_dir(out))?;
            for &seed in &cfg.experiment.seeds {
                info!("seed {seed}: acquisition for {variant}");
                let acquired = acquire(&cfg, &data, seed, *variant, out)?;
                log_manifest(&acquired.manifest);
            }
        }
        Command::Reflect {
            recall_dpo,
            analyze_dpo,
            acquisition,
        } => {
            let toggles = DpoToggles {
                recall: *recall_dpo,
                analyze: *analyze_dpo,
            };
            if !toggles.any() {
                bail!(user("reflect: enable at least one of --recall-dpo and --analyze-dpo"));
            }
            let seed = first_seed(&cfg);
            let manifest_path = acquisition.clone().unwrap_or_else(|| {
                out.join("runs")
                    .join(format!("full-r0a0-s{seed}"))
                    .join("manifest.json")
            });
            let base = RunManifest::load(&manifest_path)
                .map_err(|e| user(format!("{}: {e} (run `train` first)", manifest_path.display())))?;
            if base.variant != PipelineVariant::Full {
                bail!(user("reflect: the acquisition run must use the full variant"));
            }
            let root = if acquisition.is_some() {
                manifest_path
                    .parent()
                    .and_then(Path::parent)
                    .and_then(Path::parent)
                    .unwrap_or(out)
                    .to_path_buf()
            } else {
                out.clone()
            };
            let model = load_checkpoint(&root.join(&base.artifacts["best"]))?;
            let cfg = base.config.clone();
            let data = prepare_data(&cfg)?;
            let acquired = Acquired { model, manifest: base };
            let m = reflect(&cfg, &data, &acquired, toggles, out)?;
            log_manifest(&m);
        }
        Command::Eval {
            checkpoint,
            variant,
            split,
        } => {
            let model = load_checkpoint(checkpoint).map_err(|e| user(format!("{}: {e}", checkpoint.display())))?;
            let (_, records) = load_questions(&cfg)?;
            let splits = split_by_hash(&records);
            let (name, records) = match split {
                Split::Validation => ("validation", splits.validation),
                Split::Test => ("test", splits.test),
            };
            let eval = evaluate(&model, &records, *variant, cfg.model.max_new_tokens);
            let dir = out.join("eval");
            std::fs::create_dir_all(&dir)?;
            write_jsonl(&dir.join(format!("verdicts_{name}.jsonl")), &eval.verdicts)?;
            let summary = serde_json::json!({
                "checkpoint": checkpoint,
                "variant": variant,
                "split": name,
                "questions": records.len(),
                "accuracy": eval.accuracy,
                "decode_errors": eval.decode_errors,
            });
            std::fs::write(
                dir.join(format!("accuracy_{name}.json")),
                serde_json::to_string_pretty(&summary)?,
            )?;
            info!(
                "{variant} on {name}: accuracy {:.4} over {} questions",
                eval.accuracy,
                records.len()
            );
        }
        Command::Ablate { jobs } => {
            let manifests = run_experiment_jobs(&cfg, out, *jobs)?;
            manifests.iter().for_each(log_manifest);
            let files = report(&manifests, &out.join("report"))?;
            info!("report written to {}", files.summary_md.display());
        }
        Command::Report { runs } => {
            let manifests = collect_manifests(runs.as_deref().unwrap_or(out))?;
            let files = report(&manifests, &out.join("report"))?;
            info!(
                "{} manifests summarized in {}",
                manifests.len(),
                files.summary_md.display()
            );
        }
    }
    Ok(())
}

fn log_manifest(m: &RunManifest) {
    match m.final_accuracy() {
        Some(acc) => info!("{}: {:?}, test accuracy {:.4}", m.run_id, m.status, acc),
        None => info!("{}: {:?} {}", m.run_id, m.status, m.error.as_deref().unwrap_or("")),
    }
}

/// 1 for errors rooted in user input, 2 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UserError>() {
            return 1;
        }
        if let Some(h) = cause.downcast_ref::<HarnessError>() {
            return if h.is_user_error() { 1 } else { 2 };
        }
    }
    if err.chain().any(|c| c.is::<std::io::Error>()) {
        return 1;
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
