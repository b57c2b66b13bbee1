use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use stagewise::harness::{
    collect_manifests, read_results_csv, replay_manifest, report, result_rows, run_experiment, run_experiment_jobs,
    summarize, ExperimentConfig, HarnessError, PipelineVariant, RunStatus, TraceSourceKind,
};

const SMALL: &str = r#"
[world]
seed = 3
n_questions = 40
n_options = 2
n_attributes = 2

[model]
d_model = 8
n_heads = 2
d_ff = 16
enc_layers = 1
dec_layers = 1
max_len = 96
max_new_tokens = 12

[schedule]
interval = 2
epochs = 2
batch_size = 4
lr = 3e-3

[reflection]
iterations = 1
samples = 2
temperature = 1.0
epochs = 1
batch_size = 8
lr = 1e-4
max_new_tokens = 12

[experiment]
name = "small"
seeds = [1]
variants = ["summarize_only", "full"]
toggles = [[false, false], [true, true]]
"#;

fn small() -> ExperimentConfig {
    ExperimentConfig::from_toml(SMALL).unwrap()
}

fn files_with_ext(dir: &Path, ext: &str) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == ext) {
                out.insert(
                    path.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn shipped_configs_load() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let desk = ExperimentConfig::load(&root.join("ref_desk.toml")).unwrap();
    assert_eq!(desk.experiment.seeds, vec![1, 2, 3]);
    assert_eq!((desk.world.n_questions, desk.world.n_options), (500, 4));
    assert_eq!(desk.experiment.variants.len(), 4);
    assert_eq!(desk.experiment.dpo_rows().len(), 3);
    let again = ExperimentConfig::from_toml(&desk.to_toml()).unwrap();
    assert_eq!(again, desk);

    let remote = ExperimentConfig::load(&root.join("ref_remote.toml")).unwrap();
    assert_eq!(remote.teacher.source, TraceSourceKind::Remote);
    assert_eq!(remote.teacher.remote.api_key_env, "TEACHER_API_KEY");
    remote.teacher.remote.validate().unwrap();
}

#[test]
fn bad_configs_are_rejected() {
    for text in [
        "[world]\nsed = 3\n",
        "[experiment]\nseeds = []\n",
        "[schedule]\ninterval = 0\n",
        "[model]\nd_model = 6\nn_heads = 4\n",
        "[experiment]\nvariants = [\"everything\"]\n",
    ] {
        match ExperimentConfig::from_toml(text) {
            Err(e @ HarnessError::Config(_)) => assert!(e.is_user_error()),
            other => panic!("{text:?} gave {other:?}"),
        }
    }
}

#[test]
fn runs_are_deterministic_and_reportable() {
    let cfg = small();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = run_experiment(&cfg, a.path()).unwrap();
    let mb = run_experiment_jobs(&cfg, b.path(), 2).unwrap();
    assert_eq!(ma.len(), 3);
    assert!(ma.iter().all(|m| m.status == RunStatus::Complete), "{ma:?}");
    let ids: Vec<&str> = ma.iter().map(|m| m.run_id.as_str()).collect();
    assert_eq!(ids, ["summarize_only-r0a0-s1", "full-r0a0-s1", "full-r1a1-s1"]);

    let (ca, cb) = (files_with_ext(a.path(), "ckpt"), files_with_ext(b.path(), "ckpt"));
    assert!(!ca.is_empty());
    assert_eq!(ca, cb);
    for (x, y) in ma.iter().zip(&mb) {
        assert_eq!(x.checkpoint_digests, y.checkpoint_digests);
        assert_eq!(x.phases, y.phases);
    }

    let (ra, rb) = (
        report(&collect_manifests(a.path()).unwrap(), &a.path().join("report")).unwrap(),
        report(&collect_manifests(b.path()).unwrap(), &b.path().join("report")).unwrap(),
    );
    let csv_a = std::fs::read(&ra.results_csv).unwrap();
    assert_eq!(csv_a, std::fs::read(&rb.results_csv).unwrap());
    assert_eq!(read_results_csv(&ra.results_csv).unwrap(), result_rows(&ma));
    assert!(std::fs::read_to_string(&ra.summary_md).unwrap().contains("| full |"));
    assert!(ra
        .charts
        .iter()
        .all(|c| std::fs::read_to_string(c).unwrap().starts_with("<svg")));

    let r = tempfile::tempdir().unwrap();
    let replayed = replay_manifest(&ma[2], r.path()).unwrap();
    assert_eq!(replayed.checkpoint_digests, ma[2].checkpoint_digests);
}

#[test]
fn summary_deltas_against_the_baseline() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let manifests = run_experiment(&cfg, dir.path()).unwrap();
    let mut fake = manifests.clone();
    for (m, acc) in fake.iter_mut().zip([0.25, 0.5, 0.75]) {
        m.phases.last_mut().unwrap().test_accuracy = acc;
    }
    let mut second = fake.clone();
    for m in &mut second {
        m.seed = 2;
        m.phases.last_mut().unwrap().test_accuracy += 0.125;
    }
    fake.extend(second);
    let cells = summarize(&fake);
    let by: BTreeMap<(PipelineVariant, bool), (f64, Option<f64>, Vec<u64>)> = cells
        .iter()
        .map(|c| ((c.variant, c.recall_dpo), (c.mean, c.delta, c.seeds.clone())))
        .collect();
    assert_eq!(by[&(PipelineVariant::SummarizeOnly, false)], (0.3125, None, vec![1, 2]));
    assert_eq!(by[&(PipelineVariant::Full, false)], (0.5625, None, vec![1, 2]));
    assert_eq!(by[&(PipelineVariant::Full, true)], (0.8125, Some(0.25), vec![1, 2]));

    fake[0].status = RunStatus::Failed;
    assert_eq!(result_rows(&fake).len(), result_rows(&manifests).len() * 2 - 1);
}
