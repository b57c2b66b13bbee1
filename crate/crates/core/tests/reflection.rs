mod common;

use std::cell::Cell;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stagewise::corpus::{normalize, QuestionRecord, Stage};
use stagewise::harness::TextModel;
use stagewise::reflection::{
    collect_analyze_pairs, collect_recall_pairs, dedup_pairs, dpo_nll_loss, replay_pair, run_self_reflection,
    PreferencePair, ReflectionConfig, ReflectionError,
};
use stagewise::student::model::ModelParams;
use stagewise::student::vocab::SPECIALS;
use stagewise::student::{ModelConfig, Student, StudentError, Vocab};

use common::{gradcheck, reference_parse, tiny_student};

/// A chain whose verdict is fixed by which sample produced its knowledge:
/// recall sample `k` reads `fact k`; analyze set `s` reads `X take s`.
struct Scripted {
    samples: usize,
    n_labels: usize,
    recall_wins: usize,
    analyze_wins: usize,
    shared_b: bool,
    recall_calls: Cell<usize>,
    analyze_calls: Cell<usize>,
}

impl Scripted {
    fn new(samples: usize, n_labels: usize, recall_wins: usize, analyze_wins: usize) -> Self {
        Self {
            samples,
            n_labels,
            recall_wins,
            analyze_wins,
            shared_b: false,
            recall_calls: Cell::new(0),
            analyze_calls: Cell::new(0),
        }
    }
}

fn number_after(text: &str, marker: &str) -> Option<usize> {
    let rest = &text[text.find(marker)? + marker.len()..];
    rest.split(|c: char| !c.is_ascii_digit()).next()?.parse().ok()
}

impl TextModel for Scripted {
    fn greedy(&self, input: &str, _: usize) -> Result<String, StudentError> {
        Ok(if input.ends_with("Summarize:") {
            let win = match number_after(input, "take ") {
                Some(s) => s < self.analyze_wins,
                None => number_after(input, "fact ").is_some_and(|k| k < self.recall_wins),
            };
            format!("Therefore, the answer is ({}).", if win { 'A' } else { 'B' })
        } else if input.ends_with("Recall:") {
            "fact 0".into()
        } else {
            "looks plausible".into()
        })
    }

    fn sample(&self, input: &str, _: f64, _: usize, _: &mut ChaCha8Rng) -> Result<String, StudentError> {
        if input.ends_with("Recall:") {
            let k = self.recall_calls.get();
            self.recall_calls.set(k + 1);
            return Ok(format!("fact {}", k % self.samples));
        }
        let k = self.analyze_calls.get();
        self.analyze_calls.set(k + 1);
        let label = input.trim_end_matches(',').chars().last().unwrap();
        let s = (k / self.n_labels) % self.samples;
        Ok(if self.shared_b && label == 'B' {
            "B is the same".into()
        } else {
            format!("{label} take {s}")
        })
    }
}

fn question(n: usize) -> QuestionRecord {
    let options: Vec<String> = (0..n).map(|i| format!("thing{i}")).collect();
    let refs: Vec<&str> = options.iter().map(String::as_str).collect();
    QuestionRecord::new("q1", "Which one is warm?", &refs, 'A').unwrap()
}

fn cfg(samples: usize, max_pairs: usize) -> ReflectionConfig {
    ReflectionConfig {
        samples,
        max_pairs,
        ..Default::default()
    }
}

#[test]
fn recall_six_of_ten_correct_gives_four_pairs() {
    let model = Scripted::new(10, 4, 6, 0);
    let out = collect_recall_pairs(&model, &[question(4)], &cfg(10, 4), 1);
    assert_eq!(out.pairs.len(), 4);
    assert_eq!(out.preferred["q1"], "fact 0");
    for p in &out.pairs {
        assert_eq!(p.stage, Stage::Recall);
        assert_ne!(normalize(&p.preferred), normalize(&p.dispreferred));
        assert!(p.input.ends_with("\n Recall:"));
    }
    let capped = collect_recall_pairs(&Scripted::new(10, 4, 6, 0), &[question(4)], &cfg(10, 2), 1);
    assert_eq!(capped.pairs.len(), 2);
}

#[test]
fn all_correct_recalls_give_no_pairs_but_a_preferred_recall() {
    let out = collect_recall_pairs(&Scripted::new(10, 4, 10, 0), &[question(4)], &cfg(10, 4), 1);
    assert!(out.pairs.is_empty());
    assert_eq!(out.preferred["q1"], "fact 0");
    let none = collect_recall_pairs(&Scripted::new(10, 4, 0, 0), &[question(4)], &cfg(10, 4), 1);
    assert!(none.pairs.is_empty());
    assert!(none.preferred.is_empty());
}

#[test]
fn analyze_three_of_ten_gives_three_pairs_per_option() {
    let record = question(4);
    let preferred = BTreeMap::from([("q1".to_string(), "fact 0".to_string())]);
    let out = collect_analyze_pairs(
        &Scripted::new(10, 4, 10, 3),
        std::slice::from_ref(&record),
        &preferred,
        &cfg(10, 4),
        1,
    );
    assert_eq!(out.pairs.len(), 12);
    for label in record.labels() {
        assert_eq!(out.pairs.iter().filter(|p| p.option_label == Some(label)).count(), 3);
    }
    for p in &out.pairs {
        let parsed = reference_parse(&p.input, &[]);
        assert_eq!(parsed.general.as_deref(), Some("fact 0."));
        assert_eq!(parsed.cue, format!("Analyze: For option {},", p.option_label.unwrap()));
    }

    let mut shared = Scripted::new(10, 4, 10, 3);
    shared.shared_b = true;
    let out = collect_analyze_pairs(&shared, &[record], &preferred, &cfg(10, 4), 1);
    assert_eq!(out.pairs.len(), 9);
    assert!(out.pairs.iter().all(|p| p.option_label != Some('B')));
}

#[test]
fn analyze_skips_questions_without_preferred_recall() {
    let out = collect_analyze_pairs(
        &Scripted::new(10, 4, 10, 3),
        &[question(4)],
        &BTreeMap::new(),
        &cfg(10, 4),
        1,
    );
    assert!(out.pairs.is_empty());
    assert_eq!(out.without_recall, 1);
}

#[test]
fn scripted_pairs_replay() {
    let record = question(3);
    let model = Scripted::new(8, 3, 5, 2);
    let c = cfg(8, 4);
    let recall = collect_recall_pairs(&model, std::slice::from_ref(&record), &c, 1);
    let analyze = collect_analyze_pairs(&model, std::slice::from_ref(&record), &recall.preferred, &c, 1);
    assert!(!recall.pairs.is_empty() && !analyze.pairs.is_empty());
    for p in recall.pairs.iter().chain(&analyze.pairs) {
        assert!(replay_pair(&model, &record, p, 24).unwrap(), "{p:?}");
        let mut swapped = p.clone();
        std::mem::swap(&mut swapped.preferred, &mut swapped.dispreferred);
        std::mem::swap(&mut swapped.preferred_context, &mut swapped.dispreferred_context);
        assert!(!replay_pair(&model, &record, &swapped, 24).unwrap());
    }
}

#[test]
fn dedup_keys_on_input_and_both_outputs() {
    let pair = |w: &str, l: &str| PreferencePair {
        stage: Stage::Recall,
        question_id: "q".into(),
        option_label: None,
        input: "x".into(),
        preferred: w.into(),
        dispreferred: l.into(),
        iteration: 1,
        preferred_context: None,
        dispreferred_context: None,
    };
    let out = dedup_pairs(vec![pair("a", "b"), pair("a", "c"), pair("a", "b"), pair("b", "a")]);
    assert_eq!(out.len(), 3);
}

#[test]
fn config_invariants() {
    let bad = |f: fn(&mut ReflectionConfig)| {
        let mut c = ReflectionConfig::default();
        f(&mut c);
        matches!(c.validate(), Err(ReflectionError::ConfigInvalid(_)))
    };
    assert!(bad(|c| c.beta = 0.0));
    assert!(bad(|c| c.alpha = -0.1));
    assert!(bad(|c| c.samples = 1));
    assert!(bad(|c| c.temperature = 0.0));
    assert!(ReflectionConfig::default().validate().is_ok());
}

const WORDS: [&str; 8] = ["the", "cat", "sat", "on", "a", "mat", "dog", "yes"];

fn random_text(rng: &mut ChaCha8Rng, max: usize) -> String {
    let n = rng.random_range(1..=max);
    (0..n)
        .map(|_| WORDS[rng.random_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

fn random_pair(rng: &mut ChaCha8Rng) -> PreferencePair {
    let preferred = random_text(rng, 4);
    let mut dispreferred = random_text(rng, 4);
    while dispreferred == preferred {
        dispreferred = random_text(rng, 4);
    }
    PreferencePair {
        stage: Stage::Recall,
        question_id: "q".into(),
        option_label: None,
        input: random_text(rng, 5),
        preferred,
        dispreferred,
        iteration: 1,
        preferred_context: None,
        dispreferred_context: None,
    }
}

fn per_token_nll(model: &Student, input: &str, label: &str) -> f64 {
    let pair = model.encode_pair(input, label).unwrap();
    -model.pair_log_prob(&pair) / pair.label_len() as f64
}

#[test]
fn identical_models_without_nll_give_log_two() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..100 {
        let policy = tiny_student(i);
        let pair = random_pair(&mut rng);
        let (loss, _) = dpo_nll_loss(&policy, &policy.clone(), &pair, 0.5, 0.0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-9, "{loss}");
    }
}

#[test]
fn zero_beta_leaves_log_two_plus_nll() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..20 {
        let (policy, reference) = (tiny_student(i), tiny_student(i + 100));
        let pair = random_pair(&mut rng);
        let alpha = 0.5 * (i % 3) as f64;
        let (loss, _) = dpo_nll_loss(&policy, &reference, &pair, 0.0, alpha).unwrap();
        let want = std::f64::consts::LN_2 + alpha * per_token_nll(&policy, &pair.input, &pair.preferred);
        assert!((loss - want).abs() < 1e-12);
    }
}

#[test]
fn decomposition_antisymmetry_and_logit_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..20 {
        let (mut policy, mut reference) = (tiny_student(i), tiny_student(i + 50));
        let pair = random_pair(&mut rng);
        let beta = [0.1, 0.5, 2.0][i as usize % 3];
        let (l0, _) = dpo_nll_loss(&policy, &reference, &pair, beta, 0.0).unwrap();
        for alpha in [0.5, 1.0] {
            let (la, _) = dpo_nll_loss(&policy, &reference, &pair, beta, alpha).unwrap();
            let want = l0 + alpha * per_token_nll(&policy, &pair.input, &pair.preferred);
            assert!((la - want).abs() < 1e-12);
        }

        let mut swapped = pair.clone();
        std::mem::swap(&mut swapped.preferred, &mut swapped.dispreferred);
        let (ls, _) = dpo_nll_loss(&policy, &reference, &swapped, beta, 0.0).unwrap();
        assert!((ls - -(-(-l0).exp()).ln_1p()).abs() < 1e-10, "{l0} {ls}");

        let c = rng.random_range(-3.0..3.0);
        for m in [&mut policy, &mut reference] {
            m.params.output_bias_mut().data.iter_mut().for_each(|b| *b += c);
        }
        let (shifted, _) = dpo_nll_loss(&policy, &reference, &pair, beta, 0.0).unwrap();
        assert!((shifted - l0).abs() < 1e-10);
    }
}

/// Seven-entry vocabulary: the four specials and three word tokens.
fn pinned(bias: &[f64]) -> Student {
    let tokens: Vec<String> = SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(["x", "y", "z"].map(String::from))
        .collect();
    let vocab = Vocab::from(tokens);
    let config = ModelConfig {
        vocab_size: vocab.len(),
        d_model: 4,
        n_heads: 1,
        d_ff: 4,
        enc_layers: 1,
        dec_layers: 1,
        max_len: 8,
    };
    let mut params = ModelParams::init(config, 3);
    params.output_weight_mut().data.fill(0.0);
    params.output_bias_mut().data.copy_from_slice(bias);
    Student { params, vocab }
}

/// log P(y) from enumerated token probabilities under fixed logits.
fn brute_log_prob(bias: &[f64], label: &[usize]) -> f64 {
    let z: f64 = bias.iter().map(|b| b.exp()).sum();
    let p: Vec<f64> = bias.iter().map(|b| b.exp() / z).collect();
    label.iter().chain(std::iter::once(&2)).map(|&t| p[t].ln()).sum()
}

#[test]
fn pinned_logits_match_brute_force() {
    let bp = [0.3, -1.0, 0.5, 0.2, 1.1, -0.4, 0.7];
    let br = [-0.2, 0.4, 0.1, -0.3, 0.6, 0.9, -0.8];
    let (policy, reference) = (pinned(&bp), pinned(&br));
    let pair = PreferencePair {
        stage: Stage::Recall,
        question_id: "q".into(),
        option_label: None,
        input: "x y".into(),
        preferred: "x z z".into(),
        dispreferred: "y".into(),
        iteration: 1,
        preferred_context: None,
        dispreferred_context: None,
    };
    let (w, l) = ([4, 6, 6], [5]);
    for beta in [0.1, 0.5, 2.0] {
        for alpha in [0.0, 0.5, 1.0] {
            let (loss, _) = dpo_nll_loss(&policy, &reference, &pair, beta, alpha).unwrap();
            let z = beta
                * ((brute_log_prob(&bp, &w) - brute_log_prob(&br, &w))
                    - (brute_log_prob(&bp, &l) - brute_log_prob(&br, &l)));
            let want = -(1.0 / (1.0 + (-z).exp())).ln() - alpha * brute_log_prob(&bp, &w) / 4.0;
            assert!(
                (loss - want).abs() < 1e-10,
                "beta {beta} alpha {alpha}: {loss} vs {want}"
            );
        }
    }
}

#[test]
fn dpo_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let reference = tiny_student(77);
    let mut policy = tiny_student(78);
    let pair = random_pair(&mut rng);
    let (_, grads) = dpo_nll_loss(&policy, &reference, &pair, 0.5, 0.5).unwrap();
    let worst = gradcheck(&mut policy, &grads, 6, |p| {
        dpo_nll_loss(p, &reference, &pair, 0.5, 0.5).unwrap().0
    });
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn zero_iterations_return_the_model_unchanged() {
    let model = tiny_student(5);
    let c = ReflectionConfig {
        iterations: 0,
        ..Default::default()
    };
    let out = run_self_reflection(
        model.clone(),
        &[],
        &c,
        stagewise::reflection::DpoToggles::BOTH,
        |_, _| 0.0,
    )
    .unwrap();
    assert_eq!(out.final_model, model);
    assert_eq!(out.best_iteration, 0);
    assert!(out.metrics.is_empty());
}

mod trained {
    use std::sync::OnceLock;

    use stagewise::corpus::Stage;
    use stagewise::harness::{acquire, prepare_data, ExperimentConfig, PipelineVariant, PreparedData};
    use stagewise::reflection::{
        replay_pair, run_reflection_iteration, run_self_reflection, DpoToggles, IterationState, ReflectionConfig,
    };
    use stagewise::student::Student;

    /// A small model trained to roughly two-thirds validation accuracy, so
    /// that sampled chains disagree.
    fn setup() -> &'static (PreparedData, Student) {
        static CELL: OnceLock<(PreparedData, Student)> = OnceLock::new();
        CELL.get_or_init(|| {
            let cfg = ExperimentConfig::from_toml(
                r#"
[world]
seed = 3
n_questions = 60
n_options = 2
n_attributes = 2
[model]
d_model = 16
n_heads = 2
d_ff = 32
enc_layers = 1
dec_layers = 1
max_len = 64
max_new_tokens = 16
[schedule]
interval = 5
epochs = 12
batch_size = 8
lr = 3e-3
"#,
            )
            .unwrap();
            let data = prepare_data(&cfg).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let model = acquire(&cfg, &data, 1, PipelineVariant::Full, dir.path())
                .unwrap()
                .model;
            (data, model)
        })
    }

    fn rcfg() -> ReflectionConfig {
        ReflectionConfig {
            samples: 4,
            temperature: 1.0,
            max_new_tokens: 16,
            epochs: 2,
            batch_size: 8,
            lr: 1e-3,
            seed: 1,
            ..Default::default()
        }
    }

    #[test]
    fn iteration_contract() {
        let (data, model) = setup();
        let state = IterationState::new(model.clone());
        let out = run_reflection_iteration(&state, &data.train, &rcfg(), DpoToggles::BOTH).unwrap();
        assert_eq!(state.reference, *model);
        assert_eq!(out.state.t, 1);
        assert_eq!(out.state.reference, out.state.policy);
        assert_ne!(out.state.policy, *model);
        let m = &out.metrics;
        assert!(m.recall_pairs > 0 && m.analyze_pairs > 0);
        assert_eq!(m.recall_steps, m.analyze_steps);

        for p in out.recall_pairs.iter().chain(&out.analyze_pairs) {
            assert_eq!(p.iteration, 1);
            assert_ne!(
                stagewise::corpus::normalize(&p.preferred),
                stagewise::corpus::normalize(&p.dispreferred)
            );
            let record = data.train.iter().find(|r| r.id == p.question_id).unwrap();
            assert!(replay_pair(model, record, p, 16).unwrap(), "{p:?}");
            match p.stage {
                Stage::Recall => assert!(p.input.ends_with("\n Recall:")),
                Stage::Analyze => {
                    assert!(p
                        .input
                        .ends_with(&format!("\n Analyze: For option {},", p.option_label.unwrap())))
                }
                Stage::Summarize => unreachable!(),
            }
        }

        let again = run_reflection_iteration(&state, &data.train, &rcfg(), DpoToggles::BOTH).unwrap();
        assert_eq!(again.state.policy, out.state.policy);
    }

    #[test]
    fn toggles_select_trained_stages() {
        let (data, model) = setup();
        let state = IterationState::new(model.clone());
        let recall_only = DpoToggles {
            recall: true,
            analyze: false,
        };
        let out = run_reflection_iteration(&state, &data.train, &rcfg(), recall_only).unwrap();
        assert!(out.analyze_pairs.is_empty());
        assert_eq!(out.metrics.analyze_steps, 0);
        assert!(out.metrics.recall_steps > 0);
    }

    #[test]
    fn pairs_come_from_the_iteration_reference() {
        let (data, model) = setup();
        let first = run_reflection_iteration(
            &IterationState::new(model.clone()),
            &data.train,
            &rcfg(),
            DpoToggles::BOTH,
        )
        .unwrap();
        let second = run_reflection_iteration(&first.state, &data.train, &rcfg(), DpoToggles::BOTH).unwrap();
        assert_eq!(second.state.t, 2);
        for p in second.recall_pairs.iter().chain(&second.analyze_pairs) {
            assert_eq!(p.iteration, 2);
            let record = data.train.iter().find(|r| r.id == p.question_id).unwrap();
            assert!(replay_pair(&first.state.reference, record, p, 16).unwrap());
        }

        let mut seen = Vec::new();
        let c = ReflectionConfig {
            iterations: 2,
            ..rcfg()
        };
        let out = run_self_reflection(model.clone(), &data.train, &c, DpoToggles::BOTH, |t, _| {
            seen.push(t);
            t as f64
        })
        .unwrap();
        assert_eq!(seen, vec![0, 1, 2]);
        let iters: Vec<usize> = out.metrics.iter().map(|m| m.iteration).collect();
        assert_eq!(iters, vec![1, 2]);
        assert_eq!(out.best_iteration, 2);
        assert_eq!(out.final_model, second.state.policy);
    }
}
