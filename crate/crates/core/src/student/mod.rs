//! The trainable student: tokenizer, encoder-decoder model, losses, decoding
//! and checkpoints.

pub mod checkpoint;
pub mod model;
pub mod optim;
pub mod tape;
pub mod vocab;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use model::{Gradients, ModelConfig, ModelParams};
pub use optim::{AdamW, AdamWConfig};
pub use tape::{log_softmax, Mat, Tape};
pub use vocab::{Vocab, VocabError};

use vocab::{BOS, EOS, PAD, UNK};

#[derive(Debug, thiserror::Error)]
pub enum StudentError {
    #[error("sequence of {len} tokens exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("gradient shapes do not match the model")]
    ShapeMismatch,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint is truncated or corrupt")]
    CorruptChecksum,
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, StudentError>;

/// Token ids for one (input, label) pair. The source carries a trailing eos;
/// the target excludes bos and eos.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

impl EncodedPair {
    /// Number of scored positions, including the eos step.
    pub fn label_len(&self) -> usize {
        self.tgt.len() + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Temperature,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl DecodeConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            mode: DecodeMode::Greedy,
            temperature: 1.0,
            max_new_tokens,
            seed: 0,
        }
    }

    pub fn sample(temperature: f64, max_new_tokens: usize, seed: u64) -> Self {
        Self {
            mode: DecodeMode::Temperature,
            temperature,
            max_new_tokens,
            seed,
        }
    }
}

/// Model parameters bundled with the vocabulary they were trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct Student {
    pub params: ModelParams,
    pub vocab: Vocab,
}

impl Student {
    pub fn new(vocab: Vocab, mut config: ModelConfig, seed: u64) -> Result<Self> {
        config.vocab_size = vocab.len();
        config.validate().map_err(StudentError::Config)?;
        Ok(Self {
            params: ModelParams::init(config, seed),
            vocab,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn encode_source(&self, input: &str) -> Result<Vec<usize>> {
        let mut src = self.vocab.encode(input);
        src.push(EOS);
        let max = self.config().max_len;
        if src.len() > max {
            return Err(StudentError::SequenceTooLong { len: src.len(), max });
        }
        Ok(src)
    }

    pub fn encode_pair(&self, input: &str, label: &str) -> Result<EncodedPair> {
        let src = self.encode_source(input)?;
        let tgt = self.vocab.encode(label);
        let max = self.config().max_len;
        if tgt.len() + 1 > max {
            return Err(StudentError::SequenceTooLong {
                len: tgt.len() + 1,
                max,
            });
        }
        Ok(EncodedPair { src, tgt })
    }

    fn scored_node<'a>(&'a self, tape: &mut Tape<'a>, pair: &EncodedPair) -> tape::NodeId {
        let memory = self.params.encode(tape, &pair.src);
        let mut tgt_in = Vec::with_capacity(pair.tgt.len() + 1);
        tgt_in.push(BOS);
        tgt_in.extend_from_slice(&pair.tgt);
        let mut targets = pair.tgt.clone();
        targets.push(EOS);
        let logits = self.params.decode_logits(tape, memory, &tgt_in);
        tape.log_prob_sum(logits, &targets)
    }

    /// Unnormalized log P(label | input), eos step included.
    pub fn pair_log_prob(&self, pair: &EncodedPair) -> f64 {
        let mut tape = Tape::new(&self.params);
        let node = self.scored_node(&mut tape, pair);
        tape.scalar(node)
    }

    /// Like [`Self::pair_log_prob`], also adding `coeff * dL/dθ` into `grads`.
    pub fn pair_log_prob_grad(&self, pair: &EncodedPair, coeff: f64, grads: &mut Gradients) -> f64 {
        let mut tape = Tape::new(&self.params);
        let node = self.scored_node(&mut tape, pair);
        tape.backward(&[(node, coeff)], grads);
        tape.scalar(node)
    }

    /// Scores every pair, then backpropagates `seeds(scores)[i]` through pair
    /// `i`. Lets a loss pick its gradient coefficients from the forward values
    /// without a second forward pass.
    pub fn log_probs_with_grad<F>(&self, pairs: &[&EncodedPair], grads: &mut Gradients, seeds: F) -> Vec<f64>
    where
        F: FnOnce(&[f64]) -> Vec<f64>,
    {
        let tapes: Vec<_> = pairs
            .iter()
            .map(|p| {
                let mut tape = Tape::new(&self.params);
                let node = self.scored_node(&mut tape, p);
                (tape, node)
            })
            .collect();
        let scores: Vec<f64> = tapes.iter().map(|(t, n)| t.scalar(*n)).collect();
        for ((tape, node), coeff) in tapes.iter().zip(seeds(&scores)) {
            if coeff != 0.0 {
                tape.backward(&[(*node, coeff)], grads);
            }
        }
        scores
    }

    pub fn sequence_log_prob(&self, input: &str, label: &str) -> Result<f64> {
        Ok(self.pair_log_prob(&self.encode_pair(input, label)?))
    }

    /// Log-probabilities of each label token (then eos), each computed by an
    /// independent forward pass over the prefix.
    pub fn stepwise_log_probs(&self, pair: &EncodedPair) -> Vec<f64> {
        let mut out = Vec::with_capacity(pair.tgt.len() + 1);
        let mut prefix = vec![BOS];
        for &next in pair.tgt.iter().chain(std::iter::once(&EOS)) {
            let mut tape = Tape::new(&self.params);
            let memory = self.params.encode(&mut tape, &pair.src);
            let logits = self.params.last_logits(&mut tape, memory, &prefix);
            out.push(log_softmax(&tape.value(logits).data)[next]);
            prefix.push(next);
        }
        out
    }

    /// Mean per-token NLL over the batch and its gradient.
    pub fn nll_loss_and_grad_encoded(&self, batch: &[EncodedPair]) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(StudentError::EmptyBatch);
        }
        let mut grads = Gradients::zeros_like(&self.params);
        let n = batch.len() as f64;
        let mut loss = 0.0;
        for pair in batch {
            let count = pair.label_len() as f64;
            let lp = self.pair_log_prob_grad(pair, -1.0 / (count * n), &mut grads);
            loss += -lp / count;
        }
        Ok((loss / n, grads))
    }

    pub fn nll_loss_and_grad(&self, batch: &[(&str, &str)]) -> Result<(f64, Gradients)> {
        let encoded = batch
            .iter()
            .map(|(i, l)| self.encode_pair(i, l))
            .collect::<Result<Vec<_>>>()?;
        self.nll_loss_and_grad_encoded(&encoded)
    }

    /// Generates label token ids for an encoded source.
    pub fn generate<R: Rng>(
        &self,
        src: &[usize],
        temperature: Option<f64>,
        max_new_tokens: usize,
        rng: &mut R,
    ) -> Vec<usize> {
        let mut tape = Tape::new(&self.params);
        let memory_node = self.params.encode(&mut tape, src);
        let memory = tape.value(memory_node).clone();
        drop(tape);
        let limit = max_new_tokens.min(self.config().max_len - 1);
        let mut tokens = vec![BOS];
        while tokens.len() <= limit {
            let mut tape = Tape::new(&self.params);
            let mem = tape.input(memory.clone());
            let logits = self.params.last_logits(&mut tape, mem, &tokens);
            let mut row = tape.value(logits).data.clone();
            for banned in [PAD, BOS, UNK] {
                row[banned] = f64::NEG_INFINITY;
            }
            let next = match temperature {
                None => argmax(&row),
                Some(t) => sample(&row, t, rng),
            };
            if next == EOS {
                break;
            }
            tokens.push(next);
        }
        tokens.remove(0);
        tokens
    }

    pub fn decode(&self, input: &str, cfg: &DecodeConfig) -> Result<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        self.decode_with_rng(input, cfg, &mut rng)
    }

    pub fn decode_with_rng<R: Rng>(&self, input: &str, cfg: &DecodeConfig, rng: &mut R) -> Result<String> {
        let src = self.encode_source(input)?;
        let temperature = match cfg.mode {
            DecodeMode::Greedy => None,
            DecodeMode::Temperature => Some(cfg.temperature),
        };
        let ids = self.generate(&src, temperature, cfg.max_new_tokens, rng);
        Ok(self.vocab.decode(&ids))
    }
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn sample<R: Rng>(logits: &[f64], temperature: f64, rng: &mut R) -> usize {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let lsm = log_softmax(&scaled);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_valid = argmax(logits);
    for (i, l) in lsm.iter().enumerate() {
        let p = l.exp();
        if p > 0.0 {
            last_valid = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_valid
}
