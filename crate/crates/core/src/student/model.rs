//! Encoder-decoder attention model: parameter layout, initialization and the
//! differentiable forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Mat, NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            enc_layers: 2,
            dec_layers: 2,
            max_len: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.vocab_size < 5 {
            return Err(format!("vocab size {} too small", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(format!(
                "model width {} not divisible into {} heads",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ff == 0 || self.max_len < 2 {
            return Err("feed-forward width and max length must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parameter count of the layout, or `None` on overflow.
    pub fn param_count(&self) -> Option<usize> {
        let (v, d, f, l) = (self.vocab_size, self.d_model, self.d_ff, self.max_len);
        let ln = d.checked_mul(2)?;
        let attn = d.checked_mul(d)?.checked_mul(4)?;
        let ff = d.checked_mul(f)?.checked_mul(2)?.checked_add(f)?.checked_add(d)?;
        let enc = ln.checked_mul(2)?.checked_add(attn)?.checked_add(ff)?;
        let dec = ln.checked_mul(3)?.checked_add(attn.checked_mul(2)?)?.checked_add(ff)?;
        let emb = v.checked_mul(d)?.checked_add(l.checked_mul(d)?.checked_mul(2)?)?;
        let out = d.checked_add(1)?.checked_mul(v)?;
        emb.checked_add(enc.checked_mul(self.enc_layers)?)?
            .checked_add(dec.checked_mul(self.dec_layers)?)?
            .checked_add(ln.checked_mul(2)?)?
            .checked_add(out)
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerNormIdx {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy)]
struct AttnIdx {
    q: usize,
    k: usize,
    v: usize,
    o: usize,
}

#[derive(Debug, Clone, Copy)]
struct FfIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct EncLayer {
    ln_attn: LayerNormIdx,
    attn: AttnIdx,
    ln_ff: LayerNormIdx,
    ff: FfIdx,
}

#[derive(Debug, Clone)]
struct DecLayer {
    ln_self: LayerNormIdx,
    self_attn: AttnIdx,
    ln_cross: LayerNormIdx,
    cross_attn: AttnIdx,
    ln_ff: LayerNormIdx,
    ff: FfIdx,
}

/// What a tensor is for; drives initialization and gradient-check coverage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Embedding,
    Position,
    Attention,
    FeedForward,
    NormGain,
    NormBias,
    FeedForwardBias,
    Projection,
    ProjectionBias,
}

#[derive(Debug, Clone)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub kind: TensorKind,
}

#[derive(Debug, Clone)]
struct Layout {
    specs: Vec<TensorSpec>,
    tok_emb: usize,
    enc_pos: usize,
    dec_pos: usize,
    enc: Vec<EncLayer>,
    enc_ln: LayerNormIdx,
    dec: Vec<DecLayer>,
    dec_ln: LayerNormIdx,
    out_w: usize,
    out_b: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let mut specs = Vec::new();
        let mut add = |name: String, rows, cols, kind| {
            specs.push(TensorSpec { name, rows, cols, kind });
            specs.len() - 1
        };
        let d = cfg.d_model;
        let tok_emb = add("tok_emb".into(), cfg.vocab_size, d, TensorKind::Embedding);
        let enc_pos = add("enc_pos".into(), cfg.max_len, d, TensorKind::Position);
        let dec_pos = add("dec_pos".into(), cfg.max_len, d, TensorKind::Position);
        let ln = |add: &mut dyn FnMut(String, usize, usize, TensorKind) -> usize, p: &str| LayerNormIdx {
            gamma: add(format!("{p}.gamma"), 1, d, TensorKind::NormGain),
            beta: add(format!("{p}.beta"), 1, d, TensorKind::NormBias),
        };
        let attn = |add: &mut dyn FnMut(String, usize, usize, TensorKind) -> usize, p: &str| AttnIdx {
            q: add(format!("{p}.wq"), d, d, TensorKind::Attention),
            k: add(format!("{p}.wk"), d, d, TensorKind::Attention),
            v: add(format!("{p}.wv"), d, d, TensorKind::Attention),
            o: add(format!("{p}.wo"), d, d, TensorKind::Attention),
        };
        let ff = |add: &mut dyn FnMut(String, usize, usize, TensorKind) -> usize, p: &str| FfIdx {
            w1: add(format!("{p}.w1"), d, cfg.d_ff, TensorKind::FeedForward),
            b1: add(format!("{p}.b1"), 1, cfg.d_ff, TensorKind::FeedForwardBias),
            w2: add(format!("{p}.w2"), cfg.d_ff, d, TensorKind::FeedForward),
            b2: add(format!("{p}.b2"), 1, d, TensorKind::FeedForwardBias),
        };
        let enc = (0..cfg.enc_layers)
            .map(|i| {
                let p = format!("enc{i}");
                EncLayer {
                    ln_attn: ln(&mut add, &format!("{p}.ln_attn")),
                    attn: attn(&mut add, &format!("{p}.attn")),
                    ln_ff: ln(&mut add, &format!("{p}.ln_ff")),
                    ff: ff(&mut add, &format!("{p}.ff")),
                }
            })
            .collect();
        let enc_ln = ln(&mut add, "enc_ln");
        let dec = (0..cfg.dec_layers)
            .map(|i| {
                let p = format!("dec{i}");
                DecLayer {
                    ln_self: ln(&mut add, &format!("{p}.ln_self")),
                    self_attn: attn(&mut add, &format!("{p}.self")),
                    ln_cross: ln(&mut add, &format!("{p}.ln_cross")),
                    cross_attn: attn(&mut add, &format!("{p}.cross")),
                    ln_ff: ln(&mut add, &format!("{p}.ln_ff")),
                    ff: ff(&mut add, &format!("{p}.ff")),
                }
            })
            .collect();
        let dec_ln = ln(&mut add, "dec_ln");
        let out_w = add("out_w".into(), d, cfg.vocab_size, TensorKind::Projection);
        let out_b = add("out_b".into(), 1, cfg.vocab_size, TensorKind::ProjectionBias);
        Self {
            specs,
            tok_emb,
            enc_pos,
            dec_pos,
            enc,
            enc_ln,
            dec,
            dec_ln,
            out_w,
            out_b,
        }
    }
}

/// The student's parameters θ.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: Vec<Mat>,
    layout: Layout,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.tensors == other.tensors
    }
}

/// Gradient buffers shaped like a [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Mat>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            tensors: params.tensors.iter().map(|t| Mat::zeros(t.rows, t.cols)).collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v *= s;
            }
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

impl ModelParams {
    /// Zero-valued parameters with unit layer-norm gains.
    pub fn zeros(config: ModelConfig) -> Self {
        let layout = Layout::new(&config);
        let tensors = layout
            .specs
            .iter()
            .map(|s| {
                let mut m = Mat::zeros(s.rows, s.cols);
                if s.kind == TensorKind::NormGain {
                    m.data.fill(1.0);
                }
                m
            })
            .collect();
        Self {
            config,
            tensors,
            layout,
        }
    }

    /// Uniform fan-in scaled initialization, deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        Self::init_scaled(config, seed, 1.0)
    }

    pub fn init_scaled(config: ModelConfig, seed: u64, gain: f64) -> Self {
        let mut params = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (spec, t) in params.layout.specs.iter().zip(params.tensors.iter_mut()) {
            let bound = match spec.kind {
                TensorKind::Embedding | TensorKind::Position => 0.5,
                TensorKind::Attention | TensorKind::FeedForward | TensorKind::Projection => {
                    (3.0 / spec.rows as f64).sqrt()
                }
                _ => continue,
            } * gain;
            for v in &mut t.data {
                *v = rng.random_range(-bound..bound);
            }
        }
        params
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.layout.specs
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn output_weight_mut(&mut self) -> &mut Mat {
        &mut self.tensors[self.layout.out_w]
    }

    pub fn output_bias_mut(&mut self) -> &mut Mat {
        &mut self.tensors[self.layout.out_b]
    }

    fn layer_norm(&self, tape: &mut Tape, x: NodeId, idx: LayerNormIdx) -> NodeId {
        let g = tape.param(idx.gamma);
        let b = tape.param(idx.beta);
        tape.layer_norm(x, g, b)
    }

    fn attention(&self, tape: &mut Tape, query_src: NodeId, kv_src: NodeId, idx: AttnIdx, causal: bool) -> NodeId {
        let (wq, wk, wv, wo) = (
            tape.param(idx.q),
            tape.param(idx.k),
            tape.param(idx.v),
            tape.param(idx.o),
        );
        let q = tape.matmul(query_src, wq);
        let k = tape.matmul(kv_src, wk);
        let v = tape.matmul(kv_src, wv);
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let heads: Vec<NodeId> = (0..self.config.n_heads)
            .map(|h| {
                let (qh, kh, vh) = if self.config.n_heads == 1 {
                    (q, k, v)
                } else {
                    (
                        tape.slice_cols(q, h * dh, dh),
                        tape.slice_cols(k, h * dh, dh),
                        tape.slice_cols(v, h * dh, dh),
                    )
                };
                let scores = tape.matmul_t(qh, kh);
                let scores = tape.scale(scores, scale);
                let weights = tape.softmax(scores, causal);
                tape.matmul(weights, vh)
            })
            .collect();
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        };
        tape.matmul(joined, wo)
    }

    fn feed_forward(&self, tape: &mut Tape, x: NodeId, idx: FfIdx) -> NodeId {
        let (w1, b1, w2, b2) = (
            tape.param(idx.w1),
            tape.param(idx.b1),
            tape.param(idx.w2),
            tape.param(idx.b2),
        );
        let h = tape.matmul(x, w1);
        let h = tape.add_bias(h, b1);
        let h = tape.relu(h);
        let o = tape.matmul(h, w2);
        tape.add_bias(o, b2)
    }

    fn embed(&self, tape: &mut Tape, ids: &[usize], pos_param: usize) -> NodeId {
        let tok = tape.gather(self.layout.tok_emb, ids);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = tape.gather(pos_param, &positions);
        tape.add(tok, pos)
    }

    /// Encoder states for a source sequence (`src.len() <= max_len`).
    pub fn encode(&self, tape: &mut Tape, src: &[usize]) -> NodeId {
        let mut x = self.embed(tape, src, self.layout.enc_pos);
        for layer in &self.layout.enc {
            let h = self.layer_norm(tape, x, layer.ln_attn);
            let a = self.attention(tape, h, h, layer.attn, false);
            x = tape.add(x, a);
            let h = self.layer_norm(tape, x, layer.ln_ff);
            let f = self.feed_forward(tape, h, layer.ff);
            x = tape.add(x, f);
        }
        self.layer_norm(tape, x, self.layout.enc_ln)
    }

    /// Decoder logits (one row per decoder input position).
    pub fn decode_logits(&self, tape: &mut Tape, memory: NodeId, tgt_in: &[usize]) -> NodeId {
        let hidden = self.decoder_hidden(tape, memory, tgt_in);
        self.project(tape, hidden)
    }

    /// Logits for the final decoder position only.
    pub fn last_logits(&self, tape: &mut Tape, memory: NodeId, tgt_in: &[usize]) -> NodeId {
        let hidden = self.decoder_hidden(tape, memory, tgt_in);
        let last = tape.slice_rows(hidden, tgt_in.len() - 1, 1);
        self.project(tape, last)
    }

    fn decoder_hidden(&self, tape: &mut Tape, memory: NodeId, tgt_in: &[usize]) -> NodeId {
        let mut y = self.embed(tape, tgt_in, self.layout.dec_pos);
        for layer in &self.layout.dec {
            let h = self.layer_norm(tape, y, layer.ln_self);
            let a = self.attention(tape, h, h, layer.self_attn, true);
            y = tape.add(y, a);
            let h = self.layer_norm(tape, y, layer.ln_cross);
            let c = self.attention(tape, h, memory, layer.cross_attn, false);
            y = tape.add(y, c);
            let h = self.layer_norm(tape, y, layer.ln_ff);
            let f = self.feed_forward(tape, h, layer.ff);
            y = tape.add(y, f);
        }
        self.layer_norm(tape, y, self.layout.dec_ln)
    }

    fn project(&self, tape: &mut Tape, hidden: NodeId) -> NodeId {
        let w = tape.param(self.layout.out_w);
        let b = tape.param(self.layout.out_b);
        let logits = tape.matmul(hidden, w);
        tape.add_bias(logits, b)
    }
}
