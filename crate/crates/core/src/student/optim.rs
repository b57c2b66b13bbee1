use serde::{Deserialize, Serialize};

use super::model::{Gradients, ModelParams};
use super::tape::Mat;
use super::{Result, StudentError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay. Moment estimates live here, not in the
/// model, so a model can be snapshotted independently of optimizer state.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ModelParams) -> Self {
        let zeros = || params.tensors.iter().map(|t| Mat::zeros(t.rows, t.cols)).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients, lr: f64) -> Result<()> {
        let shapes_match = params.tensors.len() == grads.tensors.len()
            && params.tensors.len() == self.m.len()
            && params.tensors.iter().zip(&grads.tensors).all(|(p, g)| p.same_shape(g));
        if !shapes_match {
            return Err(StudentError::ShapeMismatch);
        }
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, (p, g)) in params.tensors.iter_mut().zip(&grads.tensors).enumerate() {
            let (m, v) = (&mut self.m[i].data, &mut self.v[i].data);
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                p.data[j] -= lr * (update + weight_decay * p.data[j]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::student::model::ModelConfig;

    fn tiny() -> ModelParams {
        ModelParams::init(
            ModelConfig {
                vocab_size: 7,
                d_model: 4,
                n_heads: 2,
                d_ff: 8,
                enc_layers: 1,
                dec_layers: 1,
                max_len: 8,
            },
            9,
        )
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = tiny();
        let before = p.clone();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &Gradients::zeros_like(&before), 1e-2).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut p = tiny();
        let before = p.clone();
        let mut g = Gradients::zeros_like(&p);
        for t in &mut g.tensors {
            t.data.fill(0.3);
        }
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.step(&mut p, &g, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = tiny();
        let mut g = Gradients::zeros_like(&p);
        g.tensors.pop();
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        assert!(matches!(opt.step(&mut p, &g, 1e-3), Err(StudentError::ShapeMismatch)));
    }
}
