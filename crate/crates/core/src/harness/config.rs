use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{HarnessError, PipelineVariant};
use crate::acquisition::ScheduleConfig;
use crate::reflection::{DpoToggles, ReflectionConfig};
use crate::student::ModelConfig;
use crate::teacher::TeacherConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_questions: usize,
    pub n_options: usize,
    pub n_attributes: usize,
    /// Question file to use instead of a generated world; split by id hash.
    pub questions: Option<PathBuf>,
    /// Pre-curated traces for the training questions.
    pub traces: Option<PathBuf>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_questions: 500,
            n_options: 4,
            n_attributes: 12,
            questions: None,
            traces: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceSourceKind {
    Oracle,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSection {
    #[serde(default = "default_source")]
    pub source: TraceSourceKind,
    #[serde(flatten)]
    pub remote: TeacherConfig,
}

fn default_source() -> TraceSourceKind {
    TraceSourceKind::Oracle
}

impl Default for TeacherSection {
    fn default() -> Self {
        Self {
            source: TraceSourceKind::Oracle,
            remote: TeacherConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub max_len: usize,
    pub vocab_cap: usize,
    /// Generation limit used by evaluation chains.
    pub max_new_tokens: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            d_model: m.d_model,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            enc_layers: m.enc_layers,
            dec_layers: m.dec_layers,
            max_len: m.max_len,
            vocab_cap: 8000,
            max_new_tokens: 64,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: 0,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            max_len: self.max_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub name: String,
    pub seeds: Vec<u64>,
    pub variants: Vec<PipelineVariant>,
    /// Whether the full variant goes through self-reflection at all.
    pub reflect: bool,
    /// DPO stage toggles as `[recall, analyze]`, applied to the full variant.
    /// `[false, false]` is the acquisition-only baseline and always runs.
    pub toggles: Vec<[bool; 2]>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seeds: vec![1],
            variants: vec![PipelineVariant::Full],
            reflect: true,
            toggles: vec![[true, true]],
        }
    }
}

impl ExperimentSection {
    /// Distinct enabled toggle rows, in configured order.
    pub fn dpo_rows(&self) -> Vec<DpoToggles> {
        let mut rows: Vec<DpoToggles> = Vec::new();
        for [recall, analyze] in &self.toggles {
            let t = DpoToggles {
                recall: *recall,
                analyze: *analyze,
            };
            if t.any() && !rows.contains(&t) {
                rows.push(t);
            }
        }
        rows
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub teacher: TeacherSection,
    pub model: ModelSection,
    pub schedule: ScheduleConfig,
    pub reflection: ReflectionConfig,
    pub experiment: ExperimentSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.schedule
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.reflection
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let mut model = self.model.model_config();
        model.vocab_size = crate::student::vocab::SPECIALS.len() + 1;
        model.validate().map_err(HarnessError::Config)?;
        if self.model.max_new_tokens == 0 {
            return bad("model.max_new_tokens must be positive".into());
        }
        if self.experiment.seeds.is_empty() {
            return bad("experiment.seeds is empty".into());
        }
        if self.experiment.variants.is_empty() {
            return bad("experiment.variants is empty".into());
        }
        if self.world.questions.is_none() && self.world.n_questions < 10 {
            return bad("world.n_questions must be at least 10".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.schedule.lr, 5e-4);
        assert_eq!(back.reflection.beta, 0.5);
        assert_eq!(back.teacher.remote.temperature, 0.8);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("[schedule]\nintervall = 3\n").is_err());
        assert!(ExperimentConfig::from_toml("[model]\nd_model = 30\nn_heads = 4\n").is_err());
        let cfg =
            ExperimentConfig::from_toml("[experiment]\nseeds = [1, 2, 3]\nvariants = [\"full\", \"summarize_only\"]\n")
                .unwrap();
        assert_eq!(cfg.experiment.seeds, vec![1, 2, 3]);
    }
}
