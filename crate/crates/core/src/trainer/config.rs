use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vqg::{DecodeMode, NoiseConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Every knob of a training run. Serialized as flat `key = value` text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CycleConfig {
    #[serde(rename = "lambda_G")]
    pub lambda_g: f64,
    #[serde(rename = "lambda_C")]
    pub lambda_c: f64,
    #[serde(rename = "T_sim")]
    pub t_sim: f64,
    #[serde(rename = "A_iter")]
    pub a_iter: u64,
    #[serde(rename = "enable_Q_consistency")]
    pub enable_q_consistency: bool,
    #[serde(rename = "enable_A_consistency")]
    pub enable_a_consistency: bool,
    pub enable_gating: bool,
    pub enable_attention_consistency: bool,
    pub lambda_att: f64,
    pub noise_scale: f64,
    pub noise_enabled: bool,
    pub clip_norm: f64,
    pub vqg_learning_rate: f64,
    pub vqa_learning_rate: f64,
    pub max_gen_len: usize,
    /// Decoding for the cycle branch: 0 is greedy, positive values sample
    /// at that temperature.
    pub cycle_temperature: f64,
    pub seed: u64,

    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub batch_size: usize,
    /// Condition the generator on the region mean instead of attended features.
    pub use_unattended_features: bool,

    pub embed_dim: usize,
    pub question_hidden: usize,
    pub attention_dim: usize,
    pub fusion_dim: usize,
    pub vqg_encoder_dim: usize,
    pub vqg_hidden: usize,
}

impl Default for CycleConfig {
    fn default() -> Self {
        CycleConfig {
            lambda_g: 1.0,
            lambda_c: 0.5,
            t_sim: 0.9,
            a_iter: 5500,
            enable_q_consistency: false,
            enable_a_consistency: false,
            enable_gating: false,
            enable_attention_consistency: false,
            lambda_att: 0.0,
            noise_scale: 0.1,
            noise_enabled: true,
            clip_norm: 0.25,
            vqg_learning_rate: 0.0005,
            vqa_learning_rate: 0.01,
            max_gen_len: 20,
            cycle_temperature: 0.0,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            batch_size: 32,
            use_unattended_features: false,
            embed_dim: 32,
            question_hidden: 64,
            attention_dim: 64,
            fusion_dim: 64,
            vqg_encoder_dim: 300,
            vqg_hidden: 1024,
        }
    }
}

impl CycleConfig {
    /// Q-consistency + A-consistency + gating.
    pub fn full_cycle() -> Self {
        CycleConfig {
            enable_q_consistency: true,
            enable_a_consistency: true,
            enable_gating: true,
            ..CycleConfig::default()
        }
    }

    pub fn cycle_decode(&self) -> DecodeMode {
        if self.cycle_temperature > 0.0 {
            DecodeMode::Sample { temperature: self.cycle_temperature }
        } else {
            DecodeMode::Greedy
        }
    }

    pub fn noise(&self) -> NoiseConfig {
        NoiseConfig { scale: self.noise_scale, enabled: self.noise_enabled }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.enable_gating && !self.enable_a_consistency {
            return fail("enable_gating requires enable_A_consistency");
        }
        if !(-1.0..=1.0).contains(&self.t_sim) {
            return fail("T_sim must lie in [-1, 1]");
        }
        if self.lambda_g < 0.0 || self.lambda_c < 0.0 || self.lambda_att < 0.0 {
            return fail("loss weights must be non-negative");
        }
        if !(self.clip_norm > 0.0) {
            return fail("clip_norm must be positive");
        }
        if !(self.vqg_learning_rate > 0.0) || !(self.vqa_learning_rate > 0.0) {
            return fail("learning rates must be positive");
        }
        if !(self.noise_scale >= 0.0) {
            return fail("noise_scale must be non-negative");
        }
        if !(self.cycle_temperature >= 0.0) || !self.cycle_temperature.is_finite() {
            return fail("cycle_temperature must be finite and non-negative");
        }
        if self.max_gen_len < 2 {
            return fail("max_gen_len must be at least 2");
        }
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        let dims = [
            self.embed_dim,
            self.question_hidden,
            self.attention_dim,
            self.fusion_dim,
            self.vqg_encoder_dim,
            self.vqg_hidden,
        ];
        if dims.contains(&0) {
            return fail("model dimensions must be positive");
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: CycleConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
