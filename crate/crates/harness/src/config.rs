//! TOML run configuration.

use std::path::{Path, PathBuf};

use moelab_core::balance::BiasMode;
use moelab_lm::{ModelConfig, TrainPlan};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{load_corpus, synthetic_text, Corpus};
use crate::error::{io_err, HarnessError, Result};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Byte corpus; when absent a synthetic corpus is generated.
    pub corpus: Option<PathBuf>,
    pub synthetic_bytes: usize,
    pub synthetic_seed: u64,
    pub split_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { corpus: None, synthetic_bytes: 1_200_000, synthetic_seed: 0, split_fraction: 0.1 }
    }
}

impl DataConfig {
    /// Relative corpus paths resolve against `base`.
    pub fn load(&self, base: Option<&Path>) -> Result<Corpus> {
        match &self.corpus {
            Some(p) => {
                let path = match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p.clone(),
                };
                load_corpus(&path, self.split_fraction)
            }
            None => Corpus::from_bytes(&synthetic_text(self.synthetic_seed, self.synthetic_bytes), self.split_fraction),
        }
    }
}

/// Training settings; omitted fields take the desk defaults for
/// `total_steps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_batches: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peak_lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_mode: Option<BiasMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub et_beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub et_warmup_steps: Option<u64>,
}

impl TrainConfig {
    pub fn steps(total_steps: u64, seed: u64) -> Self {
        Self {
            total_steps,
            seed,
            batch_size: None,
            eval_every: None,
            eval_batches: None,
            peak_lr: None,
            aux_alpha: None,
            bias_rate: None,
            bias_mode: None,
            et_beta: None,
            et_warmup_steps: None,
        }
    }
}

impl RunConfig {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Self {
        Self { schema_version: CONFIG_SCHEMA_VERSION, data: DataConfig::default(), model, train }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text).map_err(|e| HarnessError::Schema(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(HarnessError::Schema(format!(
                "schema_version {} unsupported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let d = &self.data;
        if !(d.split_fraction > 0.0 && d.split_fraction < 1.0) {
            return Err(HarnessError::Schema(format!("data.split_fraction {} outside (0, 1)", d.split_fraction)));
        }
        if d.corpus.is_none() && d.synthetic_bytes == 0 {
            return Err(HarnessError::Schema("data.synthetic_bytes must be positive".into()));
        }
        self.model.validate()?;
        self.plan()?.validate()?;
        Ok(())
    }

    pub fn plan(&self) -> Result<TrainPlan> {
        let t = &self.train;
        let mut p = TrainPlan::desk(t.total_steps, &self.model);
        p.seed = t.seed;
        if let Some(v) = t.batch_size {
            p.batch_size = v;
        }
        if let Some(v) = t.eval_every {
            p.eval_every = v;
        }
        if let Some(v) = t.eval_batches {
            p.eval_batches = v;
        }
        if let Some(v) = t.peak_lr {
            p.lr.peak = v;
        }
        if let Some(v) = t.aux_alpha {
            p.aux_alpha = v;
        }
        if let Some(v) = t.bias_rate {
            p.bias_rate = v;
        }
        if let Some(v) = t.bias_mode {
            p.bias_mode = v;
        }
        if let Some(v) = t.et_beta {
            p.et_beta = v;
        }
        if let Some(v) = t.et_warmup_steps {
            p.et_warmup_steps = v;
        }
        Ok(p)
    }

    /// SHA-256 of the model configuration's JSON form.
    pub fn model_digest(&self) -> String {
        model_digest(&self.model)
    }
}

pub fn model_digest(model: &ModelConfig) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(model).expect("config serializes")))
}
