//! Versioned JSON experiment configuration: one file drives the pretrain,
//! run, search and report phases.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use osaka_core::algorithms::{LearnerSpec, PretrainConfig};
use osaka_core::models::{Activation, NetSpec};
use osaka_core::stream::StreamConfig;

/// Marker for errors that should exit with code 1 (bad configuration) rather
/// than 2 (runtime failure).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_err<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(ConfigError(msg.into()).into())
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

fn default_activation() -> Activation {
    Activation::Relu
}

fn default_model_seed() -> u64 {
    1234
}

/// Architecture block; input/output dims come from the stream profile.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelBlock {
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_model_seed")]
    pub seed: u64,
    #[serde(default)]
    pub shared_inner_lr: bool,
}

impl Default for ModelBlock {
    fn default() -> Self {
        ModelBlock {
            hidden_dims: default_hidden(),
            activation: default_activation(),
            seed: default_model_seed(),
            shared_inner_lr: false,
        }
    }
}

fn default_ckpt() -> PathBuf {
    PathBuf::from("pretrained.ckpt")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainBlock {
    #[serde(flatten)]
    pub config: PretrainConfig,
    #[serde(default = "default_ckpt")]
    pub checkpoint: PathBuf,
}

impl Default for PretrainBlock {
    fn default() -> Self {
        PretrainBlock {
            config: PretrainConfig::default(),
            checkpoint: default_ckpt(),
        }
    }
}

/// Hyperparameter grids for random search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchSpace {
    pub eta: Vec<f64>,
    pub batch_size: Vec<usize>,
    pub inner_lr_init: Vec<f64>,
    pub inner_steps: Vec<usize>,
    pub first_order: Vec<bool>,
    pub mc_samples: Vec<usize>,
    pub beta: Vec<f64>,
    pub sigma0: Vec<f64>,
    pub gamma: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            eta: vec![0.0001, 0.0005, 0.001, 0.005, 0.01],
            batch_size: vec![1, 2, 4, 8, 16],
            inner_lr_init: vec![0.0005, 0.001, 0.005, 0.01, 0.05, 0.1, 0.5],
            inner_steps: vec![1, 2, 4, 8, 16],
            first_order: vec![true, false],
            mc_samples: vec![5],
            beta: vec![0.5, 1.0, 10.0],
            sigma0: vec![0.001, 0.01, 0.1],
            gamma: vec![0.25, 0.5, 1.0, 2.0, 3.0, 5.0],
            lambda: vec![0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 2.5, 3.0],
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<(), String> {
        let empties = [
            ("eta", self.eta.is_empty()),
            ("batch_size", self.batch_size.is_empty()),
            ("inner_lr_init", self.inner_lr_init.is_empty()),
            ("inner_steps", self.inner_steps.is_empty()),
            ("first_order", self.first_order.is_empty()),
            ("mc_samples", self.mc_samples.is_empty()),
            ("beta", self.beta.is_empty()),
            ("sigma0", self.sigma0.is_empty()),
            ("gamma", self.gamma.is_empty()),
            ("lambda", self.lambda.is_empty()),
        ];
        for (name, empty) in empties {
            if empty {
                return Err(format!("search space grid `{name}` is empty"));
            }
        }
        Ok(())
    }
}

fn default_budget() -> usize {
    20
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchBlock {
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default)]
    pub space: SearchSpace,
}

impl Default for SearchBlock {
    fn default() -> Self {
        SearchBlock {
            budget: default_budget(),
            space: SearchSpace::default(),
        }
    }
}

fn default_version() -> u32 {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/out")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub stream: StreamConfig,
    #[serde(default)]
    pub model: ModelBlock,
    #[serde(default)]
    pub pretrain: PretrainBlock,
    #[serde(default)]
    pub learners: Vec<LearnerSpec>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub search: SearchBlock,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        if cfg.version != 1 {
            return config_err(format!("unsupported config version {}", cfg.version));
        }
        // OSAKA_SEED overrides the profile seed.
        if let Ok(s) = std::env::var("OSAKA_SEED") {
            let seed: u64 = s
                .parse()
                .map_err(|_| ConfigError(format!("OSAKA_SEED must be an integer, got {s:?}")))?;
            cfg.stream.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if let Err(e) = self.stream.validate() {
            return config_err(e.to_string());
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.seeds {
            if !seen.insert(*s) {
                return config_err(format!("duplicate seed {s}"));
            }
        }
        if let Err(e) = self.search.space.validate() {
            return config_err(e);
        }
        let mut names = std::collections::BTreeSet::new();
        for l in &self.learners {
            if !names.insert(l.display_name().to_string()) {
                return config_err(format!("duplicate learner name {}", l.display_name()));
            }
        }
        Ok(())
    }

    /// Network architecture implied by the stream profile and model block.
    pub fn net_spec(&self) -> NetSpec {
        NetSpec {
            input_dim: self.stream.dim,
            hidden_dims: self.model.hidden_dims.clone(),
            output_dim: self.stream.ways,
            activation: self.model.activation,
            seed: self.model.seed,
            shared_inner_lr: self.model.shared_inner_lr,
        }
    }

    /// FNV-1a hash of the serialized config, stamped into run summaries.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let json = r#"{ "stream": {
            "alpha": 0.98, "episode_length": 100, "mixture": [0.5, 0.25, 0.25],
            "ways": 5, "samples_per_step": 10, "dim": 16, "noise": 0.3,
            "pools": { "n_pretrain": 64, "n_ood": 64, "mu_shift": 1.0 }, "seed": 7
        } }"#;
        let cfg: ExperimentConfig = serde_json::from_str(json).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.version, 1);
        assert_eq!(cfg.net_spec().hidden_dims, vec![64, 64]);
        assert_eq!(cfg.search.space.gamma, vec![0.25, 0.5, 1.0, 2.0, 3.0, 5.0]);
        assert_eq!(
            cfg.search.space.lambda,
            vec![0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 2.5, 3.0]
        );
    }

    #[test]
    fn duplicate_seeds_rejected() {
        let mut cfg = ExperimentConfig {
            version: 1,
            stream: StreamConfig::default_profile(),
            model: ModelBlock::default(),
            pretrain: PretrainBlock::default(),
            learners: vec![],
            seeds: vec![1, 2, 1],
            output_dir: PathBuf::from("x"),
            search: SearchBlock::default(),
        };
        assert!(cfg.validate().is_err());
        cfg.seeds = vec![1, 2, 3];
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn content_hash_stable() {
        let cfg = ExperimentConfig {
            version: 1,
            stream: StreamConfig::default_profile(),
            model: ModelBlock::default(),
            pretrain: PretrainBlock::default(),
            learners: vec![],
            seeds: vec![0],
            output_dir: PathBuf::from("x"),
            search: SearchBlock::default(),
        };
        assert_eq!(cfg.content_hash(), cfg.content_hash());
    }
}
