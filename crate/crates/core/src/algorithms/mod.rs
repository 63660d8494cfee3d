//! Online learners behind one interface: predict on the incoming batch with
//! state as of the previous step, incur the loss, then update.

mod adam;
mod baselines;
mod bgd;
mod cmaml;
mod pretrain;

pub use adam::{adam_step, AdamState};
pub use baselines::{
    BgdLearner, FineTuningLearner, MamlLearner, MetaBgdLearner, OnlineAdamLearner,
};
pub use bgd::{bgd_step, BgdState};
pub use cmaml::{
    boundary_statistic, cmaml_no_pap_step, cmaml_step, detects_boundary, update_modulation,
    CmamlConfig, CmamlState,
};
pub use pretrain::{post_adaptation_accuracy, pretrain_maml, PretrainConfig, PretrainResult};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{self, ModelError, ModelParams, NetSpec};
use crate::ndcore::{self, NdError, Tensor};
use crate::stream::{rng_streams, seeded_rng, StepBatch, StreamError};

#[derive(Debug, Error)]
pub enum AlgoError {
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error("optimizer step: {0}")]
    Step(String),
    #[error("training diverged at epoch {epoch}: {msg}")]
    Training { epoch: usize, msg: String },
    #[error("configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, AlgoError>;

/// Per-step report from a learner's update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics {
    /// Loss incurred by the prediction made before this update.
    pub loss: f64,
    /// 0/1 accuracy of that prediction, averaged over the batch.
    pub accuracy: f64,
    pub detected_boundary: bool,
    /// Slow-weight learning-rate factor applied this step, when one was.
    pub modulation: Option<f64>,
}

/// The uniform online-learner contract. `predict` must only use state from
/// before the current step; feedback arrives through `update`.
pub trait Learner {
    fn predict(&self, x: &Tensor) -> Result<Tensor>;
    fn update(&mut self, batch: &StepBatch) -> Result<StepDiagnostics>;
    /// Snapshot of the slow weights (diagnostics only).
    fn slow_params(&self) -> ModelParams;
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let pred = ndcore::argmax_rows(logits);
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Cross-entropy loss and accuracy of `params` on a batch (plain values).
pub(crate) fn eval_loss_acc(params: &ModelParams, batch: &StepBatch) -> Result<(f64, f64)> {
    let logits = models::forward(params, &batch.x)?;
    let loss = ndcore::softmax_cross_entropy(&logits, &batch.y)?.item()?;
    Ok((loss, accuracy(&logits, &batch.y)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    OnlineAdam,
    FineTuning,
    Maml,
    Anil,
    Bgd,
    MetaBgd,
    Cmaml,
    CmamlNoPap,
}

impl LearnerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LearnerKind::OnlineAdam => "online_adam",
            LearnerKind::FineTuning => "fine_tuning",
            LearnerKind::Maml => "maml",
            LearnerKind::Anil => "anil",
            LearnerKind::Bgd => "bgd",
            LearnerKind::MetaBgd => "meta_bgd",
            LearnerKind::Cmaml => "cmaml",
            LearnerKind::CmamlNoPap => "cmaml_no_pap",
        }
    }

    /// Kinds that are meaningless without a pre-trained initialization.
    pub fn requires_checkpoint(&self) -> bool {
        matches!(
            self,
            LearnerKind::FineTuning | LearnerKind::Maml | LearnerKind::Anil
        )
    }
}

fn default_inner_lr() -> f64 {
    0.05
}
fn default_inner_steps() -> usize {
    1
}
fn default_gamma() -> f64 {
    1.0
}
fn default_lambda() -> f64 {
    1.0
}
fn default_first_order() -> bool {
    true
}
fn default_mc_samples() -> usize {
    5
}
fn default_beta() -> f64 {
    1.0
}
fn default_sigma0() -> f64 {
    0.01
}
fn default_true() -> bool {
    true
}
fn default_slope() -> f64 {
    1.0
}

/// JSON-safe (de)serialization of possibly-infinite thresholds: finite
/// values as numbers, the limits as the strings "inf" / "-inf".
pub mod serde_threshold {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Tag(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Tag(s) => match s.as_str() {
                "inf" | "+inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(serde::de::Error::custom(format!(
                    "expected a number, \"inf\" or \"-inf\", got {other:?}"
                ))),
            },
        }
    }
}

/// Learner block of the run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnerSpec {
    pub kind: LearnerKind,
    /// Display name; defaults to the kind tag.
    #[serde(default)]
    pub name: Option<String>,
    /// Step size (outer step size for meta-learners).
    pub eta: f64,
    #[serde(default = "default_inner_lr")]
    pub inner_lr_init: f64,
    #[serde(default = "default_inner_steps")]
    pub inner_steps: usize,
    #[serde(default = "default_gamma", with = "serde_threshold")]
    pub gamma: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_first_order")]
    pub first_order: bool,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_sigma0")]
    pub sigma0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain_checkpoint: Option<PathBuf>,
    /// Update-modulation ablation flag; `false` pins the factor to 1.
    #[serde(default = "default_true")]
    pub update_modulation: bool,
    #[serde(default = "default_slope")]
    pub modulation_slope: f64,
}

impl LearnerSpec {
    pub fn new(kind: LearnerKind, eta: f64) -> LearnerSpec {
        LearnerSpec {
            kind,
            name: None,
            eta,
            inner_lr_init: default_inner_lr(),
            inner_steps: default_inner_steps(),
            gamma: default_gamma(),
            lambda: default_lambda(),
            first_order: default_first_order(),
            mc_samples: default_mc_samples(),
            beta: default_beta(),
            sigma0: default_sigma0(),
            pretrain_checkpoint: None,
            update_modulation: default_true(),
            modulation_slope: default_slope(),
        }
    }

    pub fn display_name(&self) -> &str {
        self.name.as_deref().unwrap_or_else(|| self.kind.as_str())
    }

    fn cmaml_config(&self) -> CmamlConfig {
        CmamlConfig {
            eta: self.eta,
            inner_steps: self.inner_steps,
            gamma: self.gamma,
            lambda: self.lambda,
            modulation_slope: self.modulation_slope,
            update_modulation: self.update_modulation,
            first_order: self.first_order,
            split_fraction: 0.5,
        }
    }
}

/// Build a learner from its config block. `checkpoint` supplies the
/// pre-trained initialization (mandatory for fine-tuning, MAML and ANIL);
/// without one, parameters are freshly initialized from `net` and `seed`.
pub fn make_learner(
    spec: &LearnerSpec,
    net: &NetSpec,
    checkpoint: Option<ModelParams>,
    seed: u64,
) -> Result<Box<dyn Learner>> {
    if spec.kind.requires_checkpoint() && checkpoint.is_none() {
        return Err(AlgoError::Config(format!(
            "learner kind {} requires a pretrain checkpoint",
            spec.kind.as_str()
        )));
    }
    let init = match checkpoint {
        Some(p) => p,
        None => {
            let net = NetSpec {
                seed,
                ..net.clone()
            };
            models::init_params(&net, spec.inner_lr_init)?
        }
    };
    let rng = seeded_rng(seed, rng_streams::LEARNER);
    Ok(match spec.kind {
        LearnerKind::OnlineAdam => Box::new(OnlineAdamLearner::new(init, spec.eta)),
        LearnerKind::FineTuning => Box::new(FineTuningLearner::new(init, spec.eta)),
        LearnerKind::Maml => Box::new(MamlLearner::new(
            init,
            spec.inner_steps,
            spec.first_order,
            false,
        )),
        LearnerKind::Anil => Box::new(MamlLearner::new(
            init,
            spec.inner_steps,
            spec.first_order,
            true,
        )),
        LearnerKind::Bgd => Box::new(BgdLearner::new(
            init,
            spec.sigma0,
            spec.beta,
            spec.mc_samples,
            rng,
        )?),
        LearnerKind::MetaBgd => Box::new(MetaBgdLearner::new(
            init,
            spec.sigma0,
            spec.beta,
            spec.mc_samples,
            spec.inner_steps,
            rng,
        )?),
        LearnerKind::Cmaml => {
            let cfg = spec.cmaml_config();
            cfg.validate()?;
            Box::new(baselines::CmamlLearner::new(init, cfg, rng, false))
        }
        LearnerKind::CmamlNoPap => {
            let cfg = spec.cmaml_config();
            cfg.validate()?;
            Box::new(baselines::CmamlLearner::new(init, cfg, rng, true))
        }
    })
}

#[cfg(test)]
mod tests;
