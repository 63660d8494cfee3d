//! MAML pre-training: inner adaptation on each task's support set, outer
//! ADAM step on the summed query losses, with the inner step size
//! meta-learned alongside the weights.

use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::{AlgoError, Result};
use crate::models::{self, AdaptOpts, ModelParams, NetSpec, Target};
use crate::ndcore::{self, GradMode, Tape, Tensor};
use crate::stream::{self, rng_streams, seeded_rng, Pools, StreamConfig};

fn d_epochs() -> usize {
    3000
}
fn d_meta_batch() -> usize {
    8
}
fn d_shots() -> usize {
    5
}
fn d_eta() -> f64 {
    0.001
}
fn d_steps() -> usize {
    1
}
fn d_inner_lr() -> f64 {
    0.02
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    /// Outer iterations (one meta-batch each).
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    /// Tasks per meta-batch.
    #[serde(default = "d_meta_batch")]
    pub meta_batch: usize,
    /// Support examples per task; the rest of the draw is the query set.
    #[serde(default = "d_shots")]
    pub shots: usize,
    /// Outer ADAM learning rate.
    #[serde(default = "d_eta")]
    pub eta: f64,
    #[serde(default = "d_steps")]
    pub inner_steps: usize,
    /// Exact second-order meta-gradients by default.
    #[serde(default)]
    pub first_order: bool,
    #[serde(default = "d_inner_lr")]
    pub inner_lr_init: f64,
    /// Adapt only the head in the inner loop (ANIL-style pre-training).
    #[serde(default)]
    pub head_only: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: d_epochs(),
            meta_batch: d_meta_batch(),
            shots: d_shots(),
            eta: d_eta(),
            inner_steps: d_steps(),
            first_order: false,
            inner_lr_init: d_inner_lr(),
            head_only: false,
        }
    }
}

pub struct PretrainResult {
    pub params: ModelParams,
    /// Meta-loss after each outer step.
    pub loss_curve: Vec<f64>,
}

impl PretrainResult {
    pub fn final_meta_loss(&self) -> Option<f64> {
        self.loss_curve.last().copied()
    }
}

/// Meta-train an initialization on pretrain-family tasks. Zero epochs return
/// the freshly initialized parameters unchanged.
pub fn pretrain_maml(
    net: &NetSpec,
    stream_cfg: &StreamConfig,
    cfg: &PretrainConfig,
) -> Result<PretrainResult> {
    if cfg.meta_batch == 0 {
        return Err(AlgoError::Config("meta_batch must be >= 1".into()));
    }
    let pools = Pools::from_config(stream_cfg)?;
    let mut rng = seeded_rng(stream_cfg.seed, rng_streams::PRETRAIN);
    let mut phi = models::init_params(net, cfg.inner_lr_init)?;
    let mut adam = AdamState::new(phi.weight_count() + phi.log_inner_lr.len());
    let opts = AdaptOpts {
        steps: cfg.inner_steps,
        head_only: cfg.head_only,
        mode: if cfg.first_order {
            GradMode::FirstOrder
        } else {
            GradMode::Exact
        },
    };

    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let episode =
            stream::pretrain_episode(stream_cfg, &pools, cfg.meta_batch, cfg.shots, &mut rng)?;
        let tape = Tape::new();
        let bound = phi.bind(&tape);
        let mut total: Option<Tensor> = None;
        for task in &episode.tasks {
            let theta = models::inner_adapt_taped(
                &bound,
                &task.support_x,
                &Target::Labels(&task.support_y),
                &opts,
            )?;
            let logits = models::forward(&theta, &task.query_x)?;
            let task_loss = ndcore::softmax_cross_entropy(&logits, &task.query_y)?;
            total = Some(match total {
                None => task_loss,
                Some(t) => ndcore::add(&t, &task_loss)?,
            });
        }
        let meta_loss = ndcore::scale(
            &total.expect("meta_batch >= 1"),
            1.0 / cfg.meta_batch as f64,
        )?;
        let value = meta_loss.item()?;
        if !value.is_finite() || value > 1e3 {
            return Err(AlgoError::Training {
                epoch,
                msg: format!("meta-loss {value}"),
            });
        }

        // Gradients in flatten(true) order: per layer w then b, then log lrs.
        let mut wrt: Vec<&Tensor> = Vec::new();
        for l in &bound.layers {
            wrt.push(&l.w);
            wrt.push(&l.b);
        }
        for t in &bound.log_inner_lr {
            wrt.push(t);
        }
        let grads = tape.grad_wrt(&meta_loss, &wrt, false)?;
        let flat_g: Vec<f64> = grads
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect();
        let mut flat = phi.flatten(true);
        adam_step(&mut adam, &mut flat, &flat_g, cfg.eta)?;
        phi.load_flat(&flat, true)?;
        loss_curve.push(value);
    }
    Ok(PretrainResult {
        params: phi,
        loss_curve,
    })
}

/// Mean 1-step (or `opts.steps`) post-adaptation query accuracy over fresh
/// pretrain-family tasks; the meta-training lift diagnostic.
pub fn post_adaptation_accuracy(
    params: &ModelParams,
    stream_cfg: &StreamConfig,
    shots: usize,
    tasks: usize,
    opts: &AdaptOpts,
    eval_seed: u64,
) -> Result<f64> {
    let pools = Pools::from_config(stream_cfg)?;
    let mut rng = seeded_rng(eval_seed, rng_streams::PRETRAIN);
    let episode = stream::pretrain_episode(stream_cfg, &pools, tasks, shots, &mut rng)?;
    let mut total = 0.0;
    for task in &episode.tasks {
        let theta = models::inner_adapt(
            params,
            &task.support_x,
            &Target::Labels(&task.support_y),
            opts,
        )?;
        let logits = models::forward(&theta, &task.query_x)?;
        total += super::accuracy(&logits, &task.query_y);
    }
    Ok(total / tasks as f64)
}
