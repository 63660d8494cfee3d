//! Continual-MAML: prolonged adaptation of fast weights between detected
//! context shifts, with modulated consolidation into the slow weights at
//! boundaries (full buffered variant), plus the ablation without a prolonged
//! adaptation phase (fast weights reset every step).

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, AdamState};
use super::{eval_loss_acc, AlgoError, Result, StepDiagnostics};
use crate::models::{self, AdaptOpts, ModelParams, Target};
use crate::ndcore::{self, GradMode, Tape, Tensor};
use crate::stream::StepBatch;

/// Hyperparameters: outer rate, boundary threshold gamma, modulation center
/// lambda. Infinite gamma values select the limits (`+inf` never detects,
/// `-inf` always detects); finite gamma must be positive.
#[derive(Debug, Clone)]
pub struct CmamlConfig {
    pub eta: f64,
    pub inner_steps: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub modulation_slope: f64,
    pub update_modulation: bool,
    pub first_order: bool,
    /// Fraction of the buffer used as the consolidation train split.
    pub split_fraction: f64,
}

impl Default for CmamlConfig {
    fn default() -> Self {
        CmamlConfig {
            eta: 0.001,
            inner_steps: 1,
            gamma: 1.0,
            lambda: 1.0,
            modulation_slope: 1.0,
            update_modulation: true,
            first_order: true,
            split_fraction: 0.5,
        }
    }
}

impl CmamlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma.is_finite() && self.gamma <= 0.0 {
            return Err(AlgoError::Config(format!(
                "gamma must be positive (or +-inf for the limits), got {}",
                self.gamma
            )));
        }
        if !(self.lambda > 0.0) {
            return Err(AlgoError::Config(format!(
                "lambda must be > 0, got {}",
                self.lambda
            )));
        }
        if self.inner_steps == 0 {
            return Err(AlgoError::Config("inner_steps must be >= 1".into()));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(AlgoError::Config("split_fraction must be in (0, 1)".into()));
        }
        Ok(())
    }

    fn grad_mode(&self) -> GradMode {
        if self.first_order {
            GradMode::FirstOrder
        } else {
            GradMode::Exact
        }
    }
}

/// Soft boundary-update factor `g_lambda(l) = sigmoid(slope * (l - lambda))`:
/// strictly increasing in the loss, 1/2 at `l = lambda`, approaching 1 for
/// out-of-distribution losses and 0 for well-fit data.
pub fn update_modulation(loss: f64, lambda: f64, slope: f64) -> f64 {
    1.0 / (1.0 + (-slope * (loss - lambda)).exp())
}

/// Loss improvement of the one-step virtual model over the current fast
/// weights; a context shift is declared when it reaches `gamma`.
pub fn boundary_statistic(current_loss: f64, virtual_loss: f64) -> f64 {
    current_loss - virtual_loss
}

pub fn detects_boundary(statistic: f64, gamma: f64) -> bool {
    !(statistic < gamma)
}

/// Slow weights, fast weights, and the buffer of batches seen since the last
/// detected boundary.
pub struct CmamlState {
    pub phi: ModelParams,
    pub theta: ModelParams,
    pub buffer: Vec<StepBatch>,
    adam: AdamState,
    rng: ChaCha8Rng,
}

impl CmamlState {
    /// Fast weights start at the slow weights (`theta_0 = phi`).
    pub fn new(phi: ModelParams, rng: ChaCha8Rng) -> CmamlState {
        let adam = AdamState::new(phi.weight_count());
        let theta = phi.clone();
        CmamlState {
            phi,
            theta,
            buffer: Vec::new(),
            adam,
            rng,
        }
    }
}

fn one_step_from(phi: &ModelParams, batch: &StepBatch) -> Result<ModelParams> {
    Ok(models::inner_adapt(
        phi,
        &batch.x,
        &Target::Labels(&batch.y),
        &AdaptOpts {
            steps: 1,
            head_only: false,
            mode: GradMode::FirstOrder,
        },
    )?)
}

/// Pool every example in the buffer and split it uniformly at random into
/// train/test parts. A single-example buffer reuses the example on both
/// sides.
fn split_buffer(
    buffer: &[StepBatch],
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> ((Tensor, Vec<usize>), (Tensor, Vec<usize>)) {
    let dim = buffer[0].x.shape()[1];
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::new();
    for b in buffer {
        for r in 0..b.x.shape()[0] {
            let row = b.x.data()[r * dim..(r + 1) * dim].to_vec();
            rows.push((row, b.y[r]));
        }
    }
    rows.shuffle(rng);
    let n = rows.len();
    let n_train = if n == 1 {
        1
    } else {
        ((fraction * n as f64).round() as usize).clamp(1, n - 1)
    };
    let take = |slice: &[(Vec<f64>, usize)]| -> (Tensor, Vec<usize>) {
        let mut x = Vec::with_capacity(slice.len() * dim);
        let mut y = Vec::with_capacity(slice.len());
        for (row, lab) in slice {
            x.extend_from_slice(row);
            y.push(*lab);
        }
        (Tensor::new(slice.len(), dim, x).expect("split shape"), y)
    };
    if n == 1 {
        (take(&rows), take(&rows))
    } else {
        (take(&rows[..n_train]), take(&rows[n_train..]))
    }
}

/// ADAM update of the slow weights with the given gradient tensors and
/// (modulated) learning rate.
fn consolidate(
    phi: &mut ModelParams,
    adam: &mut AdamState,
    grads: &[Tensor],
    lr: f64,
) -> Result<()> {
    let mut flat = phi.flatten(false);
    let flat_g: Vec<f64> = grads
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    adam_step(adam, &mut flat, &flat_g, lr)?;
    phi.load_flat(&flat, false)?;
    Ok(())
}

fn weight_leaves(bound: &ModelParams) -> Vec<&Tensor> {
    bound.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
}

/// One step of the full buffered variant.
///
/// Incur the loss at the previous fast weights, then compare against a
/// one-step virtual model from the slow weights. Below `gamma`: keep
/// fine-tuning the fast weights and buffer the batch. At or above `gamma`:
/// fast-adapt on a random train split of the buffer, ADAM-update the slow
/// weights on the test split with rate `eta * g_lambda(test loss)`, clear the
/// buffer, and restart the fast weights one step from the slow weights on the
/// current batch. An empty buffer skips the consolidation but still resets.
pub fn cmaml_step(
    state: &mut CmamlState,
    cfg: &CmamlConfig,
    batch: &StepBatch,
) -> Result<StepDiagnostics> {
    let (loss, accuracy) = eval_loss_acc(&state.theta, batch)?;
    let theta_virtual = one_step_from(&state.phi, batch)?;
    let (virtual_loss, _) = eval_loss_acc(&theta_virtual, batch)?;
    let stat = boundary_statistic(loss, virtual_loss);

    if !detects_boundary(stat, cfg.gamma) {
        state.theta = models::inner_adapt(
            &state.theta,
            &batch.x,
            &Target::Labels(&batch.y),
            &AdaptOpts {
                steps: 1,
                head_only: false,
                mode: GradMode::FirstOrder,
            },
        )?;
        state.buffer.push(batch.clone());
        return Ok(StepDiagnostics {
            loss,
            accuracy,
            detected_boundary: false,
            modulation: None,
        });
    }

    let mut modulation = None;
    if !state.buffer.is_empty() {
        let ((train_x, train_y), (test_x, test_y)) =
            split_buffer(&state.buffer, cfg.split_fraction, &mut state.rng);
        let tape = Tape::new();
        let bound = state.phi.bind(&tape);
        let adapted = models::inner_adapt_taped(
            &bound,
            &train_x,
            &Target::Labels(&train_y),
            &AdaptOpts {
                steps: cfg.inner_steps,
                head_only: false,
                mode: cfg.grad_mode(),
            },
        )?;
        let test_logits = models::forward(&adapted, &test_x)?;
        let test_loss_t = ndcore::softmax_cross_entropy(&test_logits, &test_y)?;
        let test_loss = test_loss_t.item()?;
        let grads = tape.grad_wrt(&test_loss_t, &weight_leaves(&bound), false)?;
        let factor = if cfg.update_modulation {
            update_modulation(test_loss, cfg.lambda, cfg.modulation_slope)
        } else {
            1.0
        };
        consolidate(&mut state.phi, &mut state.adam, &grads, cfg.eta * factor)?;
        modulation = Some(factor);
    }
    state.buffer.clear();
    state.theta = one_step_from(&state.phi, batch)?;
    Ok(StepDiagnostics {
        loss,
        accuracy,
        detected_boundary: true,
        modulation,
    })
}

/// One step of the variant without the prolonged adaptation phase.
///
/// Fast weights are restarted from the slow weights on every step. When no
/// boundary is detected, the slow weights take a modulated ADAM step along
/// the previous fast weights' gradient on the current batch; a detected
/// boundary skips the update (the previous fast weights belong to the old
/// context).
pub fn cmaml_no_pap_step(
    state: &mut CmamlState,
    cfg: &CmamlConfig,
    batch: &StepBatch,
) -> Result<StepDiagnostics> {
    let (loss, accuracy) = eval_loss_acc(&state.theta, batch)?;
    let theta_prev = std::mem::replace(&mut state.theta, state.phi.clone());
    // Reset from the pre-update slow weights.
    let theta_new = one_step_from(&state.phi, batch)?;
    let (new_loss, _) = eval_loss_acc(&theta_new, batch)?;
    let detected = detects_boundary(boundary_statistic(loss, new_loss), cfg.gamma);

    let mut modulation = None;
    if !detected {
        let tape = Tape::new();
        let bound = theta_prev.bind(&tape);
        let logits = models::forward(&bound, &batch.x)?;
        let loss_t = ndcore::softmax_cross_entropy(&logits, &batch.y)?;
        let grads = tape.grad_wrt(&loss_t, &weight_leaves(&bound), false)?;
        let factor = if cfg.update_modulation {
            update_modulation(loss, cfg.lambda, cfg.modulation_slope)
        } else {
            1.0
        };
        consolidate(&mut state.phi, &mut state.adam, &grads, cfg.eta * factor)?;
        modulation = Some(factor);
    }
    state.theta = theta_new;
    Ok(StepDiagnostics {
        loss,
        accuracy,
        detected_boundary: detected,
        modulation,
    })
}
