//! MLP parameter containers and adaptation primitives.
//!
//! `ModelParams` holds the slow weights (one weight matrix and bias row per
//! layer) together with per-layer `log_inner_lr` scalars whose exponentials
//! are the inner-loop step sizes, so positivity holds by construction.
//! `inner_adapt` produces fast weights from them, optionally staying
//! differentiable w.r.t. the slow weights and step sizes.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndcore::{self, GradMode, NdError, Tape, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error("invalid net spec: {0}")]
    Spec(String),
    #[error("spec mismatch: {0}")]
    SpecMismatch(String),
    #[error("adaptation failed at inner step {step}: {source}")]
    Adaptation { step: usize, source: NdError },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Architecture description; `seed` fully determines the initialization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub seed: u64,
    /// One shared inner step size instead of one per layer.
    #[serde(default)]
    pub shared_inner_lr: bool,
}

impl NetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(ModelError::Spec("all dimensions must be >= 1".into()));
        }
        Ok(())
    }

    /// Layer dimension pairs `(fan_in, fan_out)` in order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Clone)]
pub struct Layer {
    pub w: Tensor,
    pub b: Tensor,
}

/// Slow weights plus per-layer (or shared) log inner step sizes.
#[derive(Clone)]
pub struct ModelParams {
    pub spec: NetSpec,
    pub layers: Vec<Layer>,
    pub log_inner_lr: Vec<Tensor>,
}

impl ModelParams {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Weight-and-bias parameter count (inner-lr scalars not included).
    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.numel() + l.b.numel()).sum()
    }

    /// Log inner step size tensor governing layer `i`.
    pub fn log_lr(&self, i: usize) -> &Tensor {
        if self.log_inner_lr.len() == 1 {
            &self.log_inner_lr[0]
        } else {
            &self.log_inner_lr[i]
        }
    }

    /// Inner step sizes per layer, `exp(log_inner_lr)`.
    pub fn inner_lrs(&self) -> Vec<f64> {
        (0..self.n_layers())
            .map(|i| self.log_lr(i).data()[0].exp())
            .collect()
    }

    /// Bind every tensor as a parameter leaf on `tape`.
    pub fn bind(&self, tape: &Tape) -> ModelParams {
        ModelParams {
            spec: self.spec.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    w: tape.leaf(&l.w),
                    b: tape.leaf(&l.b),
                })
                .collect(),
            log_inner_lr: self.log_inner_lr.iter().map(|t| tape.leaf(t)).collect(),
        }
    }

    pub fn detach(&self) -> ModelParams {
        ModelParams {
            spec: self.spec.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    w: l.w.detach(),
                    b: l.b.detach(),
                })
                .collect(),
            log_inner_lr: self.log_inner_lr.iter().map(Tensor::detach).collect(),
        }
    }

    /// Flatten in layer order (`w` row-major then `b` per layer), optionally
    /// followed by the log inner step sizes.
    pub fn flatten(&self, include_inner_lr: bool) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.w.data());
            out.extend_from_slice(l.b.data());
        }
        if include_inner_lr {
            for t in &self.log_inner_lr {
                out.extend_from_slice(t.data());
            }
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten); shapes come from `self`.
    pub fn load_flat(&mut self, data: &[f64], include_inner_lr: bool) -> Result<()> {
        let expect = self.weight_count()
            + if include_inner_lr {
                self.log_inner_lr.len()
            } else {
                0
            };
        if data.len() != expect {
            return Err(ModelError::SpecMismatch(format!(
                "flat vector length {} != parameter count {}",
                data.len(),
                expect
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let wn = l.w.numel();
            let [r, c] = l.w.shape();
            l.w = Tensor::new(r, c, data[off..off + wn].to_vec())?;
            off += wn;
            let bn = l.b.numel();
            l.b = Tensor::new(1, bn, data[off..off + bn].to_vec())?;
            off += bn;
        }
        if include_inner_lr {
            for t in &mut self.log_inner_lr {
                *t = Tensor::scalar(data[off]);
                off += 1;
            }
        }
        Ok(())
    }

    fn check_same_spec(&self, other: &ModelParams) -> Result<()> {
        if self.spec.layer_dims() != other.spec.layer_dims()
            || self.log_inner_lr.len() != other.log_inner_lr.len()
        {
            return Err(ModelError::SpecMismatch(
                "parameter containers have different architectures".into(),
            ));
        }
        Ok(())
    }
}

/// Weights ~ Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)), biases zero,
/// `log_inner_lr = ln(inner_lr_init)`; fully determined by `spec.seed`.
pub fn init_params(spec: &NetSpec, inner_lr_init: f64) -> Result<ModelParams> {
    spec.validate()?;
    if !(inner_lr_init > 0.0) {
        return Err(ModelError::Spec(format!(
            "inner_lr_init must be positive, got {inner_lr_init}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut layers = Vec::new();
    for (fan_in, fan_out) in spec.layer_dims() {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        layers.push(Layer {
            w: Tensor::new(fan_in, fan_out, data)?,
            b: Tensor::zeros(1, fan_out),
        });
    }
    let n_lr = if spec.shared_inner_lr {
        1
    } else {
        layers.len()
    };
    let log_inner_lr = vec![Tensor::scalar(inner_lr_init.ln()); n_lr];
    Ok(ModelParams {
        spec: spec.clone(),
        layers,
        log_inner_lr,
    })
}

/// Affine-activation chain; final layer affine (no activation).
pub fn forward(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    if x.shape()[1] != params.spec.input_dim {
        return Err(ModelError::SpecMismatch(format!(
            "input has {} columns, net expects {}",
            x.shape()[1],
            params.spec.input_dim
        )));
    }
    let n = params.layers.len();
    let mut h = x.clone();
    for (i, layer) in params.layers.iter().enumerate() {
        h = ndcore::add_row(&ndcore::matmul(&h, &layer.w)?, &layer.b)?;
        if i + 1 < n {
            h = match params.spec.activation {
                Activation::Relu => ndcore::relu(&h)?,
                Activation::Tanh => ndcore::tanh(&h)?,
            };
        }
    }
    Ok(h)
}

/// Supervision for one batch; the loss family follows the target type
/// (labels -> cross-entropy, values -> mean squared error).
pub enum Target<'a> {
    Labels(&'a [usize]),
    Values(&'a Tensor),
}

pub fn batch_loss(output: &Tensor, target: &Target) -> std::result::Result<Tensor, NdError> {
    match target {
        Target::Labels(y) => ndcore::softmax_cross_entropy(output, y),
        Target::Values(v) => ndcore::mse(output, v),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdaptOpts {
    pub steps: usize,
    pub head_only: bool,
    pub mode: GradMode,
}

impl Default for AdaptOpts {
    fn default() -> Self {
        AdaptOpts {
            steps: 1,
            head_only: false,
            mode: GradMode::FirstOrder,
        }
    }
}

/// Fast weights from repeated SGD steps `theta <- theta - exp(log_lr) * grad`,
/// starting at `phi`. Plain-value variant: `phi` is bound to a throwaway tape
/// internally and the result is detached.
pub fn inner_adapt(
    phi: &ModelParams,
    x: &Tensor,
    target: &Target,
    opts: &AdaptOpts,
) -> Result<ModelParams> {
    let tape = Tape::new();
    let bound = phi.bind(&tape);
    let theta = inner_adapt_taped(&bound, x, target, opts)?;
    Ok(theta.detach())
}

/// Differentiable variant: `phi` must already be tape-bound; the returned
/// fast weights stay on the tape, differentiable w.r.t. `phi` and its
/// `log_inner_lr` (exactly in `Exact` mode, through the update path only in
/// `FirstOrder` mode — the two coincide when the step size is zero).
pub fn inner_adapt_taped(
    phi: &ModelParams,
    x: &Tensor,
    target: &Target,
    opts: &AdaptOpts,
) -> Result<ModelParams> {
    if opts.steps == 0 {
        return Err(ModelError::Spec("inner_adapt requires steps >= 1".into()));
    }
    let mut theta = phi.clone();
    for step in 0..opts.steps {
        let out = forward(&theta, x)?;
        let loss =
            batch_loss(&out, target).map_err(|source| ModelError::Adaptation { step, source })?;

        let n = theta.layers.len();
        let moving: Vec<usize> = if opts.head_only {
            vec![n - 1]
        } else {
            (0..n).collect()
        };
        let mut params: Vec<&Tensor> = Vec::new();
        let mut lrs: Vec<Tensor> = Vec::new();
        for &i in &moving {
            let lr = ndcore::exp(theta.log_lr(i))?;
            params.push(&theta.layers[i].w);
            lrs.push(lr.clone());
            params.push(&theta.layers[i].b);
            lrs.push(lr);
        }
        let lr_refs: Vec<&Tensor> = lrs.iter().collect();
        let stepped = ndcore::gradient_step(&loss, &params, &lr_refs, opts.mode)
            .map_err(|source| ModelError::Adaptation { step, source })?;

        for (slot, &i) in moving.iter().enumerate() {
            theta.layers[i].w = stepped[slot * 2].clone();
            theta.layers[i].b = stepped[slot * 2 + 1].clone();
        }
    }
    Ok(theta)
}

/// Euclidean norm of the flattened parameter difference.
pub fn param_distance(a: &ModelParams, b: &ModelParams) -> Result<f64> {
    a.check_same_spec(b)?;
    let fa = a.flatten(true);
    let fb = b.flatten(true);
    Ok(fa
        .iter()
        .zip(&fb)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}
