//! The baseline roster: plain online optimizers, frozen-initialization
//! meta-learners, and the BGD family, all behind the [`Learner`] contract.

use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, AdamState};
use super::bgd::{bgd_step, BgdState};
use super::cmaml::{cmaml_no_pap_step, cmaml_step, CmamlConfig, CmamlState};
use super::{accuracy, eval_loss_acc, Learner, Result, StepDiagnostics};
use crate::models::{self, AdaptOpts, ModelParams, Target};
use crate::ndcore::{self, GradMode, Tape, Tensor};
use crate::stream::StepBatch;

fn weight_grads(params: &ModelParams, batch: &StepBatch) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let logits = models::forward(&bound, &batch.x)?;
    let loss = ndcore::softmax_cross_entropy(&logits, &batch.y)?;
    let wrt: Vec<&Tensor> = bound.layers.iter().flat_map(|l| [&l.w, &l.b]).collect();
    let grads = tape.grad_wrt(&loss, &wrt, false)?;
    Ok(grads
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect())
}

/// ADAM on the raw parameters, no pre-training, no fast weights.
pub struct OnlineAdamLearner {
    params: ModelParams,
    adam: AdamState,
    eta: f64,
}

impl OnlineAdamLearner {
    pub fn new(params: ModelParams, eta: f64) -> OnlineAdamLearner {
        let adam = AdamState::new(params.weight_count());
        OnlineAdamLearner { params, adam, eta }
    }
}

impl Learner for OnlineAdamLearner {
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(models::forward(&self.params, x)?)
    }

    fn update(&mut self, batch: &StepBatch) -> Result<StepDiagnostics> {
        let (loss, accuracy) = eval_loss_acc(&self.params, batch)?;
        let grads = weight_grads(&self.params, batch)?;
        let mut flat = self.params.flatten(false);
        adam_step(&mut self.adam, &mut flat, &grads, self.eta)?;
        self.params.load_flat(&flat, false)?;
        Ok(StepDiagnostics {
            loss,
            accuracy,
            detected_boundary: false,
            modulation: None,
        })
    }

    fn slow_params(&self) -> ModelParams {
        self.params.clone()
    }
}

/// Plain SGD from a pre-trained initialization.
pub struct FineTuningLearner {
    params: ModelParams,
    eta: f64,
}

impl FineTuningLearner {
    pub fn new(params: ModelParams, eta: f64) -> FineTuningLearner {
        FineTuningLearner { params, eta }
    }
}

impl Learner for FineTuningLearner {
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(models::forward(&self.params, x)?)
    }

    fn update(&mut self, batch: &StepBatch) -> Result<StepDiagnostics> {
        let (loss, accuracy) = eval_loss_acc(&self.params, batch)?;
        let grads = weight_grads(&self.params, batch)?;
        let mut flat = self.params.flatten(false);
        for (p, g) in flat.iter_mut().zip(&grads) {
            *p -= self.eta * g;
        }
        self.params.load_flat(&flat, false)?;
        Ok(StepDiagnostics {
            loss,
            accuracy,
            detected_boundary: false,
            modulation: None,
        })
    }

    fn slow_params(&self) -> ModelParams {
        self.params.clone()
    }
}

/// Frozen slow weights; fast weights re-adapted from the previous batch each
/// step. `head_only` gives the ANIL variant.
pub struct MamlLearner {
    phi: ModelParams,
    theta: ModelParams,
    opts: AdaptOpts,
}

impl MamlLearner {
    pub fn new(
        phi: ModelParams,
        inner_steps: usize,
        first_order: bool,
        head_only: bool,
    ) -> MamlLearner {
        let theta = phi.clone();
        let mode = if first_order {
            GradMode::FirstOrder
        } else {
            GradMode::Exact
        };
        MamlLearner {
            phi,
            theta,
            opts: AdaptOpts {
                steps: inner_steps,
                head_only,
                mode,
            },
        }
    }
}

impl Learner for MamlLearner {
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(models::forward(&self.theta, x)?)
    }

    fn update(&mut self, batch: &StepBatch) -> Result<StepDiagnostics> {
        let (loss, accuracy) = eval_loss_acc(&self.theta, batch)?;
        // Fast weights for the next step come from this batch; phi never moves.
        self.theta =
            models::inner_adapt(&self.phi, &batch.x, &Target::Labels(&batch.y), &self.opts)?;
        Ok(StepDiagnostics {
            loss,
            accuracy,
            detected_boundary: false,
            modulation: None,
        })
    }

    fn slow_params(&self) -> ModelParams {
        self.phi.clone()
    }
}

/// Factorized-Gaussian posterior over the weights; predictions at the mean.
pub struct BgdLearner {
    template: ModelParams,
    state: BgdState,
    rng: ChaCha8Rng,
}

impl BgdLearner {
    pub fn new(
        init: ModelParams,
        sigma0: f64,
        beta: f64,
        mc_samples: usize,
        rng: ChaCha8Rng,
    ) -> Result<BgdLearner> {
        let mu0 = init.flatten(false);
        let state = BgdState::new(mu0, sigma0, beta, mc_samples)?;
        Ok(BgdLearner {
            template: init,
            state,
            rng,
        })
    }

    fn mean_params(&self) -> Result<ModelParams> {
        let mut p = self.template.clone();
        p.load_flat(&self.state.mu, false)?;
        Ok(p)
    }
}

impl Learner for BgdLearner {
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(models::forward(&self.mean_params()?, x)?)
    }

    fn update(&mut self, batch: &StepBatch) -> Result<StepDiagnostics> {
        let (loss, accuracy) = eval_loss_acc(&self.mean_params()?, batch)?;
        let template = self.template.clone();
        bgd_step(
            &mut self.state,
            |flat| {
                let mut p = template.clone();
                p.load_flat(flat, false)?;
                weight_grads(&p, batch)
            },
            &mut self.rng,
        )?;
        Ok(StepDiagnostics {
            loss,
            accuracy,
            detected_boundary: false,
            modulation: None,
        })
    }

    fn slow_params(&self) -> ModelParams {
        self.mean_params().expect("mu matches template")
    }
}

/// MAML-style fast adaptation on the previous batch with BGD over the slow
/// weights.
pub struct MetaBgdLearner {
    template: ModelParams,
    state: BgdState,
    prev: Option<StepBatch>,
    theta: ModelParams,
    opts: AdaptOpts,
    rng: ChaCha8Rng,
}

impl MetaBgdLearner {
    pub fn new(
        init: ModelParams,
        sigma0: f64,
        beta: f64,
        mc_samples: usize,
        inner_steps: usize,
        rng: ChaCha8Rng,
    ) -> Result<MetaBgdLearner> {
        let mu0 = init.flatten(false);
        let state = BgdState::new(mu0, sigma0, beta, mc_samples)?;
        let theta = init.clone();
        Ok(MetaBgdLearner {
            template: init,
            state,
            prev: None,
            theta,
            opts: AdaptOpts {
                steps: inner_steps,
                head_only: false,
                mode: GradMode::FirstOrder,
            },
            rng,
        })
    }

    fn mean_params(&self) -> Result<ModelParams> {
        let mut p = self.template.clone();
        p.load_flat(&self.state.mu, false)?;
        Ok(p)
    }

    fn adapt(&self, phi: &ModelParams, prev: Option<&StepBatch>) -> Result<ModelParams> {
        match prev {
            None => Ok(phi.clone()),
            Some(b) => Ok(models::inner_adapt(
                phi,
                &b.x,
                &Target::Labels(&b.y),
                &self.opts,
            )?),
        }
    }
}

impl Learner for MetaBgdLearner {
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(models::forward(&self.theta, x)?)
    }

    fn update(&mut self, batch: &StepBatch) -> Result<StepDiagnostics> {
        let logits = models::forward(&self.theta, &batch.x)?;
        let loss = ndcore::softmax_cross_entropy(&logits, &batch.y)?.item()?;
        let acc = accuracy(&logits, &batch.y);

        // Slow-weight BGD step: each Monte Carlo sample adapts on the
        // previous batch, then takes the incurred loss's gradient (first
        // order: evaluated at the fast weights).
        let template = self.template.clone();
        let prev = self.prev.clone();
        let opts = self.opts;
        bgd_step(
            &mut self.state,
            |flat| {
                let mut phi = template.clone();
                phi.load_flat(flat, false)?;
                let theta = match &prev {
                    None => phi,
                    Some(b) => models::inner_adapt(&phi, &b.x, &Target::Labels(&b.y), &opts)?,
                };
                weight_grads(&theta, batch)
            },
            &mut self.rng,
        )?;

        self.prev = Some(batch.clone());
        self.theta = self.adapt(&self.mean_params()?, self.prev.as_ref())?;
        Ok(StepDiagnostics {
            loss,
            accuracy: acc,
            detected_boundary: false,
            modulation: None,
        })
    }

    fn slow_params(&self) -> ModelParams {
        self.mean_params().expect("mu matches template")
    }
}

/// Continual-MAML in either variant (full buffered, or without the prolonged
/// adaptation phase).
pub struct CmamlLearner {
    state: CmamlState,
    cfg: CmamlConfig,
    no_pap: bool,
}

impl CmamlLearner {
    pub fn new(phi: ModelParams, cfg: CmamlConfig, rng: ChaCha8Rng, no_pap: bool) -> CmamlLearner {
        CmamlLearner {
            state: CmamlState::new(phi, rng),
            cfg,
            no_pap,
        }
    }
}

impl Learner for CmamlLearner {
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(models::forward(&self.state.theta, x)?)
    }

    fn update(&mut self, batch: &StepBatch) -> Result<StepDiagnostics> {
        if self.no_pap {
            cmaml_no_pap_step(&mut self.state, &self.cfg, batch)
        } else {
            cmaml_step(&mut self.state, &self.cfg, batch)
        }
    }

    fn slow_params(&self) -> ModelParams {
        self.state.phi.clone()
    }
}
