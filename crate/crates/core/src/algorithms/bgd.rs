//! Bayesian Gradient Descent: a factorized Gaussian over the parameter
//! vector, updated with the closed-form rules
//!
//! ```text
//! mu_i    <- mu_i - beta * sigma_i^2 * E[g_i]
//! sigma_i <- sigma_i * sqrt(1 + (sigma_i/2) * E[g_i * eps_i]) - (sigma_i/2) * E[g_i * eps_i]
//! ```
//!
//! with expectations estimated by Monte Carlo over `phi = mu + sigma * eps`,
//! `eps ~ N(0, 1)`. The updates are applied exactly in this printed form; a
//! non-finite intermediate (including a negative sqrt argument) aborts the
//! step rather than propagating.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{AlgoError, Result};

const SIGMA_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct BgdState {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub beta: f64,
    pub mc_samples: usize,
}

impl BgdState {
    pub fn new(mu0: Vec<f64>, sigma0: f64, beta: f64, mc_samples: usize) -> Result<BgdState> {
        if !(sigma0 > 0.0) {
            return Err(AlgoError::Config(format!(
                "sigma0 must be > 0, got {sigma0}"
            )));
        }
        if mc_samples == 0 {
            return Err(AlgoError::Config("mc_samples must be >= 1".into()));
        }
        let n = mu0.len();
        Ok(BgdState {
            mu: mu0,
            sigma: vec![sigma0; n],
            beta,
            mc_samples,
        })
    }
}

/// One BGD update. `grad_fn` maps a sampled parameter vector to the loss
/// gradient at it. Epsilon vectors are drawn sample-major (all coordinates of
/// sample k before sample k+1).
pub fn bgd_step<F>(state: &mut BgdState, mut grad_fn: F, rng: &mut ChaCha8Rng) -> Result<()>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = state.mu.len();
    let k = state.mc_samples;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut e_g = vec![0.0; n];
    let mut e_ge = vec![0.0; n];
    for _ in 0..k {
        let eps: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
        let phi: Vec<f64> = (0..n)
            .map(|i| state.mu[i] + state.sigma[i] * eps[i])
            .collect();
        let g = grad_fn(&phi)?;
        if g.len() != n {
            return Err(AlgoError::Step(format!(
                "bgd_step: gradient length {} != parameter count {n}",
                g.len()
            )));
        }
        for i in 0..n {
            e_g[i] += g[i];
            e_ge[i] += g[i] * eps[i];
        }
    }
    let kf = k as f64;
    for i in 0..n {
        e_g[i] /= kf;
        e_ge[i] /= kf;
        if !e_g[i].is_finite() || !e_ge[i].is_finite() {
            return Err(AlgoError::Step("bgd_step: non-finite expectation".into()));
        }
        let s = state.sigma[i];
        let mu_new = state.mu[i] - state.beta * s * s * e_g[i];
        let half = 0.5 * s * e_ge[i];
        let sigma_new = s * (1.0 + half).sqrt() - half;
        if !mu_new.is_finite() || !sigma_new.is_finite() {
            return Err(AlgoError::Step("bgd_step: non-finite update".into()));
        }
        state.mu[i] = mu_new;
        state.sigma[i] = sigma_new.max(SIGMA_FLOOR);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::{rng_streams, seeded_rng};

    #[test]
    fn zero_gradient_is_a_null_update() {
        let mut state = BgdState::new(vec![0.4, -1.0], 0.05, 1.0, 5).unwrap();
        let mu0 = state.mu.clone();
        let sigma0 = state.sigma.clone();
        bgd_step(
            &mut state,
            |p| Ok(vec![0.0; p.len()]),
            &mut seeded_rng(1, 0),
        )
        .unwrap();
        assert_eq!(state.mu, mu0);
        assert_eq!(state.sigma, sigma0);
    }

    #[test]
    fn matches_independent_loop_oracle_on_quadratic() {
        // L(phi) = 0.5 * sum((phi - c)^2), gradient phi - c.
        let c = [0.3, -0.7, 1.1];
        let grad = |p: &[f64]| -> Vec<f64> { p.iter().zip(&c).map(|(x, t)| x - t).collect() };

        let (beta, sigma0, k) = (1.0, 0.1, 5);
        let mut state = BgdState::new(vec![1.0, 2.0, -1.5], sigma0, beta, k).unwrap();
        bgd_step(
            &mut state,
            |p| Ok(grad(p)),
            &mut seeded_rng(42, rng_streams::LEARNER),
        )
        .unwrap();

        // Independent straight-loop implementation of the printed formulas,
        // sharing only the seed and the sample-major draw order.
        let mut mu = vec![1.0, 2.0, -1.5];
        let mut sigma = vec![sigma0; 3];
        let mut rng = seeded_rng(42, rng_streams::LEARNER);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut sum_g = vec![0.0; 3];
        let mut sum_ge = vec![0.0; 3];
        for _ in 0..k {
            let mut eps = vec![0.0; 3];
            for e in eps.iter_mut() {
                *e = normal.sample(&mut rng);
            }
            let phi: Vec<f64> = (0..3).map(|i| mu[i] + sigma[i] * eps[i]).collect();
            let g = grad(&phi);
            for i in 0..3 {
                sum_g[i] += g[i];
                sum_ge[i] += g[i] * eps[i];
            }
        }
        for i in 0..3 {
            let eg = sum_g[i] / k as f64;
            let ege = sum_ge[i] / k as f64;
            let new_mu = mu[i] - beta * sigma[i] * sigma[i] * eg;
            let new_sigma = sigma[i] * (1.0 + 0.5 * sigma[i] * ege).sqrt() - 0.5 * sigma[i] * ege;
            mu[i] = new_mu;
            sigma[i] = new_sigma.max(1e-10);
        }

        for i in 0..3 {
            assert!((state.mu[i] - mu[i]).abs() <= 1e-12);
            assert!((state.sigma[i] - sigma[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn sigma_stays_positive_over_many_steps() {
        let mut state = BgdState::new(vec![0.0; 4], 0.1, 10.0, 5).unwrap();
        let mut rng = seeded_rng(7, rng_streams::LEARNER);
        for step in 0..200 {
            let target = (step as f64 * 0.1).sin();
            bgd_step(
                &mut state,
                |p| Ok(p.iter().map(|x| 2.0 * (x - target)).collect()),
                &mut rng,
            )
            .unwrap();
            assert!(state.sigma.iter().all(|s| *s > 0.0));
        }
    }

    #[test]
    fn invalid_construction_rejected() {
        assert!(BgdState::new(vec![0.0], 0.0, 1.0, 5).is_err());
        assert!(BgdState::new(vec![0.0], 0.1, 1.0, 0).is_err());
    }
}
