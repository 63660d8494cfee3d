use super::{AlgoError, Result};

/// ADAM moment state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> AdamState {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected ADAM update in place.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(AlgoError::Step(format!(
            "adam_step: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(AlgoError::Step("adam_step: non-finite gradient".into()));
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut state = AdamState::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        adam_step(&mut state, &mut p, &[0.0; 3], 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_matches_scalar_closed_form() {
        // Step 1 with constant gradient g: update = -lr * g / (|g| + eps).
        let g = 0.37;
        let lr = 0.01;
        let mut state = AdamState::new(1);
        let mut p = vec![2.0];
        adam_step(&mut state, &mut p, &[g], lr).unwrap();
        let want = 2.0 - lr * g / (g.abs() + 1e-8);
        assert!((p[0] - want).abs() <= 1e-15);
    }

    #[test]
    fn quadratic_descent_shrinks_after_warmup() {
        // Simulation oracle: 100 steps on L = w^2/2 from w = 1. The step size
        // keeps the trajectory above the ADAM oscillation floor (each update
        // is ~lr while |w| >> lr), so |w| decreases monotonically.
        let mut state = AdamState::new(1);
        let mut w = vec![1.0];
        let mut traj = Vec::new();
        for _ in 0..100 {
            let g = [w[0]];
            adam_step(&mut state, &mut w, &g, 0.005).unwrap();
            traj.push(w[0].abs());
        }
        for pair in traj[5..].windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
        assert!(*traj.last().unwrap() < 0.7);
    }

    #[test]
    fn non_finite_gradient_is_a_step_error() {
        let mut state = AdamState::new(1);
        let mut p = vec![0.0];
        assert!(matches!(
            adam_step(&mut state, &mut p, &[f64::NAN], 0.1),
            Err(AlgoError::Step(_))
        ));
    }
}
