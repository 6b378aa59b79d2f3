//! AdamW with decoupled weight decay.

use ept_core::numeric::Matrix;

use crate::error::{Result, TrainError};

/// Fixed update-rule constants (the published settings).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams { beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 0.01 }
    }
}

/// Per-parameter first and second moments plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl AdamWState {
    /// Zero moments shaped like the given parameters.
    pub fn new(params: &[&Matrix]) -> Self {
        AdamWState {
            m: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam step at the given learning rate.
/// Increments the step counter; bias correction uses the incremented count.
pub fn optimizer_step(
    params: &mut [&mut Matrix],
    grads: &[Matrix],
    state: &mut AdamWState,
    lr: f64,
    hp: &AdamWParams,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::Core(ept_core::EptError::Contract(format!(
            "optimizer_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        ))));
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - hp.beta1.powi(t);
    let bias2 = 1.0 - hp.beta2.powi(t);
    for (i, param) in params.iter_mut().enumerate() {
        if param.shape() != grads[i].shape() {
            return Err(TrainError::Core(ept_core::EptError::Contract(format!(
                "optimizer_step: parameter {i} is {}x{} but gradient is {}x{}",
                param.rows(),
                param.cols(),
                grads[i].rows(),
                grads[i].cols()
            ))));
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..param.len() {
            let g = grads[i].as_slice()[j];
            let mj = hp.beta1 * m.as_slice()[j] + (1.0 - hp.beta1) * g;
            let vj = hp.beta2 * v.as_slice()[j] + (1.0 - hp.beta2) * g * g;
            m.as_mut_slice()[j] = mj;
            v.as_mut_slice()[j] = vj;
            let m_hat = mj / bias1;
            let v_hat = vj / bias2;
            let p = param.as_slice()[j];
            param.as_mut_slice()[j] =
                p - lr * m_hat / (v_hat.sqrt() + hp.epsilon) - lr * hp.weight_decay * p;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_zero_decay_leave_parameters_alone() {
        let mut p = Matrix::scalar(1.5);
        let before = p.clone();
        let mut state = AdamWState::new(&[&p]);
        let hp = AdamWParams { weight_decay: 0.0, ..Default::default() };
        optimizer_step(&mut [&mut p], &[Matrix::scalar(0.0)], &mut state, 1e-3, &hp).unwrap();
        assert!(p.bits_eq(&before));
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_about_lr_against_the_gradient() {
        // hand-steps of the published rule with bias correction
        for &g in &[0.7, -2.0, 1e-3] {
            let mut p = Matrix::scalar(0.0);
            let mut state = AdamWState::new(&[&p]);
            let hp = AdamWParams { weight_decay: 0.0, ..Default::default() };
            let lr = 1e-2;
            optimizer_step(&mut [&mut p], &[Matrix::scalar(g)], &mut state, lr, &hp).unwrap();
            // m_hat = g, v_hat = g^2 => step = -lr * g/(|g| + eps) ~ -lr*sign(g)
            let expected = -lr * g / (g.abs() + hp.epsilon);
            assert!((p.get(0, 0) - expected).abs() < 1e-15);
            assert!((p.get(0, 0).abs() - lr).abs() < 1e-5);
            assert_eq!(p.get(0, 0).signum(), -g.signum());
        }
    }

    #[test]
    fn decay_only_shrinks_multiplicatively() {
        let mut p = Matrix::scalar(2.0);
        let mut state = AdamWState::new(&[&p]);
        let hp = AdamWParams { weight_decay: 0.1, ..Default::default() };
        optimizer_step(&mut [&mut p], &[Matrix::scalar(0.0)], &mut state, 0.5, &hp).unwrap();
        // theta <- theta * (1 - lr * d)
        assert!((p.get(0, 0) - 2.0 * (1.0 - 0.5 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn second_moment_tracks_gradient_square() {
        let mut p = Matrix::scalar(0.0);
        let mut state = AdamWState::new(&[&p]);
        let hp = AdamWParams::default();
        optimizer_step(&mut [&mut p], &[Matrix::scalar(3.0)], &mut state, 1e-3, &hp).unwrap();
        assert!((state.v[0].get(0, 0) - (1.0 - hp.beta2) * 9.0).abs() < 1e-15);
        assert!((state.m[0].get(0, 0) - (1.0 - hp.beta1) * 3.0).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let mut p = Matrix::zeros(2, 2);
        let mut state = AdamWState::new(&[&p]);
        let res = optimizer_step(
            &mut [&mut p],
            &[Matrix::zeros(2, 3)],
            &mut state,
            1e-3,
            &AdamWParams::default(),
        );
        assert!(res.is_err());
    }
}
