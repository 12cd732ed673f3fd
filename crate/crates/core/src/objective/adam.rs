use alloc::vec;
use alloc::vec::Vec;

use crate::error::ShapeError;

/// Adam moments and hyperparameters for a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimState {
    /// Zero moments for tensors of the given lengths; β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn new(lr: f64, lengths: &[usize]) -> Self {
        Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            v: lengths.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Default learning rate 1e-4.
    pub fn with_defaults(lengths: &[usize]) -> Self {
        Self::new(1e-4, lengths)
    }
}

/// One bias-corrected Adam step.
pub fn adam_update(params: &mut [&mut [f64]], grads: &[&[f64]], opt: &mut OptimState) -> Result<(), ShapeError> {
    if params.len() != grads.len() || params.len() != opt.m.len() {
        return Err(ShapeError::ShapeMismatch {
            what: "adam tensor count",
            expected: opt.m.len(),
            actual: params.len().max(grads.len()),
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&opt.m) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(ShapeError::ShapeMismatch {
                what: "adam tensor length",
                expected: m.len(),
                actual: if p.len() != m.len() { p.len() } else { g.len() },
            });
        }
    }
    opt.step += 1;
    let t = opt.step as f64;
    let c1 = 1.0 - libm::pow(opt.beta1, t);
    let c2 = 1.0 - libm::pow(opt.beta2, t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(opt.m.iter_mut()).zip(opt.v.iter_mut()) {
        for i in 0..p.len() {
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= opt.lr * mhat / (libm::sqrt(vhat) + opt.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0, 3.5];
        let mut opt = OptimState::with_defaults(&[3]);
        adam_update(&mut [&mut p], &[&[0.0; 3]], &mut opt).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let mut p = vec![1.0];
        let mut opt = OptimState::new(0.0, &[1]);
        adam_update(&mut [&mut p], &[&[0.3]], &mut opt).unwrap();
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![0.0];
        let mut opt = OptimState::with_defaults(&[1]);
        adam_update(&mut [&mut p], &[&[1.0]], &mut opt).unwrap();
        // m̂ = v̂ = 1, so the step is lr / (1 + ε).
        assert!((p[0] + 1e-4 / (1.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn matches_scalar_reference_over_100_steps() {
        // Textbook Adam written out with running bias-correction products.
        let (lr, b1, b2, eps) = (1e-2, 0.9, 0.999, 1e-8);
        let (mut x, mut m, mut v, mut b1t, mut b2t) = (0.7f64, 0.0f64, 0.0f64, 1.0f64, 1.0f64);
        let mut p = vec![0.7];
        let mut opt = OptimState::new(lr, &[1]);
        for step in 0..100 {
            let g_ref = 2.0 * (x - 0.25) + (step as f64 * 0.1).sin();
            b1t *= b1;
            b2t *= b2;
            m = b1 * m + (1.0 - b1) * g_ref;
            v = b2 * v + (1.0 - b2) * g_ref * g_ref;
            x -= lr * (m / (1.0 - b1t)) / ((v / (1.0 - b2t)).sqrt() + eps);

            let g = 2.0 * (p[0] - 0.25) + (step as f64 * 0.1).sin();
            adam_update(&mut [&mut p], &[&[g]], &mut opt).unwrap();
            assert!((p[0] - x).abs() < 1e-10, "step {step}");
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![0.0; 3];
        let mut opt = OptimState::with_defaults(&[3]);
        assert!(adam_update(&mut [&mut p], &[&[0.0; 2]], &mut opt).is_err());
        assert_eq!(opt.step, 0);
    }
}
