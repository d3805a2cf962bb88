use super::{mismatch, Param, TensorError};
use crate::scalar::Scalar;

/// First/second moment estimates for a fixed, ordered parameter list.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments for `params`, β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn new(params: &[Param<T>], lr: f64) -> Self {
        Self::with_betas(params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &[Param<T>], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        assert!((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2));
        let zeros = || params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update using each param's accumulated gradient
/// (an absent gradient counts as zero). Gradients are left in place.
pub fn adam_step<T: Scalar>(params: &[Param<T>], state: &mut AdamState<T>) -> Result<(), TensorError> {
    if params.len() != state.m.len() {
        return Err(mismatch(
            "adam_step",
            format!("{} params for state of {}", params.len(), state.m.len()),
        ));
    }
    for (p, m) in params.iter().zip(&state.m) {
        if p.numel() != m.len() {
            return Err(mismatch("adam_step", format!("{} changed size", p.name())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64_lossy(state.beta1);
    let b2 = T::from_f64_lossy(state.beta2);
    let c1 = T::from_f64_lossy(1.0 - state.beta1.powi(t));
    let c2 = T::from_f64_lossy(1.0 - state.beta2.powi(t));
    let lr = T::from_f64_lossy(state.lr);
    let eps = T::from_f64_lossy(state.eps);
    let one = T::one();
    for ((p, m), v) in params.iter().zip(&mut state.m).zip(&mut state.v) {
        let Some(g) = p.grad() else {
            // m, v decay toward zero; with zero history the update is zero.
            m.iter_mut().for_each(|x| *x *= b1);
            v.iter_mut().for_each(|x| *x *= b2);
            let mut theta = p.value().to_vec();
            for ((th, mi), vi) in theta.iter_mut().zip(m.iter()).zip(v.iter()) {
                *th -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
            p.set_value(theta)?;
            continue;
        };
        let mut theta = p.value().to_vec();
        for (((th, mi), vi), gi) in theta.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(&g) {
            *mi = b1 * *mi + (one - b1) * *gi;
            *vi = b2 * *vi + (one - b2) * *gi * *gi;
            *th -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
        }
        p.set_value(theta)?;
    }
    Ok(())
}
