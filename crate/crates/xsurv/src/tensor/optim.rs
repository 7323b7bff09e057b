//! Adam optimizer with bias correction and optional per-parameter L2 decay.

use super::{Element, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moment buffers plus the shared step counter.
pub struct AdamState<E: Element> {
    pub params: AdamParams,
    step: u64,
    first: Vec<Vec<E>>,
    second: Vec<Vec<E>>,
    /// Updates skipped because a gradient was non-finite.
    pub skipped_nonfinite: u64,
}

impl<E: Element> AdamState<E> {
    pub fn new(params: AdamParams) -> Self {
        AdamState {
            params,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
            skipped_nonfinite: 0,
        }
    }

    pub fn for_params(tensors: &[Tensor<E>], params: AdamParams) -> Self {
        AdamState {
            params,
            step: 0,
            first: tensors.iter().map(|t| vec![E::zero(); t.numel()]).collect(),
            second: tensors.iter().map(|t| vec![E::zero(); t.numel()]).collect(),
            skipped_nonfinite: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over `params`, reading each tensor's accumulated gradient.
/// `weight_decay` is added to the gradient as an L2 term, but only for the
/// parameters whose index is flagged in `decay_mask`. Parameters whose
/// gradient contains a non-finite value are skipped and counted.
pub fn adam_step<E: Element>(
    params: &[Tensor<E>],
    decay_mask: &[bool],
    state: &mut AdamState<E>,
    lr: f64,
    weight_decay: f64,
) {
    assert_eq!(params.len(), decay_mask.len());
    if state.first.is_empty() {
        state.first = params.iter().map(|t| vec![E::zero(); t.numel()]).collect();
        state.second = params.iter().map(|t| vec![E::zero(); t.numel()]).collect();
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = E::of_f64(state.params.beta1);
    let b2 = E::of_f64(state.params.beta2);
    let eps = E::of_f64(state.params.eps);
    let lr = E::of_f64(lr);
    let wd = E::of_f64(weight_decay);
    let bc1 = E::one() - b1.powi(t);
    let bc2 = E::one() - b2.powi(t);

    for (i, p) in params.iter().enumerate() {
        let grad = match p.grad() {
            Some(g) => g,
            None => continue,
        };
        if grad.iter().any(|v| !v.is_finite()) {
            state.skipped_nonfinite += 1;
            continue;
        }
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        let mut data = p.data_mut();
        for j in 0..data.len() {
            let mut g = grad[j];
            if decay_mask[i] && wd > E::zero() {
                g += wd * data[j];
            }
            m[j] = b1 * m[j] + (E::one() - b1) * g;
            v[j] = b2 * v[j] + (E::one() - b2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
