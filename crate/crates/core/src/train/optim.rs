use super::TrainConfig;
use crate::model::ParamStore;
use crate::numerics::Real;
use crate::{Error, Result};

/// AdamW moments, one buffer per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    /// Completed optimizer steps.
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = store.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Scales `grads` in place so their global norm is at most `max_norm` (zero
/// disables clipping). Non-finite gradients abort with the first offending
/// parameter.
pub fn clip_and_check<T: Real>(store: &ParamStore<T>, grads: &mut [Vec<T>], max_norm: f64, step: u64) -> Result<StepStats> {
    if grads.len() != store.len() {
        return Err(Error::Dimension(format!("{} gradients for {} parameters", grads.len(), store.len())));
    }
    let mut total = 0.0;
    for (p, g) in store.iter().zip(grads.iter()) {
        if g.len() != p.tensor.numel() {
            return Err(Error::Dimension(format!(
                "gradient for `{}` has {} values, parameter has {}",
                p.name,
                g.len(),
                p.tensor.numel()
            )));
        }
        let sq: f64 = g.iter().map(|x| x.as_f64() * x.as_f64()).sum();
        if !sq.is_finite() {
            return Err(Error::NonFinite { step, param: p.name.clone(), norm: sq.sqrt() });
        }
        total += sq;
    }
    let norm = total.sqrt();
    let clipped = max_norm > 0.0 && norm > max_norm;
    if clipped {
        let s = T::from_f64_lossy(max_norm / norm);
        grads.iter_mut().flatten().for_each(|x| *x *= s);
    }
    Ok(StepStats { grad_norm: norm, clipped })
}

/// One AdamW update at learning rate `lr`: clip, decay weights flagged for
/// decay by `1 − lr·weight_decay`, then apply the bias-corrected moment step.
pub fn optimizer_step<T: Real>(
    store: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    grads: &mut [Vec<T>],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepStats> {
    let stats = clip_and_check(store, grads, cfg.grad_clip, state.step)?;
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (((p, g), m), v) in store.iter_mut().zip(grads.iter()).zip(&mut state.m).zip(&mut state.v) {
        let d = if p.decay { decay } else { 1.0 };
        for (((w, &g), m), v) in p.tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g.as_f64();
            let m1 = cfg.beta1 * m.as_f64() + (1.0 - cfg.beta1) * g;
            let v1 = cfg.beta2 * v.as_f64() + (1.0 - cfg.beta2) * g * g;
            *m = T::from_f64_lossy(m1);
            *v = T::from_f64_lossy(v1);
            let update = lr * (m1 / bc1) / ((v1 / bc2).sqrt() + cfg.eps);
            *w = T::from_f64_lossy(w.as_f64() * d - update);
        }
    }
    state.step += 1;
    Ok(stats)
}
