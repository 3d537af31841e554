use std::f64::consts::PI;

use super::{Schedule, TrainConfig};
use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::real::{lit, Real};
use crate::tensor::Tensor;

/// Learning rate at `step` of `total`. Written as a convex combination so the
/// endpoints are exactly `lr_start` and `lr_end`.
pub fn lr_at(step: usize, total: usize, cfg: &TrainConfig) -> Result<f64> {
    if total == 0 {
        return Err(Error::invalid("lr_at", "total steps must be > 0"));
    }
    if step > total {
        return Err(Error::invalid("lr_at", format!("step {step} > total {total}")));
    }
    let t = step as f64 / total as f64;
    let w = match cfg.schedule {
        Schedule::Cosine => 0.5 * (1.0 + (PI * t).cos()),
        Schedule::Linear => 1.0 - t,
    };
    Ok(cfg.lr_start * w + cfg.lr_end * (1.0 - w))
}

/// First/second moments per parameter and the step counter.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|p| Tensor::zeros(p.value.dims())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let sq: f64 = store
        .iter()
        .map(|p| p.grad.data().iter().map(|g| g.to_f64().unwrap().powi(2)).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s: T = lit(max_norm / norm);
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = *g * s);
        }
    }
    norm
}

/// One bias-corrected Adam update from the gradients stored in `store`.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::invalid("adam_step", "optimizer state does not match parameters"));
    }
    if let Some(p) = store.iter().find(|p| !p.grad.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("gradient of {}", p.name),
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1: T = lit(1.0 - b1.powi(t));
    let bc2: T = lit(1.0 - b2.powi(t));
    let (b1, b2, eps, lr): (T, T, T, T) = (lit(b1), lit(b2), lit(cfg.eps), lit(lr));
    let one = T::one();
    for (i, p) in store.iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (w, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            *w = *w - lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}
