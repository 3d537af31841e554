//! Channel-wise layer normalization at each spatial location.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

fn check<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<()> {
    if eps < T::zero() || (eps == T::zero() && x.c() == 1) {
        return Err(Error::invalid(
            "layer_norm",
            "eps must be positive (zero variance would divide by zero)",
        ));
    }
    if gamma.len() != x.c() || beta.len() != x.c() {
        return Err(Error::shape(
            "layer_norm",
            format!("affine length {}/{} vs channels {}", gamma.len(), beta.len(), x.c()),
        ));
    }
    Ok(())
}

/// Per-location `(mean, 1/sqrt(var + eps))` over the channel axis.
fn stats<T: Real>(x: &Tensor<T>, eps: T) -> Vec<(T, T)> {
    let (c, plane) = (x.c(), x.plane());
    let cf = T::from_usize(c).unwrap();
    let mut out = Vec::with_capacity(x.n() * plane);
    for n in 0..x.n() {
        let base = n * c * plane;
        for p in 0..plane {
            let mut mean = T::zero();
            for ch in 0..c {
                mean = mean + x.data()[base + ch * plane + p];
            }
            mean = mean / cf;
            let mut var = T::zero();
            for ch in 0..c {
                let d = x.data()[base + ch * plane + p] - mean;
                var = var + d * d;
            }
            var = var / cf;
            out.push((mean, (var + eps).sqrt().recip()));
        }
    }
    out
}

pub fn layer_norm_forward<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    check(x, gamma, beta, eps)?;
    let (c, plane) = (x.c(), x.plane());
    let st = stats(x, eps);
    let mut y = Tensor::zeros(x.dims());
    for n in 0..x.n() {
        let base = n * c * plane;
        for ch in 0..c {
            let (g, b) = (gamma.data()[ch], beta.data()[ch]);
            for p in 0..plane {
                let (mean, rstd) = st[n * plane + p];
                let i = base + ch * plane + p;
                y.data_mut()[i] = (x.data()[i] - mean) * rstd * g + b;
            }
        }
    }
    Ok(y)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    eps: T,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (c, plane) = (x.c(), x.plane());
    let cf = T::from_usize(c).unwrap();
    let st = stats(x, eps);
    let mut dx = Tensor::zeros(x.dims());
    let mut dg = Tensor::zeros(gamma.dims());
    let mut db = Tensor::zeros(gamma.dims());
    for n in 0..x.n() {
        let base = n * c * plane;
        for p in 0..plane {
            let (mean, rstd) = st[n * plane + p];
            let mut sum_dxh = T::zero();
            let mut sum_dxh_xh = T::zero();
            for ch in 0..c {
                let i = base + ch * plane + p;
                let xh = (x.data()[i] - mean) * rstd;
                let g = dy.data()[i];
                dg.data_mut()[ch] = dg.data()[ch] + g * xh;
                db.data_mut()[ch] = db.data()[ch] + g;
                let dxh = g * gamma.data()[ch];
                sum_dxh = sum_dxh + dxh;
                sum_dxh_xh = sum_dxh_xh + dxh * xh;
            }
            let m1 = sum_dxh / cf;
            let m2 = sum_dxh_xh / cf;
            for ch in 0..c {
                let i = base + ch * plane + p;
                let xh = (x.data()[i] - mean) * rstd;
                let dxh = dy.data()[i] * gamma.data()[ch];
                dx.data_mut()[i] = rstd * (dxh - m1 - xh * m2);
            }
        }
    }
    (dx, dg, db)
}
