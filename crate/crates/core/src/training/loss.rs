use crate::data::gaussian_window;
use crate::error::{Error, Result};
use crate::kernels::ConvGeom;
use crate::model::ForwardOutputs;
use crate::real::{lit, Real};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Published per-scale MS-SSIM exponents, finest first.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Mean absolute difference.
pub fn l1_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// Scales actually used for an `h x w` image: the largest `s <= requested`
/// with `min(h, w) >= 2^(s-1) * 11`.
pub fn ms_ssim_scales(h: usize, w: usize, requested: usize) -> Result<usize> {
    let m = h.min(w);
    let s = (1..=requested.min(MS_SSIM_WEIGHTS.len()))
        .take_while(|&s| m >= (1 << (s - 1)) * WINDOW)
        .last();
    s.ok_or_else(|| {
        Error::invalid(
            "ms_ssim_loss",
            format!("image {h}x{w} smaller than the {WINDOW}x{WINDOW} window"),
        )
    })
}

/// Per-(n, c) mean SSIM and mean contrast-structure term at one scale.
fn ssim_terms<T: Real>(tape: &mut Tape<T>, x: Var, y: Var) -> Result<(Var, Var)> {
    let c = tape.dims(x)[1];
    let xx = tape.mul(x, x)?;
    let yy = tape.mul(y, y)?;
    let xy = tape.mul(x, y)?;
    let stack = tape.concat(&[x, y, xx, yy, xy])?;
    let g = gaussian_window(WINDOW, SIGMA);
    let kernel = Tensor::from_fn([5 * c, 1, WINDOW, WINDOW], |[_, _, i, j]| lit::<T>(g[i] * g[j]));
    let w = tape.input(kernel);
    let f = tape.conv2d(stack, w, None, ConvGeom::depthwise(5 * c, 1, 0))?;
    let part = |tape: &mut Tape<T>, i: usize| tape.slice(f, i * c, c);
    let (mx, my, exx, eyy, exy) = (
        part(tape, 0)?,
        part(tape, 1)?,
        part(tape, 2)?,
        part(tape, 3)?,
        part(tape, 4)?,
    );
    let mx2 = tape.mul(mx, mx)?;
    let my2 = tape.mul(my, my)?;
    let mxy = tape.mul(mx, my)?;
    let vx = tape.sub(exx, mx2)?;
    let vy = tape.sub(eyy, my2)?;
    let cov = tape.sub(exy, mxy)?;
    let cs_num = tape.affine(cov, 2.0, C2);
    let vsum = tape.add(vx, vy)?;
    let cs_den = tape.affine(vsum, 1.0, C2);
    let cs = tape.div(cs_num, cs_den)?;
    let l_num = tape.affine(mxy, 2.0, C1);
    let msum = tape.add(mx2, my2)?;
    let l_den = tape.affine(msum, 1.0, C1);
    let l = tape.div(l_num, l_den)?;
    let s = tape.mul(l, cs)?;
    Ok((tape.mean_spatial(s), tape.mean_spatial(cs)))
}

fn avg_pool2<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let c = tape.dims(x)[1];
    let w = tape.input(Tensor::full([c, 1, 2, 2], lit(0.25)));
    let geom = ConvGeom {
        stride: 2,
        ..ConvGeom::depthwise(c, 1, 0)
    };
    tape.conv2d(x, w, None, geom)
}

/// `1 - MS-SSIM` (Gaussian window 11, sigma 1.5, data range 1). The scale
/// count is reduced for small images and the exponents renormalized.
pub fn ms_ssim_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var, scales: usize) -> Result<Var> {
    let [_, _, h, w] = tape.dims(pred);
    if tape.dims(target) != tape.dims(pred) {
        return Err(Error::shape(
            "ms_ssim_loss",
            format!("{:?} vs {:?}", tape.dims(pred), tape.dims(target)),
        ));
    }
    let m = ms_ssim_scales(h, w, scales)?;
    let norm: f64 = MS_SSIM_WEIGHTS[..m].iter().sum();
    let (mut x, mut y) = (pred, target);
    let mut acc: Option<Var> = None;
    for (s, &wt) in MS_SSIM_WEIGHTS[..m].iter().enumerate() {
        let (ssim, cs) = ssim_terms(tape, x, y)?;
        let term = if s + 1 == m { ssim } else { cs };
        let r = tape.relu(term);
        let p = tape.powf(r, wt / norm)?;
        acc = Some(match acc {
            Some(a) => tape.mul(a, p)?,
            None => p,
        });
        if s + 1 < m {
            x = avg_pool2(tape, x)?;
            y = avg_pool2(tape, y)?;
        }
    }
    let ms = tape.mean(acc.expect("at least one scale"));
    Ok(tape.affine(ms, -1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub msssim: f64,
    pub deep: f64,
    pub msssim_scales: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 1.0,
            msssim: 0.4,
            deep: 0.25,
            msssim_scales: 5,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub l1: Var,
    pub msssim: Option<Var>,
    /// Sum of intermediate-level L1 terms.
    pub deep: Option<Var>,
}

/// `w_l1·L1(I_out) + w_msssim·(1 - MS-SSIM(I_out)) + w_deep·Σ L1(deep_k)`,
/// where the deep sum runs over the intermediate (coarser) levels; the finest
/// level is `I_out` itself and is covered by the first two terms.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    out: &ForwardOutputs,
    target: Var,
    w: &LossWeights,
) -> Result<LossTerms> {
    let l1 = l1_loss(tape, out.i_out, target)?;
    let mut total = tape.affine(l1, w.l1, 0.0);
    let mut msssim = None;
    if w.msssim != 0.0 {
        let m = ms_ssim_loss(tape, out.i_out, target, w.msssim_scales)?;
        let t = tape.affine(m, w.msssim, 0.0);
        total = tape.add(total, t)?;
        msssim = Some(m);
    }
    let mut deep = None;
    if w.deep != 0.0 {
        for &d in out.deep_outputs.iter().skip(1) {
            let l = l1_loss(tape, d, target)?;
            deep = Some(match deep {
                Some(a) => tape.add(a, l)?,
                None => l,
            });
        }
        if let Some(d) = deep {
            let t = tape.affine(d, w.deep, 0.0);
            total = tape.add(total, t)?;
        }
    }
    Ok(LossTerms {
        total,
        l1,
        msssim,
        deep,
    })
}
