//! Retinex decomposition: the estimator producing reciprocal reflectance and
//! illumination maps plus per-level guidance features, the dual-branch
//! composition algebra, and the multiplicative perturbation model used to
//! synthesize shadowed images.

use crate::error::{Error, Result};
use crate::kernels::ConvGeom;
use crate::nn::{Conv, ConvInit};
use crate::param::{ParamBuilder, ParamStore};
use crate::real::{lit, Real};
use crate::tape::{softplus, Tape, Var};
use crate::tensor::Tensor;

/// Lower bound added to the softplus heads so reciprocal maps stay positive.
pub const RECIPROCAL_FLOOR: f64 = 1e-3;

/// Ground-truth factors of a synthetic shadowed image.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthDecomposition<T> {
    pub r_gt: Tensor<T>,
    pub l_gt: Tensor<T>,
    pub r_hat: Tensor<T>,
    pub l_hat: Tensor<T>,
}

/// Estimator outputs recorded on a tape.
#[derive(Debug, Clone)]
pub struct RetinexDecomposition {
    /// Reciprocal reflectance (absent when the dual-branch pipeline is off).
    pub r_bar: Option<Var>,
    /// Reciprocal illumination.
    pub l_bar: Option<Var>,
    /// One guidance tensor per UNet level; spatial dims halve per level.
    pub guidance: Vec<Var>,
}

/// Intermediate maps of the two branches.
#[derive(Debug, Clone, Copy)]
pub struct BranchState {
    pub r_bar: Var,
    pub l_bar: Var,
    pub r_prime: Var,
    pub l_prime: Var,
    pub r_out: Var,
    pub l_out: Var,
    pub i_out: Var,
}

/// Bias for which `softplus(bias) + floor` evaluates to exactly one in `T`.
pub fn unit_head_bias<T: Real>() -> T {
    let target = 1.0 - RECIPROCAL_FLOOR;
    let b0: T = lit(target.exp_m1().ln());
    let eval = |b: T| softplus(b) + lit::<T>(RECIPROCAL_FLOOR);
    for k in 0..256i64 {
        for cand in [b0.step_ulps(k), b0.step_ulps(-k)] {
            if eval(cand) == T::one() {
                return cand;
            }
        }
    }
    b0
}

#[derive(Debug, Clone)]
pub struct Estimator {
    pub stem: Conv,
    pub spatial: Conv,
    pub r_head: Option<Conv>,
    pub l_head: Option<Conv>,
    pub guidance: Vec<Conv>,
}

impl Estimator {
    /// `widths[i]` is the guidance channel count at level `i`.
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        trunk: usize,
        widths: &[usize],
        heads: bool,
    ) -> Result<Self> {
        let bias = unit_head_bias::<T>().to_f64().unwrap();
        pb.scoped(name, |pb| {
            let stem = Conv::pointwise(pb, "stem", 4, trunk, ConvInit::Fan)?;
            let spatial = Conv::new(
                pb,
                "spatial",
                trunk,
                trunk,
                5,
                ConvGeom::depthwise(trunk, 1, 2),
                true,
                ConvInit::Fan,
            )?;
            let (r_head, l_head) = if heads {
                (
                    Some(Conv::pointwise(pb, "r_head", trunk, 3, ConvInit::ZeroBias(bias))?),
                    Some(Conv::pointwise(pb, "l_head", trunk, 3, ConvInit::ZeroBias(bias))?),
                )
            } else {
                (None, None)
            };
            let mut guidance = Vec::with_capacity(widths.len());
            let mut c_in = trunk;
            for (i, &c) in widths.iter().enumerate() {
                let stride = if i == 0 { 1 } else { 2 };
                guidance.push(Conv::new(
                    pb,
                    &format!("guide{i}"),
                    c_in,
                    c,
                    3,
                    ConvGeom::new(stride, 1, 1),
                    true,
                    ConvInit::Fan,
                )?);
                c_in = c;
            }
            Ok(Self {
                stem,
                spatial,
                r_head,
                l_head,
                guidance,
            })
        })
    }

    fn head<T: Real>(
        head: &Option<Conv>,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        trunk: Var,
    ) -> Result<Option<Var>> {
        head.as_ref()
            .map(|h| {
                let z = h.forward(tape, store, trunk)?;
                let s = tape.softplus(z);
                Ok(tape.affine(s, 1.0, RECIPROCAL_FLOOR))
            })
            .transpose()
    }

    /// Estimates `(R̄, L̄, F_1..F_levels)` from a shadowed image.
    pub fn estimate<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        i_sh: Var,
    ) -> Result<RetinexDecomposition> {
        if !tape.value(i_sh).is_finite() {
            return Err(Error::NonFinite {
                context: "estimator input".into(),
            });
        }
        if tape.dims(i_sh)[1] != 3 {
            return Err(Error::shape(
                "estimate",
                format!("expected 3 channels, got {}", tape.dims(i_sh)[1]),
            ));
        }
        let mean = tape.channel_mean(i_sh);
        let inp = tape.concat(&[i_sh, mean])?;
        let t = self.stem.forward(tape, store, inp)?;
        let t = self.spatial.forward(tape, store, t)?;
        let r_bar = Self::head(&self.r_head, tape, store, t)?;
        let l_bar = Self::head(&self.l_head, tape, store, t)?;
        let mut guidance = Vec::with_capacity(self.guidance.len());
        let mut g = t;
        for conv in &self.guidance {
            g = conv.forward(tape, store, g)?;
            guidance.push(g);
        }
        Ok(RetinexDecomposition { r_bar, l_bar, guidance })
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let mut f = self.stem.flops(h, w) + self.spatial.flops(h, w);
        for head in self.r_head.iter().chain(&self.l_head) {
            f += head.flops(h, w);
        }
        let (mut hh, mut ww) = (h, w);
        for conv in &self.guidance {
            f += conv.flops(hh, ww);
            (hh, ww) = conv.out_hw(hh, ww);
        }
        f
    }
}

/// `R' = I_sh ⊙ L̄` and `L' = I_sh ⊙ R̄`.
pub fn compose_branches<T: Real>(tape: &mut Tape<T>, i_sh: Var, r_bar: Var, l_bar: Var) -> Result<(Var, Var)> {
    let r_prime = tape.mul(i_sh, l_bar)?;
    let l_prime = tape.mul(i_sh, r_bar)?;
    Ok((r_prime, l_prime))
}

/// `I_out = R_out ⊙ L_out` (unclamped; clamp only when emitting images).
pub fn recombine<T: Real>(tape: &mut Tape<T>, r_out: Var, l_out: Var) -> Result<Var> {
    tape.mul(r_out, l_out)
}

/// `clamp((R_gt + R̂) ⊙ (L_gt + L̂), 0, 1)`.
pub fn apply_perturbation_model<T: Real>(g: &GroundTruthDecomposition<T>) -> Result<Tensor<T>> {
    for (name, t) in [("r_hat", &g.r_hat), ("l_gt", &g.l_gt), ("l_hat", &g.l_hat)] {
        g.r_gt.expect_same_dims(t, "apply_perturbation_model").map_err(|_| {
            Error::shape(
                "apply_perturbation_model",
                format!("{name} dims {:?} vs r_gt {:?}", t.dims(), g.r_gt.dims()),
            )
        })?;
    }
    let r = g.r_gt.zip_map(&g.r_hat, |a, b| a + b)?;
    let l = g.l_gt.zip_map(&g.l_hat, |a, b| a + b)?;
    if r.data().iter().chain(l.data()).any(|&v| v < T::zero()) {
        return Err(Error::invalid(
            "apply_perturbation_model",
            "negative perturbed factor (invalid synthesis config)",
        ));
    }
    Ok(r.zip_map(&l, |a, b| a * b)?.clamp01())
}
