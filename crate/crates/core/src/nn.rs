//! Parameterized layers shared by the network modules.

use crate::error::Result;
use crate::kernels::ConvGeom;
use crate::param::{Init, ParamBuilder, ParamId, ParamStore};
use crate::real::Real;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConvInit {
    /// Normal with std `1 / sqrt(fan_in)`, zero bias.
    Fan,
    /// Zero weights and bias (residual branches and output heads).
    Zero,
    /// Center-tap identity (depthwise only).
    Dirac,
    /// Zero weights with a constant bias.
    ZeroBias(f64),
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        geom: ConvGeom,
        bias: bool,
        init: ConvInit,
    ) -> Result<Self> {
        let cin_g = c_in / geom.groups;
        let shape = [c_out, cin_g, k, k];
        let w_init = match init {
            ConvInit::Fan => Init::Fan {
                fan_in: cin_g * k * k,
                gain: 1.0,
            },
            ConvInit::Zero | ConvInit::ZeroBias(_) => Init::Zeros,
            ConvInit::Dirac => Init::DiracDepthwise,
        };
        let b_init = match init {
            ConvInit::ZeroBias(b) => Init::Constant(b),
            _ => Init::Zeros,
        };
        pb.scoped(name, |pb| {
            let weight = pb.param("weight", &shape, w_init)?;
            let bias = if bias {
                Some(pb.param("bias", &[c_out], b_init)?)
            } else {
                None
            };
            Ok(Self {
                weight,
                bias,
                geom,
                c_in,
                c_out,
                k,
            })
        })
    }

    /// 1x1, stride 1.
    pub fn pointwise<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        init: ConvInit,
    ) -> Result<Self> {
        Self::new(pb, name, c_in, c_out, 1, ConvGeom::new(1, 1, 0), true, init)
    }

    /// 3x3 "same" convolution with the given dilation.
    pub fn same3<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        dilation: usize,
        init: ConvInit,
    ) -> Result<Self> {
        Self::new(
            pb,
            name,
            c_in,
            c_out,
            3,
            ConvGeom::new(1, dilation, dilation),
            true,
            init,
        )
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.conv2d(x, w, b, self.geom)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            self.geom.out_len(h, self.k).unwrap_or(0),
            self.geom.out_len(w, self.k).unwrap_or(0),
        )
    }

    /// Forward FLOPs (2 per multiply-accumulate) for one `h x w` input item.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = self.out_hw(h, w);
        2 * (self.c_out * ho * wo * (self.c_in / self.geom.groups) * self.k * self.k) as u64
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        pb.scoped(name, |pb| {
            Ok(Self {
                gamma: pb.param("gamma", &[channels], Init::Constant(1.0))?,
                beta: pb.param("beta", &[channels], Init::Zeros)?,
                eps: 1e-5,
            })
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, self.eps)
    }
}
