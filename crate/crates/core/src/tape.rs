//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Every operator records its output value and the handles of its inputs;
//! [`Tape::backward`] walks the records in reverse and applies the explicit
//! gradient rule of each operator.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::hist_attention::{self, BinPartition};
use crate::kernels::{self, ConvGeom, ConvShape};
use crate::param::{ParamId, ParamStore};
use crate::real::{lit, Real};
use crate::tensor::{Direction, Permutation, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Param,
    Conv2d,
    Add,
    Sub,
    Mul,
    Div,
    MulChannel,
    Affine,
    Relu,
    Gelu,
    Sigmoid,
    Softplus,
    Abs,
    Powf,
    LayerNorm,
    PixelShuffle,
    Resize,
    SoftmaxChannels,
    Concat,
    Slice,
    ChannelMean,
    Gather,
    HistAttention,
    Mean,
    MeanSpatial,
}

impl OpKind {
    pub const ALL: [OpKind; 26] = [
        Self::Input,
        Self::Param,
        Self::Conv2d,
        Self::Add,
        Self::Sub,
        Self::Mul,
        Self::Div,
        Self::MulChannel,
        Self::Affine,
        Self::Relu,
        Self::Gelu,
        Self::Sigmoid,
        Self::Softplus,
        Self::Abs,
        Self::Powf,
        Self::LayerNorm,
        Self::PixelShuffle,
        Self::Resize,
        Self::SoftmaxChannels,
        Self::Concat,
        Self::Slice,
        Self::ChannelMean,
        Self::Gather,
        Self::HistAttention,
        Self::Mean,
        Self::MeanSpatial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Input => "input",
            Self::Param => "param",
            Self::Conv2d => "conv2d",
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Div => "div",
            Self::MulChannel => "mul_channel",
            Self::Affine => "affine",
            Self::Relu => "relu",
            Self::Gelu => "gelu",
            Self::Sigmoid => "sigmoid",
            Self::Softplus => "softplus",
            Self::Abs => "abs",
            Self::Powf => "powf",
            Self::LayerNorm => "layer_norm",
            Self::PixelShuffle => "pixel_shuffle",
            Self::Resize => "bilinear_resize",
            Self::SoftmaxChannels => "softmax_channels",
            Self::Concat => "concat",
            Self::Slice => "slice",
            Self::ChannelMean => "channel_mean",
            Self::Gather => "gather",
            Self::HistAttention => "hist_attention",
            Self::Mean => "mean",
            Self::MeanSpatial => "mean_spatial",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Gelu,
    Sigmoid,
    Softplus,
    Abs,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MulChannel {
        x: Var,
        m: Var,
    },
    Affine {
        x: Var,
        scale: T,
    },
    Unary(Var, Unary),
    Powf {
        x: Var,
        p: T,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    },
    PixelShuffle {
        x: Var,
        r: usize,
    },
    Resize {
        x: Var,
        align_corners: bool,
    },
    SoftmaxChannels(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    ChannelMean(Var),
    Gather {
        x: Var,
        perms: Arc<Vec<Arc<Permutation>>>,
        direction: Direction,
    },
    HistAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        parts: Arc<Vec<BinPartition>>,
    },
    Mean(Var),
    MeanSpatial(Var),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Param(_) => OpKind::Param,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::MulChannel { .. } => OpKind::MulChannel,
            Op::Affine { .. } => OpKind::Affine,
            Op::Unary(_, u) => match u {
                Unary::Relu => OpKind::Relu,
                Unary::Gelu => OpKind::Gelu,
                Unary::Sigmoid => OpKind::Sigmoid,
                Unary::Softplus => OpKind::Softplus,
                Unary::Abs => OpKind::Abs,
            },
            Op::Powf { .. } => OpKind::Powf,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::PixelShuffle { .. } => OpKind::PixelShuffle,
            Op::Resize { .. } => OpKind::Resize,
            Op::SoftmaxChannels(_) => OpKind::SoftmaxChannels,
            Op::Concat(_) => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::ChannelMean(_) => OpKind::ChannelMean,
            Op::Gather { .. } => OpKind::Gather,
            Op::HistAttention { .. } => OpKind::HistAttention,
            Op::Mean(_) => OpKind::Mean,
            Op::MeanSpatial(_) => OpKind::MeanSpatial,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Tensor<T>>>,
    fault: Option<OpKind>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let u = lit::<T>(SQRT_2_OVER_PI) * (x + lit::<T>(GELU_C) * x * x * x);
    lit::<T>(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let u = lit::<T>(SQRT_2_OVER_PI) * (x + lit::<T>(GELU_C) * x * x * x);
    let t = u.tanh();
    let du = lit::<T>(SQRT_2_OVER_PI) * (T::one() + lit::<T>(3.0 * GELU_C) * x * x);
    lit::<T>(0.5) * (T::one() + t) + lit::<T>(0.5) * x * (T::one() - t * t) * du
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn unary_forward<T: Real>(x: T, u: Unary) -> T {
    match u {
        Unary::Relu => x.max(T::zero()),
        Unary::Gelu => gelu(x),
        Unary::Sigmoid => sigmoid(x),
        Unary::Softplus => softplus(x),
        Unary::Abs => x.abs(),
    }
}

fn unary_grad<T: Real>(x: T, u: Unary) -> T {
    match u {
        Unary::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Unary::Gelu => gelu_grad(x),
        Unary::Sigmoid => {
            let s = sigmoid(x);
            s * (T::one() - s)
        }
        Unary::Softplus => sigmoid(x),
        Unary::Abs => x.signum() * if x == T::zero() { T::zero() } else { T::one() },
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: Vec::new(),
            fault: None,
        }
    }

    /// Test fixture: scales the gradient rule of `kind` by 1.5 so gradient
    /// checks can be shown to catch a corrupted rule.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a constant input (no gradient).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Records an input whose gradient is wanted.
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Loads a parameter onto the tape (once per tape).
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.dims()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded operations of the given kind.
    pub fn op_count(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    /// Floating-point operation count of the recorded convolutions and attention.
    pub fn flops(&self) -> u64 {
        let mut total = 0u64;
        for node in &self.nodes {
            match &node.op {
                Op::Conv2d { x, w, geom, .. } => {
                    let s = ConvShape::new(self.value(*x), self.value(*w), None, *geom)
                        .expect("recorded conv has valid shape");
                    total += 2 * s.macs() as u64;
                }
                Op::HistAttention { q, heads, parts, .. } => {
                    let d = self.value(*q).c() / heads;
                    total += parts.iter().map(|p| hist_attention::attention_flops(p, d)).sum::<u64>();
                }
                _ => {}
            }
        }
        total
    }

    // ---- operators -------------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let y = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(y, Op::Conv2d { x, w, b, geom }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims() != vb.dims() {
            return Err(Error::shape(name, format!("{:?} vs {:?}", va.dims(), vb.dims())));
        }
        va.zip_map(vb, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary(a, b, "div", |x, y| x / y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Div(a, b), rg))
    }

    /// `x (n,c,h,w) * m (n,1,h,w)` broadcast over channels.
    pub fn mul_channel(&mut self, x: Var, m: Var) -> Result<Var> {
        let (vx, vm) = (self.value(x), self.value(m));
        if vm.c() != 1 || vm.n() != vx.n() || vm.h() != vx.h() || vm.w() != vx.w() {
            return Err(Error::shape(
                "mul_channel",
                format!("{:?} cannot broadcast onto {:?}", vm.dims(), vx.dims()),
            ));
        }
        let plane = vx.plane();
        let c = vx.c();
        let mut y = vx.clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            let n = i / (c * plane);
            *v = *v * vm.data()[n * plane + i % plane];
        }
        let rg = self.rg(x) || self.rg(m);
        Ok(self.push(y, Op::MulChannel { x, m }, rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, b) = (lit::<T>(scale), lit::<T>(shift));
        let y = self.value(x).map(|v| s * v + b);
        let rg = self.rg(x);
        self.push(y, Op::Affine { x, scale: s }, rg)
    }

    pub fn unary(&mut self, x: Var, u: Unary) -> Var {
        let y = self.value(x).map(|v| unary_forward(v, u));
        let rg = self.rg(x);
        self.push(y, Op::Unary(x, u), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    /// `x^p` for nonnegative `x`.
    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < T::zero()) {
            return Err(Error::invalid("powf", "negative base"));
        }
        let p = lit::<T>(p);
        let y = self.value(x).map(|v| v.powf(p));
        let rg = self.rg(x);
        Ok(self.push(y, Op::Powf { x, p }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let eps = lit::<T>(eps);
        let y = kernels::layer_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(y, Op::LayerNorm { x, gamma, beta, eps }, rg))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let y = kernels::pixel_shuffle(self.value(x), r)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::PixelShuffle { x, r }, rg))
    }

    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize, align_corners: bool) -> Result<Var> {
        let y = kernels::bilinear_resize(self.value(x), out_h, out_w, align_corners)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::Resize { x, align_corners }, rg))
    }

    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let y = kernels::softmax_channels(self.value(x));
        let rg = self.rg(x);
        self.push(y, Op::SoftmaxChannels(x), rg)
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let [n, _, h, w] = self.dims(first);
        let mut c = 0;
        for &p in parts {
            let d = self.dims(p);
            if d[0] != n || d[2] != h || d[3] != w {
                return Err(Error::shape("concat", format!("{d:?} vs {:?}", self.dims(first))));
            }
            c += d[1];
        }
        let plane = h * w;
        let mut y = Tensor::zeros([n, c, h, w]);
        for b in 0..n {
            let mut off = 0;
            for &p in parts {
                let v = self.value(p);
                let len = v.c() * plane;
                y.data_mut()[(b * c + off) * plane..][..len].copy_from_slice(&v.data()[b * len..(b + 1) * len]);
                off += v.c();
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(y, Op::Concat(parts.to_vec()), rg))
    }

    /// Channels `start..start + len`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = self.dims(x);
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice",
                format!("channels {start}..{} of {c}", start + len),
            ));
        }
        let plane = h * w;
        let v = self.value(x);
        let mut data = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            data.extend_from_slice(&v.data()[(b * c + start) * plane..][..len * plane]);
        }
        let y = Tensor::from_vec([n, len, h, w], data)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::Slice { x, start }, rg))
    }

    pub fn channel_mean(&mut self, x: Var) -> Var {
        let y = channel_mean(self.value(x));
        let rg = self.rg(x);
        self.push(y, Op::ChannelMean(x), rg)
    }

    /// Per-plane spatial gather: plane `p` (= n * c + ch) reads through `perms[p]`.
    pub fn gather(&mut self, x: Var, perms: Arc<Vec<Arc<Permutation>>>, direction: Direction) -> Result<Var> {
        let v = self.value(x);
        let plane = v.plane();
        if perms.len() != v.n() * v.c() || perms.iter().any(|p| p.len() != plane) {
            return Err(Error::shape("gather", "one permutation of the plane size per (n, c)"));
        }
        let mut y = Tensor::zeros(v.dims());
        for (p, perm) in perms.iter().enumerate() {
            let map = match direction {
                Direction::Forward => perm.forward(),
                Direction::Inverse => perm.inverse(),
            };
            let src = &v.data()[p * plane..(p + 1) * plane];
            let dst = &mut y.data_mut()[p * plane..(p + 1) * plane];
            for (d, &i) in dst.iter_mut().zip(map) {
                *d = src[i];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(y, Op::Gather { x, perms, direction }, rg))
    }

    /// Histogram (within-bin and across-bin) attention; see [`hist_attention`].
    pub fn hist_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        parts: Arc<Vec<BinPartition>>,
    ) -> Result<Var> {
        let y = hist_attention::attention_forward(self.value(q), self.value(k), self.value(v), heads, &parts)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(y, Op::HistAttention { q, k, v, heads, parts }, rg))
    }

    /// Mean of all elements as a `(1,1,1,1)` scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(x);
        self.push(y, Op::Mean(x), rg)
    }

    /// Spatial mean per `(n, c)`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let plane = v.plane();
        let pf = T::from_usize(plane).unwrap();
        let data: Vec<T> = v
            .data()
            .chunks(plane)
            .map(|c| c.iter().copied().sum::<T>() / pf)
            .collect();
        let y = Tensor::from_vec([v.n(), v.c(), 1, 1], data).unwrap();
        let rg = self.rg(x);
        self.push(y, Op::MeanSpatial(x), rg)
    }

    // ---- backward --------------------------------------------------------

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", lv.dims()),
            ));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite { context: "loss".into() });
        }
        let seed = Tensor::full(lv.dims(), T::one());
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(seed);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let mut contribs = self.rule(i, &g)?;
            if self.fault == Some(self.nodes[i].op.kind()) {
                for (_, t) in contribs.iter_mut() {
                    *t = t.map(|v| v * lit::<T>(1.5));
                }
            }
            for (var, t) in contribs {
                if !self.rg(var) {
                    continue;
                }
                match &mut self.grads[var.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds parameter gradients from the last backward pass into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for (id, var) in self.params() {
            if let Some(g) = self.grad(var) {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }

    /// Parameters touched by this tape, in load order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(id) => Some((id, Var(i))),
            _ => None,
        })
    }

    fn rule(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        Ok(match &node.op {
            Op::Input | Op::Param(_) => vec![],
            Op::Conv2d { x, w, b, geom } => {
                let cg = kernels::conv2d_backward(val(*x), val(*w), b.is_some(), *geom, g, self.rg(*x))?;
                let mut out = vec![(*w, cg.dw)];
                if let Some(dx) = cg.dx {
                    out.push((*x, dx));
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    out.push((*b, db.reshape(val(*b).dims())?));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |g, y| g * y)?),
                (*b, g.zip_map(val(*a), |g, x| g * x)?),
            ],
            Op::Div(a, b) => {
                let ga = g.zip_map(val(*b), |g, y| g / y)?;
                let gb = g
                    .zip_map(&node.value, |g, q| g * q)?
                    .zip_map(val(*b), |gq, y| -gq / y)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::MulChannel { x, m } => {
                let (vx, vm) = (val(*x), val(*m));
                let (c, plane) = (vx.c(), vx.plane());
                let mut gx = g.clone();
                let mut gm = Tensor::zeros(vm.dims());
                for (idx, gv) in gx.data_mut().iter_mut().enumerate() {
                    let n = idx / (c * plane);
                    let mi = n * plane + idx % plane;
                    gm.data_mut()[mi] = gm.data()[mi] + *gv * vx.data()[idx];
                    *gv = *gv * vm.data()[mi];
                }
                vec![(*x, gx), (*m, gm)]
            }
            Op::Affine { x, scale } => vec![(*x, g.map(|v| v * *scale))],
            Op::Unary(x, u) => vec![(*x, g.zip_map(val(*x), |g, xv| g * unary_grad(xv, *u))?)],
            Op::Powf { x, p } => {
                let gx = g.zip_map(val(*x), |g, xv| {
                    if xv == T::zero() {
                        T::zero()
                    } else {
                        g * *p * xv.powf(*p - T::one())
                    }
                })?;
                vec![(*x, gx)]
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (dx, dg, db) = kernels::layer_norm_backward(val(*x), val(*gamma), *eps, g);
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::PixelShuffle { x, r } => vec![(*x, kernels::pixel_unshuffle(g, *r)?)],
            Op::Resize { x, align_corners } => {
                vec![(*x, kernels::bilinear_resize_backward(val(*x).dims(), g, *align_corners))]
            }
            Op::SoftmaxChannels(x) => vec![(*x, kernels::softmax_channels_backward(&node.value, g))],
            Op::Concat(parts) => {
                let [n, c, h, w] = g.dims();
                let plane = h * w;
                let mut off = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let pc = val(p).c();
                    let mut data = Vec::with_capacity(n * pc * plane);
                    for b in 0..n {
                        data.extend_from_slice(&g.data()[(b * c + off) * plane..][..pc * plane]);
                    }
                    out.push((p, Tensor::from_vec([n, pc, h, w], data)?));
                    off += pc;
                }
                out
            }
            Op::Slice { x, start } => {
                let vx = val(*x);
                let [n, c, _, _] = vx.dims();
                let plane = vx.plane();
                let len = g.c();
                let mut gx = Tensor::zeros(vx.dims());
                for b in 0..n {
                    gx.data_mut()[(b * c + start) * plane..][..len * plane]
                        .copy_from_slice(&g.data()[b * len * plane..(b + 1) * len * plane]);
                }
                vec![(*x, gx)]
            }
            Op::ChannelMean(x) => {
                let vx = val(*x);
                let (c, plane) = (vx.c(), vx.plane());
                let inv = T::from_usize(c).unwrap().recip();
                let gx = Tensor::from_fn(vx.dims(), |[n, _, y, xx]| g.data()[n * plane + y * vx.w() + xx] * inv);
                vec![(*x, gx)]
            }
            Op::Gather { x, perms, direction } => {
                let plane = g.plane();
                let mut gx = Tensor::zeros(g.dims());
                for (p, perm) in perms.iter().enumerate() {
                    let map = match direction {
                        Direction::Forward => perm.forward(),
                        Direction::Inverse => perm.inverse(),
                    };
                    let src = &g.data()[p * plane..(p + 1) * plane];
                    let dst = &mut gx.data_mut()[p * plane..(p + 1) * plane];
                    for (&gv, &j) in src.iter().zip(map) {
                        dst[j] = dst[j] + gv;
                    }
                }
                vec![(*x, gx)]
            }
            Op::HistAttention { q, k, v, heads, parts } => {
                let (dq, dk, dv) = hist_attention::attention_backward(val(*q), val(*k), val(*v), *heads, parts, g)?;
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
            Op::Mean(x) => {
                let vx = val(*x);
                let s = g.data()[0] / T::from_usize(vx.len()).unwrap();
                vec![(*x, Tensor::full(vx.dims(), s))]
            }
            Op::MeanSpatial(x) => {
                let vx = val(*x);
                let plane = vx.plane();
                let inv = T::from_usize(plane).unwrap().recip();
                let mut gx = Tensor::zeros(vx.dims());
                for (p, chunk) in gx.data_mut().chunks_mut(plane).enumerate() {
                    chunk.fill(g.data()[p] * inv);
                }
                vec![(*x, gx)]
            }
        })
    }
}

/// Per-location mean over channels, `(n,c,h,w) -> (n,1,h,w)`.
pub fn channel_mean<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (c, plane) = (x.c(), x.plane());
    let inv = T::from_usize(c).unwrap().recip();
    let mut y = Tensor::zeros([x.n(), 1, x.h(), x.w()]);
    for n in 0..x.n() {
        for ch in 0..c {
            let src = &x.data()[(n * c + ch) * plane..][..plane];
            let dst = &mut y.data_mut()[n * plane..(n + 1) * plane];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + s;
            }
        }
    }
    y.data_mut().iter_mut().for_each(|v| *v = *v * inv);
    y
}
