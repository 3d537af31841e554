//! 2-D convolution (im2col + GEMM, direct loops for depthwise).

use crate::error::{Error, Result};
use crate::par;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        Self {
            stride,
            dilation,
            padding,
            groups: 1,
        }
    }

    pub fn depthwise(channels: usize, dilation: usize, padding: usize) -> Self {
        Self {
            stride: 1,
            dilation,
            padding,
            groups: channels,
        }
    }

    pub fn out_len(&self, len: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        (len + 2 * self.padding).checked_sub(span).map(|v| v / self.stride + 1)
    }
}

/// Validated shape information for one convolution call.
#[derive(Debug, Clone, Copy)]
pub struct ConvShape {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub ho: usize,
    pub wo: usize,
    pub geom: ConvGeom,
}

impl ConvShape {
    pub fn new<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>, geom: ConvGeom) -> Result<Self> {
        let [c_out, cin_g, kh, kw] = weight.dims();
        if kh != kw {
            return Err(Error::shape("conv2d", format!("non-square kernel {kh}x{kw}")));
        }
        if geom.stride == 0 || geom.dilation == 0 || geom.groups == 0 {
            return Err(Error::invalid("conv2d", "stride, dilation and groups must be >= 1"));
        }
        if x.c() != cin_g * geom.groups {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input channels {} != weight in-channels {cin_g} x groups {}",
                    x.c(),
                    geom.groups
                ),
            ));
        }
        if c_out % geom.groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("output channels {c_out} not divisible by groups {}", geom.groups),
            ));
        }
        if let Some(b) = bias {
            if b.len() != c_out {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias length {} != output channels {c_out}", b.len()),
                ));
            }
        }
        let ho = geom
            .out_len(x.h(), kh)
            .ok_or_else(|| Error::shape("conv2d", format!("height {} smaller than kernel span", x.h())))?;
        let wo = geom
            .out_len(x.w(), kw)
            .ok_or_else(|| Error::shape("conv2d", format!("width {} smaller than kernel span", x.w())))?;
        Ok(Self {
            n: x.n(),
            c_in: x.c(),
            h: x.h(),
            w: x.w(),
            c_out,
            k: kh,
            ho,
            wo,
            geom,
        })
    }

    fn cin_g(&self) -> usize {
        self.c_in / self.geom.groups
    }
    fn cout_g(&self) -> usize {
        self.c_out / self.geom.groups
    }
    fn kdim(&self) -> usize {
        self.cin_g() * self.k * self.k
    }
    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.geom.stride == 1 && self.geom.padding == 0
    }
    fn is_depthwise(&self) -> bool {
        self.geom.groups == self.c_in && self.c_out == self.c_in && self.geom.groups > 1
    }

    pub fn out_dims(&self) -> [usize; 4] {
        [self.n, self.c_out, self.ho, self.wo]
    }

    /// Multiply-accumulate count of the forward pass.
    pub fn macs(&self) -> usize {
        self.n * self.c_out * self.out_plane() * self.kdim()
    }
}

/// Source coordinate for output position `o` and kernel tap `t`, if inside the image.
#[inline]
fn src(o: usize, t: usize, g: &ConvGeom, len: usize) -> Option<usize> {
    let p = (o * g.stride + t * g.dilation) as isize - g.padding as isize;
    (p >= 0 && (p as usize) < len).then_some(p as usize)
}

/// Output positions `lo..hi` whose tap `t` lands inside the input, and the
/// input index of position `lo`. Consecutive positions advance by `stride`.
#[inline]
fn valid(t: usize, g: &ConvGeom, out_len: usize, in_len: usize) -> (usize, usize, usize) {
    let off = t * g.dilation;
    let lo = if g.padding > off {
        (g.padding - off).div_ceil(g.stride)
    } else {
        0
    };
    let hi = if in_len + g.padding > off {
        ((in_len - 1 + g.padding - off) / g.stride + 1).min(out_len)
    } else {
        0
    };
    if lo >= hi {
        return (0, 0, 0);
    }
    (lo, hi, lo * g.stride + off - g.padding)
}

fn im2col<T: Real>(s: &ConvShape, x: &[T], cols: &mut [T]) {
    let (k, plane_o) = (s.k, s.out_plane());
    let plane_i = s.h * s.w;
    let st = s.geom.stride;
    for ci in 0..s.cin_g() {
        let xc = &x[ci * plane_i..(ci + 1) * plane_i];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * plane_o..][..plane_o];
                let (x0, x1, ix0) = valid(kx, &s.geom, s.wo, s.w);
                for oy in 0..s.ho {
                    let r = &mut row[oy * s.wo..(oy + 1) * s.wo];
                    match src(oy, ky, &s.geom, s.h) {
                        None => r.fill(T::zero()),
                        Some(iy) => {
                            r[..x0].fill(T::zero());
                            r[x1..].fill(T::zero());
                            let xr = &xc[iy * s.w..(iy + 1) * s.w];
                            if st == 1 {
                                r[x0..x1].copy_from_slice(&xr[ix0..ix0 + (x1 - x0)]);
                            } else {
                                for (j, v) in r[x0..x1].iter_mut().enumerate() {
                                    *v = xr[ix0 + j * st];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(s: &ConvShape, cols: &[T], dx: &mut [T]) {
    let (k, plane_o) = (s.k, s.out_plane());
    let plane_i = s.h * s.w;
    let st = s.geom.stride;
    for ci in 0..s.cin_g() {
        let dxc = &mut dx[ci * plane_i..(ci + 1) * plane_i];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * plane_o..][..plane_o];
                let (x0, x1, ix0) = valid(kx, &s.geom, s.wo, s.w);
                for oy in 0..s.ho {
                    let Some(iy) = src(oy, ky, &s.geom, s.h) else {
                        continue;
                    };
                    let dr = &mut dxc[iy * s.w..(iy + 1) * s.w];
                    for (j, &v) in row[oy * s.wo + x0..oy * s.wo + x1].iter().enumerate() {
                        let ix = ix0 + j * st;
                        dr[ix] = dr[ix] + v;
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    let s = ConvShape::new(x, weight, bias, geom)?;
    let mut out = Tensor::zeros(s.out_dims());
    if s.is_depthwise() {
        depthwise_forward(&s, x.data(), weight.data(), bias.map(|b| b.data()), out.data_mut());
        return Ok(out);
    }
    let in_item = s.c_in * s.h * s.w;
    let out_item = s.c_out * s.out_plane();
    let (kdim, plane_o) = (s.kdim(), s.out_plane());
    let w = weight.data();
    let xd = x.data();
    par::for_each_chunk_mut(out.data_mut(), out_item, |n, yn| {
        let xn = &xd[n * in_item..(n + 1) * in_item];
        let mut cols = if s.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); kdim * plane_o]
        };
        for g in 0..s.geom.groups {
            let xg = &xn[g * s.cin_g() * s.h * s.w..][..s.cin_g() * s.h * s.w];
            let b_mat: &[T] = if s.is_pointwise() {
                xg
            } else {
                im2col(&s, xg, &mut cols);
                &cols
            };
            let wg = &w[g * s.cout_g() * kdim..][..s.cout_g() * kdim];
            let yg = &mut yn[g * s.cout_g() * plane_o..][..s.cout_g() * plane_o];
            T::gemm(
                s.cout_g(),
                kdim,
                plane_o,
                T::one(),
                wg,
                kdim as isize,
                1,
                b_mat,
                plane_o as isize,
                1,
                T::zero(),
                yg,
                plane_o as isize,
                1,
            );
        }
        if let Some(b) = bias {
            for (co, row) in yn.chunks_mut(plane_o).enumerate() {
                let bv = b.data()[co];
                row.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    });
    Ok(out)
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    geom: ConvGeom,
    dy: &Tensor<T>,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let s = ConvShape::new(x, weight, None, geom)?;
    if dy.dims() != s.out_dims() {
        return Err(Error::shape("conv2d_backward", "upstream gradient dims"));
    }
    let db = has_bias.then(|| {
        let mut db = Tensor::zeros([1, 1, 1, s.c_out]);
        let plane_o = s.out_plane();
        for n in 0..s.n {
            for co in 0..s.c_out {
                let base = (n * s.c_out + co) * plane_o;
                let sum: T = dy.data()[base..base + plane_o].iter().copied().sum();
                db.data_mut()[co] = db.data()[co] + sum;
            }
        }
        db
    });
    if s.is_depthwise() {
        let (dx, dw) = depthwise_backward(&s, x.data(), weight.data(), dy.data(), need_dx);
        return Ok(ConvGrads {
            dx: dx.map(|d| Tensor::from_vec(x.dims(), d).unwrap()),
            dw: Tensor::from_vec(weight.dims(), dw)?,
            db,
        });
    }

    let in_item = s.c_in * s.h * s.w;
    let out_item = s.c_out * s.out_plane();
    let (kdim, plane_o) = (s.kdim(), s.out_plane());
    let (cin_g, cout_g) = (s.cin_g(), s.cout_g());
    let wd = weight.data();
    let xd = x.data();
    let dyd = dy.data();
    // Per-item partial weight gradients, reduced in index order below.
    let partial: Vec<(Vec<T>, Option<Vec<T>>)> = par::map_range(s.n, |n| {
        let xn = &xd[n * in_item..(n + 1) * in_item];
        let dyn_ = &dyd[n * out_item..(n + 1) * out_item];
        let mut dw = vec![T::zero(); weight.len()];
        let mut dx = need_dx.then(|| vec![T::zero(); in_item]);
        let mut cols = vec![T::zero(); if s.is_pointwise() { 0 } else { kdim * plane_o }];
        let mut dcols = vec![T::zero(); if need_dx { kdim * plane_o } else { 0 }];
        for g in 0..s.geom.groups {
            let xg = &xn[g * cin_g * s.h * s.w..][..cin_g * s.h * s.w];
            let b_mat: &[T] = if s.is_pointwise() {
                xg
            } else {
                im2col(&s, xg, &mut cols);
                &cols
            };
            let dyg = &dyn_[g * cout_g * plane_o..][..cout_g * plane_o];
            // dW_g = dY_g * cols^T
            T::gemm(
                cout_g,
                plane_o,
                kdim,
                T::one(),
                dyg,
                plane_o as isize,
                1,
                b_mat,
                1,
                plane_o as isize,
                T::zero(),
                &mut dw[g * cout_g * kdim..][..cout_g * kdim],
                kdim as isize,
                1,
            );
            if let Some(dx) = dx.as_mut() {
                let wg = &wd[g * cout_g * kdim..][..cout_g * kdim];
                // dcols = W_g^T * dY_g
                T::gemm(
                    kdim,
                    cout_g,
                    plane_o,
                    T::one(),
                    wg,
                    1,
                    kdim as isize,
                    dyg,
                    plane_o as isize,
                    1,
                    T::zero(),
                    &mut dcols,
                    plane_o as isize,
                    1,
                );
                let dxg = &mut dx[g * cin_g * s.h * s.w..][..cin_g * s.h * s.w];
                if s.is_pointwise() {
                    dxg.copy_from_slice(&dcols);
                } else {
                    col2im(&s, &dcols, dxg);
                }
            }
        }
        (dw, dx)
    });
    let mut dw = Tensor::zeros(weight.dims());
    let mut dx = need_dx.then(|| Tensor::zeros(x.dims()));
    for (n, (pw, px)) in partial.into_iter().enumerate() {
        for (a, b) in dw.data_mut().iter_mut().zip(pw) {
            *a = *a + b;
        }
        if let (Some(dx), Some(px)) = (dx.as_mut(), px) {
            dx.data_mut()[n * in_item..(n + 1) * in_item].copy_from_slice(&px);
        }
    }
    Ok(ConvGrads { dx, dw, db })
}

fn depthwise_forward<T: Real>(s: &ConvShape, x: &[T], w: &[T], b: Option<&[T]>, y: &mut [T]) {
    let (k, plane_i, plane_o) = (s.k, s.h * s.w, s.out_plane());
    par::for_each_chunk_mut(y, plane_o, |p, yp| {
        let c = p % s.c_in;
        let xp = &x[p * plane_i..(p + 1) * plane_i];
        let wc = &w[c * k * k..(c + 1) * k * k];
        let bv = b.map_or(T::zero(), |b| b[c]);
        yp.fill(bv);
        for ky in 0..k {
            for oy in 0..s.ho {
                let Some(iy) = src(oy, ky, &s.geom, s.h) else {
                    continue;
                };
                let row = &xp[iy * s.w..(iy + 1) * s.w];
                let yr = &mut yp[oy * s.wo..(oy + 1) * s.wo];
                for kx in 0..k {
                    let wv = wc[ky * k + kx];
                    let (x0, x1, ix0) = valid(kx, &s.geom, s.wo, s.w);
                    for (j, v) in yr[x0..x1].iter_mut().enumerate() {
                        *v = *v + wv * row[ix0 + j * s.geom.stride];
                    }
                }
            }
        }
    });
}

fn depthwise_backward<T: Real>(s: &ConvShape, x: &[T], w: &[T], dy: &[T], need_dx: bool) -> (Option<Vec<T>>, Vec<T>) {
    let (k, plane_i, plane_o) = (s.k, s.h * s.w, s.out_plane());
    let planes = s.n * s.c_in;
    let per_plane: Vec<(Vec<T>, Option<Vec<T>>)> = par::map_range(planes, |p| {
        let c = p % s.c_in;
        let xp = &x[p * plane_i..(p + 1) * plane_i];
        let dyp = &dy[p * plane_o..(p + 1) * plane_o];
        let wc = &w[c * k * k..(c + 1) * k * k];
        let mut dw = vec![T::zero(); k * k];
        let mut dx = need_dx.then(|| vec![T::zero(); plane_i]);
        for ky in 0..k {
            for oy in 0..s.ho {
                let Some(iy) = src(oy, ky, &s.geom, s.h) else {
                    continue;
                };
                for kx in 0..k {
                    let mut acc = T::zero();
                    let wv = wc[ky * k + kx];
                    let (x0, x1, ix0) = valid(kx, &s.geom, s.wo, s.w);
                    let st = s.geom.stride;
                    let gr = &dyp[oy * s.wo + x0..oy * s.wo + x1];
                    let xr = &xp[iy * s.w..(iy + 1) * s.w];
                    for (j, &g) in gr.iter().enumerate() {
                        acc = acc + g * xr[ix0 + j * st];
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dr = &mut dx[iy * s.w..(iy + 1) * s.w];
                        for (j, &g) in gr.iter().enumerate() {
                            dr[ix0 + j * st] = dr[ix0 + j * st] + g * wv;
                        }
                    }
                    dw[ky * k + kx] = dw[ky * k + kx] + acc;
                }
            }
        }
        (dw, dx)
    });
    let mut dw = vec![T::zero(); w.len()];
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    for (p, (pw, px)) in per_plane.into_iter().enumerate() {
        let c = p % s.c_in;
        for (a, b) in dw[c * k * k..(c + 1) * k * k].iter_mut().zip(pw) {
            *a = *a + b;
        }
        if let (Some(dx), Some(px)) = (dx.as_mut(), px) {
            dx[p * plane_i..(p + 1) * plane_i].copy_from_slice(&px);
        }
    }
    (dx, dw)
}
