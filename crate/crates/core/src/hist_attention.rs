//! Illumination-guided histogram transformer block.
//!
//! Spatial positions are sorted by a scalar key and sliced into `bins`
//! equal-count bins. Attention then runs along two axes of the resulting
//! `bins x bin_size` grid: within each bin (members of one value range) and
//! across bins (the members holding the same rank in every bin). The two
//! results are averaged and scattered back to the original layout.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::ConvGeom;
use crate::nn::{Conv, ConvInit, LayerNorm};
use crate::par;
use crate::param::{ParamBuilder, ParamStore};
use crate::real::{lit, Real};
use crate::tape::{channel_mean, Tape, Var};
use crate::tensor::{argsort_stable, Direction, Permutation, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub bins: usize,
    pub channels: usize,
    pub ffn_expansion: f64,
    pub illumination_mod: bool,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::invalid(
                "attention config",
                format!("channels {} not divisible by heads {}", self.channels, self.heads),
            ));
        }
        if self.bins == 0 {
            return Err(Error::invalid("attention config", "bins must be >= 1"));
        }
        if !(self.ffn_expansion >= 1.0) {
            return Err(Error::invalid("attention config", "ffn_expansion must be >= 1"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

/// Sorted order of `len` positions sliced into `bins` bins of `bin_size`.
///
/// When `len` is not a multiple of `bins`, the sorted sequence is padded by
/// repeating its last (largest-key) index; padded slots never act as keys or
/// queries, which is the same as giving them `-inf` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct BinPartition {
    pub perm: Permutation,
    pub bin_size: usize,
    pub bins: usize,
    pub pad_count: usize,
}

impl BinPartition {
    /// Number of real (non-pad) positions.
    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn padded_len(&self) -> usize {
        self.bins * self.bin_size
    }

    /// Spatial position stored in padded slot `j`.
    pub fn slot(&self, j: usize) -> usize {
        self.perm.forward()[j.min(self.len() - 1)]
    }

    pub fn is_pad(&self, j: usize) -> bool {
        j >= self.len()
    }

    /// Padded slots of bin `b`.
    pub fn bin(&self, b: usize) -> impl Iterator<Item = usize> + '_ {
        (b * self.bin_size..(b + 1) * self.bin_size).map(|j| self.slot(j))
    }

    /// Real members of each within-bin sequence as `(first slot, stride, count)`.
    fn within(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.bins).filter_map(|b| {
            let start = b * self.bin_size;
            let m = self.len().saturating_sub(start).min(self.bin_size);
            (m > 0).then_some((start, 1, m))
        })
    }

    /// Real members of each across-bin sequence (fixed rank in every bin).
    fn across(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.bin_size).filter_map(|r| {
            let m = if r < self.len() {
                (self.len() - r).div_ceil(self.bin_size)
            } else {
                0
            };
            (m > 0).then_some((r, self.bin_size, m))
        })
    }
}

/// Sorts positions by key (stable) and slices them into `bins` equal-count bins.
pub fn histogram_partition<T: Real>(keys: &[T], bins: usize) -> Result<BinPartition> {
    if keys.is_empty() {
        return Err(Error::invalid("histogram_partition", "no positions"));
    }
    if bins == 0 {
        return Err(Error::invalid("histogram_partition", "bins must be >= 1"));
    }
    if keys.iter().any(|k| !k.is_finite()) {
        return Err(Error::invalid("histogram_partition", "non-finite key"));
    }
    let perm = argsort_stable(keys)?;
    let bin_size = keys.len().div_ceil(bins);
    Ok(BinPartition {
        pad_count: bins * bin_size - keys.len(),
        perm,
        bin_size,
        bins,
    })
}

/// Forward FLOPs of one (item, head) attention: `2 * m * m * d` per sequence
/// of padded length `m`, for both the within-bin and across-bin branch.
pub fn attention_flops(p: &BinPartition, head_dim: usize) -> u64 {
    let (b, s, d) = (p.bins as u64, p.bin_size as u64, head_dim as u64);
    2 * d * (b * s * s + s * b * b)
}

fn check_qkv<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize, parts: &[BinPartition]) -> Result<()> {
    if q.dims() != k.dims() || q.dims() != v.dims() {
        return Err(Error::shape("hist_attention", "q, k, v dims differ"));
    }
    if heads == 0 || !q.c().is_multiple_of(heads) {
        return Err(Error::shape(
            "hist_attention",
            format!("channels {} vs heads {heads}", q.c()),
        ));
    }
    if parts.len() != q.n() * heads || parts.iter().any(|p| p.len() != q.plane()) {
        return Err(Error::shape(
            "hist_attention",
            "one partition of the plane size per (item, head)",
        ));
    }
    Ok(())
}

/// Copies the head's channels into a `len x d` row-major matrix in sorted order.
fn gather_rows<T: Real>(t: &Tensor<T>, n: usize, ch0: usize, d: usize, p: &BinPartition) -> Vec<T> {
    let plane = t.plane();
    let base = (n * t.c() + ch0) * plane;
    let src = &t.data()[base..base + d * plane];
    let mut out = vec![T::zero(); p.len() * d];
    for (j, row) in out.chunks_mut(d).enumerate() {
        let pos = p.perm.forward()[j];
        for (e, v) in row.iter_mut().enumerate() {
            *v = src[e * plane + pos];
        }
    }
    out
}

fn scatter_rows<T: Real>(rows: &[T], out: &mut [T], plane: usize, d: usize, p: &BinPartition) {
    for (j, row) in rows.chunks(d).enumerate() {
        let pos = p.perm.forward()[j];
        for (e, &v) in row.iter().enumerate() {
            out[e * plane + pos] = v;
        }
    }
}

/// Softmax attention probabilities of one sequence, `m x m` row-major.
fn probs<T: Real>(qs: &[T], ks: &[T], d: usize, start: usize, stride: usize, m: usize, scale: T) -> Vec<T> {
    let mut s = vec![T::zero(); m * m];
    let rs = (stride * d) as isize;
    T::gemm(
        m,
        d,
        m,
        scale,
        &qs[start * d..],
        rs,
        1,
        &ks[start * d..],
        1,
        rs,
        T::zero(),
        &mut s,
        m as isize,
        1,
    );
    crate::kernels::softmax_lastdim(&mut s, m);
    s
}

fn seq_forward<T: Real>(qs: &[T], ks: &[T], vs: &[T], out: &mut [T], d: usize, seq: (usize, usize, usize), scale: T) {
    let (start, stride, m) = seq;
    let p = probs(qs, ks, d, start, stride, m, scale);
    let rs = (stride * d) as isize;
    T::gemm(
        m,
        m,
        d,
        lit(0.5),
        &p,
        m as isize,
        1,
        &vs[start * d..],
        rs,
        1,
        T::one(),
        &mut out[start * d..],
        rs,
        1,
    );
}

#[allow(clippy::too_many_arguments)]
fn seq_backward<T: Real>(
    qs: &[T],
    ks: &[T],
    vs: &[T],
    dout: &[T],
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
    d: usize,
    seq: (usize, usize, usize),
    scale: T,
) {
    let (start, stride, m) = seq;
    let rs = (stride * d) as isize;
    let p = probs(qs, ks, d, start, stride, m, scale);
    let half = lit::<T>(0.5);
    // dV += 0.5 P^T dO
    T::gemm(
        m,
        m,
        d,
        half,
        &p,
        1,
        m as isize,
        &dout[start * d..],
        rs,
        1,
        T::one(),
        &mut dv[start * d..],
        rs,
        1,
    );
    // dP = 0.5 dO V^T
    let mut dp = vec![T::zero(); m * m];
    T::gemm(
        m,
        d,
        m,
        half,
        &dout[start * d..],
        rs,
        1,
        &vs[start * d..],
        1,
        rs,
        T::zero(),
        &mut dp,
        m as isize,
        1,
    );
    // dS = P * (dP - rowsum(P * dP))
    for (prow, dprow) in p.chunks(m).zip(dp.chunks_mut(m)) {
        let dot: T = prow.iter().zip(dprow.iter()).map(|(&a, &b)| a * b).sum();
        for (g, &pv) in dprow.iter_mut().zip(prow) {
            *g = pv * (*g - dot);
        }
    }
    // dQ += scale dS K ; dK += scale dS^T Q
    T::gemm(
        m,
        m,
        d,
        scale,
        &dp,
        m as isize,
        1,
        &ks[start * d..],
        rs,
        1,
        T::one(),
        &mut dq[start * d..],
        rs,
        1,
    );
    T::gemm(
        m,
        m,
        d,
        scale,
        &dp,
        1,
        m as isize,
        &qs[start * d..],
        rs,
        1,
        T::one(),
        &mut dk[start * d..],
        rs,
        1,
    );
}

/// Mean of within-bin and across-bin softmax attention, per item and head.
pub fn attention_forward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    parts: &[BinPartition],
) -> Result<Tensor<T>> {
    check_qkv(q, k, v, heads, parts)?;
    let d = q.c() / heads;
    let plane = q.plane();
    let scale = lit::<T>(1.0 / (d as f64).sqrt());
    let mut out = Tensor::zeros(q.dims());
    par::for_each_chunk_mut(out.data_mut(), d * plane, |idx, chunk| {
        let (n, h) = (idx / heads, idx % heads);
        let p = &parts[idx];
        let qs = gather_rows(q, n, h * d, d, p);
        let ks = gather_rows(k, n, h * d, d, p);
        let vs = gather_rows(v, n, h * d, d, p);
        let mut os = vec![T::zero(); p.len() * d];
        for seq in p.within().chain(p.across()) {
            seq_forward(&qs, &ks, &vs, &mut os, d, seq, scale);
        }
        scatter_rows(&os, chunk, plane, d, p);
    });
    Ok(out)
}

/// Returns `(dq, dk, dv)`; attention probabilities are recomputed.
pub fn attention_backward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    parts: &[BinPartition],
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    check_qkv(q, k, v, heads, parts)?;
    let d = q.c() / heads;
    let plane = q.plane();
    let scale = lit::<T>(1.0 / (d as f64).sqrt());
    let per: Vec<[Vec<T>; 3]> = par::map_range(q.n() * heads, |idx| {
        let (n, h) = (idx / heads, idx % heads);
        let p = &parts[idx];
        let qs = gather_rows(q, n, h * d, d, p);
        let ks = gather_rows(k, n, h * d, d, p);
        let vs = gather_rows(v, n, h * d, d, p);
        let dout = gather_rows(dy, n, h * d, d, p);
        let mut dq = vec![T::zero(); p.len() * d];
        let mut dk = dq.clone();
        let mut dv = dq.clone();
        for seq in p.within().chain(p.across()) {
            seq_backward(&qs, &ks, &vs, &dout, &mut dq, &mut dk, &mut dv, d, seq, scale);
        }
        let mut outs = [
            vec![T::zero(); d * plane],
            vec![T::zero(); d * plane],
            vec![T::zero(); d * plane],
        ];
        scatter_rows(&dq, &mut outs[0], plane, d, p);
        scatter_rows(&dk, &mut outs[1], plane, d, p);
        scatter_rows(&dv, &mut outs[2], plane, d, p);
        outs
    });
    let mut grads = [
        Tensor::zeros(q.dims()),
        Tensor::zeros(q.dims()),
        Tensor::zeros(q.dims()),
    ];
    for (idx, outs) in per.into_iter().enumerate() {
        for (g, o) in grads.iter_mut().zip(outs) {
            g.data_mut()[idx * d * plane..(idx + 1) * d * plane].copy_from_slice(&o);
        }
    }
    let [dq, dk, dv] = grads;
    Ok((dq, dk, dv))
}

/// Depthwise 3x3 convolution applied in value-sorted spatial order.
///
/// The sort key is the per-position channel mean. The first half of the
/// channels is laid out in ascending key order, the second half in descending
/// order (both stable), so distant positions with similar values become
/// neighbours of the kernel.
#[derive(Debug, Clone)]
pub struct DynamicRangeConv {
    pub dw: Conv,
}

impl DynamicRangeConv {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, init: ConvInit) -> Result<Self> {
        Ok(Self {
            dw: Conv::new(
                pb,
                name,
                channels,
                channels,
                3,
                ConvGeom::depthwise(channels, 1, 1),
                true,
                init,
            )?,
        })
    }

    /// Per-(item, channel) permutations used to sort `x`.
    pub fn permutations<T: Real>(x: &Tensor<T>) -> Result<Arc<Vec<Arc<Permutation>>>> {
        let keys = channel_mean(x);
        let plane = x.plane();
        let half = x.c() / 2;
        let mut perms = Vec::with_capacity(x.n() * x.c());
        for n in 0..x.n() {
            let key = &keys.data()[n * plane..(n + 1) * plane];
            let neg: Vec<T> = key.iter().map(|&v| -v).collect();
            let asc = Arc::new(argsort_stable(key)?);
            let desc = Arc::new(argsort_stable(&neg)?);
            for ch in 0..x.c() {
                perms.push(if ch < half { asc.clone() } else { desc.clone() });
            }
        }
        Ok(Arc::new(perms))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let perms = Self::permutations(tape.value(x))?;
        let sorted = tape.gather(x, perms.clone(), Direction::Forward)?;
        let conv = self.dw.forward(tape, store, sorted)?;
        tape.gather(conv, perms, Direction::Inverse)
    }
}

/// Illumination-guided histogram self-attention.
#[derive(Debug, Clone)]
pub struct IgHsa {
    pub qkv: Conv,
    pub drc: DynamicRangeConv,
    pub illum_proj: Option<Conv>,
    pub proj_out: Conv,
    pub heads: usize,
    pub bins: usize,
}

impl IgHsa {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        cfg: &AttentionConfig,
        illum_channels: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        pb.scoped(name, |pb| {
            Ok(Self {
                qkv: Conv::pointwise(pb, "qkv", c, 3 * c, ConvInit::Fan)?,
                drc: DynamicRangeConv::new(pb, "drc", 3 * c, ConvInit::Fan)?,
                illum_proj: if cfg.illumination_mod {
                    Some(Conv::pointwise(pb, "illum_proj", illum_channels, c, ConvInit::Fan)?)
                } else {
                    None
                },
                proj_out: Conv::pointwise(pb, "proj_out", c, c, ConvInit::Zero)?,
                heads: cfg.heads,
                bins: cfg.bins,
            })
        })
    }

    fn channels(&self) -> usize {
        self.proj_out.c_out
    }

    /// Partitions from the per-head channel mean of the value path.
    pub fn partitions<T: Real>(&self, v: &Tensor<T>) -> Result<Vec<BinPartition>> {
        let d = v.c() / self.heads;
        let plane = v.plane();
        let inv = lit::<T>(1.0 / d as f64);
        let mut parts = Vec::with_capacity(v.n() * self.heads);
        for n in 0..v.n() {
            for h in 0..self.heads {
                let mut key = vec![T::zero(); plane];
                for ch in h * d..(h + 1) * d {
                    let src = &v.data()[(n * v.c() + ch) * plane..][..plane];
                    for (k, &s) in key.iter_mut().zip(src) {
                        *k = *k + s;
                    }
                }
                key.iter_mut().for_each(|k| *k = *k * inv);
                parts.push(histogram_partition(&key, self.bins)?);
            }
        }
        Ok(parts)
    }

    /// Runs everything up to (and including) the attention, before the output projection.
    pub fn attend<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, illum: Var) -> Result<Var> {
        let c = self.channels();
        if tape.dims(illum)[2..] != tape.dims(x)[2..] {
            return Err(Error::shape(
                "ig_hsa",
                format!("illumination {:?} vs features {:?}", tape.dims(illum), tape.dims(x)),
            ));
        }
        let qkv = self.qkv.forward(tape, store, x)?;
        let qkv = self.drc.forward(tape, store, qkv)?;
        let q = tape.slice(qkv, 0, c)?;
        let mut k = tape.slice(qkv, c, c)?;
        let mut v = tape.slice(qkv, 2 * c, c)?;
        if let Some(proj) = &self.illum_proj {
            let g = proj.forward(tape, store, illum)?;
            let g = tape.sigmoid(g);
            let gate = tape.affine(g, 2.0, 0.0);
            k = tape.mul(k, gate)?;
            v = tape.mul(v, gate)?;
        }
        let parts = Arc::new(self.partitions(tape.value(v))?);
        tape.hist_attention(q, k, v, self.heads, parts)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, illum: Var) -> Result<Var> {
        let a = self.attend(tape, store, x, illum)?;
        self.proj_out.forward(tape, store, a)
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let mut f = self.qkv.flops(h, w) + self.drc.dw.flops(h, w) + self.proj_out.flops(h, w);
        if let Some(p) = &self.illum_proj {
            f += p.flops(h, w);
        }
        let l = h * w;
        let bin_size = l.div_ceil(self.bins);
        let d = self.channels() / self.heads;
        let (b, s) = (self.bins as u64, bin_size as u64);
        f + self.heads as u64 * 2 * d as u64 * (b * s * s + s * b * b)
    }
}

/// `project(GELU(a) * b)` where `(a, b)` are the halves of a 1x1 expansion.
#[derive(Debug, Clone)]
pub struct GatedFfn {
    pub expand: Conv,
    pub project: Conv,
    pub hidden: usize,
}

impl GatedFfn {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, expansion: f64) -> Result<Self> {
        if !(expansion >= 1.0) {
            return Err(Error::invalid("gated_ffn", "expansion must be >= 1"));
        }
        let hidden = ((expansion * channels as f64 / 2.0).round() as usize).max(1);
        pb.scoped(name, |pb| {
            Ok(Self {
                expand: Conv::pointwise(pb, "expand", channels, 2 * hidden, ConvInit::Fan)?,
                project: Conv::pointwise(pb, "project", hidden, channels, ConvInit::Zero)?,
                hidden,
            })
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let e = self.expand.forward(tape, store, x)?;
        let a = tape.slice(e, 0, self.hidden)?;
        let b = tape.slice(e, self.hidden, self.hidden)?;
        let a = tape.gelu(a);
        let gated = tape.mul(a, b)?;
        self.project.forward(tape, store, gated)
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        self.expand.flops(h, w) + self.project.flops(h, w)
    }
}

/// `x + IG-HSA(LN(x))` followed by `x + FFN(LN(x))`.
#[derive(Debug, Clone)]
pub struct IgHtb {
    pub norm1: LayerNorm,
    pub attn: IgHsa,
    pub norm2: LayerNorm,
    pub ffn: GatedFfn,
}

impl IgHtb {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        cfg: &AttentionConfig,
        illum_channels: usize,
    ) -> Result<Self> {
        pb.scoped(name, |pb| {
            Ok(Self {
                norm1: LayerNorm::new(pb, "norm1", cfg.channels)?,
                attn: IgHsa::new(pb, "attn", cfg, illum_channels)?,
                norm2: LayerNorm::new(pb, "norm2", cfg.channels)?,
                ffn: GatedFfn::new(pb, "ffn", cfg.channels, cfg.ffn_expansion)?,
            })
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, illum: Var) -> Result<Var> {
        let n1 = self.norm1.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, n1, illum)?;
        let x = tape.add(x, a)?;
        let n2 = self.norm2.forward(tape, store, x)?;
        let f = self.ffn.forward(tape, store, n2)?;
        tape.add(x, f)
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        self.attn.flops(h, w) + self.ffn.flops(h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn partition_sort_and_slice() {
        let p = histogram_partition(&[0.9f64, 0.1, 0.5, 0.3], 2).unwrap();
        assert_eq!(p.bin(0).collect::<Vec<_>>(), vec![1, 3]);
        assert_eq!(p.bin(1).collect::<Vec<_>>(), vec![2, 0]);
        assert_eq!(p.pad_count, 0);
    }

    #[test]
    fn single_bin_holds_everything() {
        let p = histogram_partition(&[0.4f64, 0.2, 0.8], 1).unwrap();
        assert_eq!(p.bin_size, 3);
        let members: BTreeSet<_> = p.bin(0).collect();
        assert_eq!(members, BTreeSet::from([0, 1, 2]));
    }

    #[test]
    fn padding_repeats_largest_key() {
        let keys = [0.2f64, 0.9, 0.1, 0.5, 0.3];
        let p = histogram_partition(&keys, 2).unwrap();
        assert_eq!((p.pad_count, p.bin_size), (1, 3));
        assert_eq!(p.slot(5), 1);
        assert!(p.is_pad(5) && !p.is_pad(4));
    }

    #[test]
    fn partition_errors() {
        assert!(histogram_partition::<f64>(&[], 2).is_err());
        assert!(histogram_partition(&[1.0f64], 0).is_err());
    }

    #[test]
    fn sequences_cover_real_slots_once_per_branch() {
        for len in 1..40usize {
            for bins in 1..8usize {
                let keys: Vec<f64> = (0..len).map(|i| ((i * 37) % 11) as f64).collect();
                let p = histogram_partition(&keys, bins).unwrap();
                for seqs in [p.within().collect::<Vec<_>>(), p.across().collect()] {
                    let mut seen = vec![0; len];
                    for (start, stride, m) in seqs {
                        for t in 0..m {
                            seen[start + t * stride] += 1;
                        }
                    }
                    assert!(seen.iter().all(|&c| c == 1), "len={len} bins={bins}");
                }
            }
        }
    }
}
