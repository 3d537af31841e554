//! CNN parts of the hybrid block: the dilated residual dense block (DRDB),
//! the semantic-aligned multi-scale module (SAM), and their composition with
//! the histogram transformer block.

use crate::error::{Error, Result};
use crate::hist_attention::{AttentionConfig, IgHtb};
use crate::nn::{Conv, ConvInit};
use crate::param::{ParamBuilder, ParamStore};
use crate::real::Real;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct DrdbConfig {
    pub growth_channels: usize,
    pub layers: usize,
    pub dilations: Vec<usize>,
}

impl DrdbConfig {
    /// Four layers with dilations `[1, 2, 3, 2]` and growth `channels / 2`.
    pub fn for_channels(channels: usize) -> Self {
        Self {
            growth_channels: (channels / 2).max(1),
            layers: 4,
            dilations: vec![1, 2, 3, 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers != self.dilations.len() {
            return Err(Error::invalid(
                "drdb config",
                format!("{} layers but {} dilations", self.layers, self.dilations.len()),
            ));
        }
        if self.growth_channels == 0 || self.dilations.contains(&0) {
            return Err(Error::invalid("drdb config", "growth and dilations must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Drdb {
    pub layers: Vec<Conv>,
    pub fusion: Conv,
}

impl Drdb {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, cfg: &DrdbConfig) -> Result<Self> {
        cfg.validate()?;
        pb.scoped(name, |pb| {
            let mut layers = Vec::with_capacity(cfg.layers);
            for (j, &d) in cfg.dilations.iter().enumerate() {
                let c_in = channels + j * cfg.growth_channels;
                layers.push(Conv::same3(
                    pb,
                    &format!("dense{j}"),
                    c_in,
                    cfg.growth_channels,
                    d,
                    ConvInit::Fan,
                )?);
            }
            let fused_in = channels + cfg.layers * cfg.growth_channels;
            let fusion = Conv::pointwise(pb, "fusion", fused_in, channels, ConvInit::Zero)?;
            Ok(Self { layers, fusion })
        })
    }

    /// Returns the block output and each dense layer's activation.
    pub fn forward_trace<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<(Var, Vec<Var>)> {
        let mut feats = vec![x];
        let mut outs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let inp = if feats.len() == 1 { x } else { tape.concat(&feats)? };
            let y = layer.forward(tape, store, inp)?;
            let y = tape.relu(y);
            feats.push(y);
            outs.push(y);
        }
        let cat = tape.concat(&feats)?;
        let fused = self.fusion.forward(tape, store, cat)?;
        Ok((tape.add(x, fused)?, outs))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(self.forward_trace(tape, store, x)?.0)
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        self.layers.iter().map(|l| l.flops(h, w)).sum::<u64>() + self.fusion.flops(h, w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamConfig {
    /// Pyramid levels at ratios `1, 1/2, 1/4, ...`.
    pub scales: usize,
    pub branch_convs: usize,
}

impl Default for SamConfig {
    fn default() -> Self {
        Self {
            scales: 3,
            branch_convs: 5,
        }
    }
}

/// Pyramid context extraction (one conv branch shared by every scale) and
/// per-pixel softmax fusion across scales, wrapped as a residual with a
/// zero-initialized 1x1 output projection.
#[derive(Debug, Clone)]
pub struct Sam {
    pub branch: Vec<Conv>,
    pub fuse_logits: Conv,
    pub proj_out: Conv,
    pub scales: usize,
}

impl Sam {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, cfg: &SamConfig) -> Result<Self> {
        if cfg.scales == 0 {
            return Err(Error::invalid("sam config", "scales must be >= 1"));
        }
        pb.scoped(name, |pb| {
            let branch = (0..cfg.branch_convs)
                .map(|i| Conv::same3(pb, &format!("branch{i}"), channels, channels, 1, ConvInit::Fan))
                .collect::<Result<Vec<_>>>()?;
            Ok(Self {
                branch,
                fuse_logits: Conv::pointwise(pb, "fuse", cfg.scales * channels, cfg.scales, ConvInit::Fan)?,
                proj_out: Conv::pointwise(pb, "proj_out", channels, channels, ConvInit::Zero)?,
                scales: cfg.scales,
            })
        })
    }

    fn scale_dims(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let f = 1usize << (self.scales - 1);
        if h < f || w < f {
            return Err(Error::shape(
                "sam_pyramid_extract",
                format!("{h}x{w} too small for {} scales (need >= {f})", self.scales),
            ));
        }
        Ok((0..self.scales).map(|s| (h >> s, w >> s)).collect())
    }

    pub fn pyramid_extract<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Vec<Var>> {
        let [_, _, h, w] = tape.dims(x);
        let mut out = Vec::with_capacity(self.scales);
        for (s, (hs, ws)) in self.scale_dims(h, w)?.into_iter().enumerate() {
            let mut y = if s == 0 { x } else { tape.resize(x, hs, ws, false)? };
            for conv in &self.branch {
                y = conv.forward(tape, store, y)?;
                y = tape.relu(y);
            }
            out.push(y);
        }
        Ok(out)
    }

    /// Returns the fused features and the per-pixel scale weights `(n, scales, h, w)`.
    pub fn cross_scale_fuse<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        pyramid: &[Var],
    ) -> Result<(Var, Var)> {
        let first = *pyramid
            .first()
            .ok_or_else(|| Error::invalid("sam_cross_scale_fuse", "empty pyramid"))?;
        let [_, _, h, w] = tape.dims(first);
        let mut ups = Vec::with_capacity(pyramid.len());
        for &p in pyramid {
            ups.push(tape.resize(p, h, w, false)?);
        }
        let cat = tape.concat(&ups)?;
        let logits = self.fuse_logits.forward(tape, store, cat)?;
        let weights = tape.softmax_channels(logits);
        let mut acc: Option<Var> = None;
        for (s, &u) in ups.iter().enumerate() {
            let ws = tape.slice(weights, s, 1)?;
            let term = tape.mul_channel(u, ws)?;
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
        Ok((acc.expect("nonempty pyramid"), weights))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let pyramid = self.pyramid_extract(tape, store, x)?;
        let (fused, _) = self.cross_scale_fuse(tape, store, &pyramid)?;
        let out = self.proj_out.forward(tape, store, fused)?;
        tape.add(x, out)
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let dims = self.scale_dims(h, w).unwrap_or_default();
        let branch: u64 = dims
            .iter()
            .map(|&(hs, ws)| self.branch.iter().map(|c| c.flops(hs, ws)).sum::<u64>())
            .sum();
        branch + self.fuse_logits.flops(h, w) + self.proj_out.flops(h, w)
    }
}

/// One encoder/decoder block: DRDB, then (optionally) IG-HTB, then SAM.
#[derive(Debug, Clone)]
pub struct IgHctb {
    pub drdb: Drdb,
    pub htb: Option<IgHtb>,
    pub sam: Sam,
}

impl IgHctb {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        attn: &AttentionConfig,
        illum_channels: usize,
        use_ig_htb: bool,
    ) -> Result<Self> {
        let c = attn.channels;
        pb.scoped(name, |pb| {
            Ok(Self {
                drdb: Drdb::new(pb, "drdb", c, &DrdbConfig::for_channels(c))?,
                htb: if use_ig_htb {
                    Some(IgHtb::new(pb, "htb", attn, illum_channels)?)
                } else {
                    None
                },
                sam: Sam::new(pb, "sam", c, &SamConfig::default())?,
            })
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, illum: Var) -> Result<Var> {
        let mut y = self.drdb.forward(tape, store, x)?;
        if let Some(htb) = &self.htb {
            y = htb.forward(tape, store, y, illum)?;
        }
        self.sam.forward(tape, store, y)
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        self.drdb.flops(h, w) + self.htb.as_ref().map_or(0, |b| b.flops(h, w)) + self.sam.flops(h, w)
    }
}
