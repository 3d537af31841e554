//! The full network: estimator, two IG-HCT UNets with guidance injection and
//! deep-supervision heads, parameter counting and analytic FLOPs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::IgHctb;
use crate::error::{Error, Result};
use crate::hist_attention::AttentionConfig;
use crate::kernels::ConvGeom;
use crate::nn::{Conv, ConvInit};
use crate::param::{ParamBuilder, ParamStore};
use crate::real::Real;
use crate::retinex::{compose_branches, recombine, BranchState, Estimator, RetinexDecomposition};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Number of UNet levels; inputs must be divisible by `2^(LEVELS-1)`.
pub const LEVELS: usize = 3;
pub const SPATIAL_MULTIPLE: usize = 1 << (LEVELS - 1);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub levels: usize,
    pub bins: usize,
    pub heads: Vec<usize>,
    pub ffn_expansion: f64,
    pub dual_branch: bool,
    pub use_ig_htb: bool,
    pub illumination_mod: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    /// Default configuration, sized near 17.5M parameters.
    pub fn full() -> Self {
        Self {
            base_channels: 58,
            levels: LEVELS,
            bins: 16,
            heads: vec![1, 2, 4],
            ffn_expansion: 2.66,
            dual_branch: true,
            use_ig_htb: true,
            illumination_mod: true,
        }
    }

    /// Small configuration for tests and smoke training.
    pub fn tiny() -> Self {
        Self {
            base_channels: 8,
            bins: 16,
            ..Self::full()
        }
    }

    pub fn widths(&self) -> [usize; LEVELS] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c]
    }

    pub fn attention(&self, level: usize) -> AttentionConfig {
        AttentionConfig {
            heads: self.heads[level],
            bins: self.bins,
            channels: self.widths()[level],
            ffn_expansion: self.ffn_expansion,
            illumination_mod: self.illumination_mod,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels != LEVELS {
            return Err(Error::invalid(
                "model config",
                format!("levels must be {LEVELS}, got {}", self.levels),
            ));
        }
        if self.base_channels < 2 || !self.base_channels.is_multiple_of(2) {
            return Err(Error::invalid("model config", "base_channels must be even and >= 2"));
        }
        if self.heads.len() != LEVELS {
            return Err(Error::invalid(
                "model config",
                format!("expected {LEVELS} head counts, got {}", self.heads.len()),
            ));
        }
        for level in 0..LEVELS {
            self.attention(level).validate()?;
        }
        Ok(())
    }
}

/// Conv to `3·s²` channels followed by `pixel_shuffle(s)`.
#[derive(Debug, Clone)]
pub struct DeepHead {
    pub conv: Conv,
    pub scale: usize,
}

impl DeepHead {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, level: usize) -> Result<Self> {
        if !(1..=LEVELS).contains(&level) {
            return Err(Error::invalid(
                "deep_supervision_head",
                format!("level {level} outside 1..={LEVELS}"),
            ));
        }
        let scale = 1 << (level - 1);
        let conv = Conv::same3(pb, name, channels, 3 * scale * scale, 1, ConvInit::Zero)?;
        Ok(Self { conv, scale })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, f: Var) -> Result<Var> {
        let y = self.conv.forward(tape, store, f)?;
        if self.scale == 1 {
            Ok(y)
        } else {
            tape.pixel_shuffle(y, self.scale)
        }
    }
}

/// Applies the deep-supervision head for `level` (1 = full resolution).
pub fn deep_supervision_head<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    head: &DeepHead,
    f: Var,
) -> Result<Var> {
    head.forward(tape, store, f)
}

/// Three-level UNet of IG-HCTB blocks. `forward` returns one full-resolution
/// residual prediction per level, finest first.
#[derive(Debug, Clone)]
pub struct UNet {
    pub stem: Conv,
    pub enc_inject: Vec<Conv>,
    pub enc: Vec<IgHctb>,
    pub down: Vec<Conv>,
    pub up: Vec<Conv>,
    pub dec_inject: Vec<Conv>,
    pub dec: Vec<IgHctb>,
    pub heads: Vec<DeepHead>,
}

impl UNet {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let w = cfg.widths();
        pb.scoped(name, |pb| {
            let stem = Conv::same3(pb, "stem", 3, w[0], 1, ConvInit::Fan)?;
            let mut net = Self {
                stem,
                enc_inject: Vec::new(),
                enc: Vec::new(),
                down: Vec::new(),
                up: Vec::new(),
                dec_inject: Vec::new(),
                dec: Vec::new(),
                heads: Vec::new(),
            };
            for l in 0..LEVELS - 1 {
                net.enc_inject.push(Conv::pointwise(
                    pb,
                    &format!("enc{l}.inject"),
                    w[l],
                    w[l],
                    ConvInit::Fan,
                )?);
                net.enc.push(IgHctb::new(
                    pb,
                    &format!("enc{l}.block"),
                    &cfg.attention(l),
                    w[l],
                    cfg.use_ig_htb,
                )?);
                net.down.push(Conv::new(
                    pb,
                    &format!("down{l}"),
                    w[l],
                    w[l + 1],
                    3,
                    ConvGeom::new(2, 1, 1),
                    true,
                    ConvInit::Fan,
                )?);
            }
            // Decoder index l runs coarsest first: level 2 is the bottleneck.
            for l in (0..LEVELS).rev() {
                if l + 1 < LEVELS {
                    net.up.push(Conv::pointwise(
                        pb,
                        &format!("up{l}"),
                        w[l + 1],
                        4 * w[l],
                        ConvInit::Fan,
                    )?);
                }
                net.dec_inject.push(Conv::pointwise(
                    pb,
                    &format!("dec{l}.inject"),
                    w[l],
                    w[l],
                    ConvInit::Fan,
                )?);
                net.dec.push(IgHctb::new(
                    pb,
                    &format!("dec{l}.block"),
                    &cfg.attention(l),
                    w[l],
                    cfg.use_ig_htb,
                )?);
                net.heads.push(DeepHead::new(pb, &format!("head{l}"), w[l], l + 1)?);
            }
            net.heads.reverse();
            Ok(net)
        })
    }

    fn inject<T: Real>(conv: &Conv, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, f: Var) -> Result<Var> {
        let g = conv.forward(tape, store, f)?;
        tape.add(x, g)
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        guidance: &[Var],
    ) -> Result<Vec<Var>> {
        if guidance.len() != LEVELS {
            return Err(Error::shape(
                "unet",
                format!("expected {LEVELS} guidance maps, got {}", guidance.len()),
            ));
        }
        let mut h = self.stem.forward(tape, store, x)?;
        let mut skips = Vec::with_capacity(LEVELS - 1);
        for l in 0..LEVELS - 1 {
            h = Self::inject(&self.enc_inject[l], tape, store, h, guidance[l])?;
            h = self.enc[l].forward(tape, store, h, guidance[l])?;
            skips.push(h);
            h = self.down[l].forward(tape, store, h)?;
        }
        let mut preds = Vec::with_capacity(LEVELS);
        for (i, l) in (0..LEVELS).rev().enumerate() {
            if l + 1 < LEVELS {
                let e = self.up[i - 1].forward(tape, store, h)?;
                let s = tape.pixel_shuffle(e, 2)?;
                h = tape.add(s, skips[l])?;
            }
            h = Self::inject(&self.dec_inject[i], tape, store, h, guidance[l])?;
            h = self.dec[i].forward(tape, store, h, guidance[l])?;
            preds.push(self.heads[l].forward(tape, store, h)?);
        }
        preds.reverse();
        Ok(preds)
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let hw = |l: usize| (h >> l, w >> l);
        let mut f = self.stem.flops(h, w);
        for l in 0..LEVELS - 1 {
            let (hl, wl) = hw(l);
            f += self.enc_inject[l].flops(hl, wl) + self.enc[l].flops(hl, wl) + self.down[l].flops(hl, wl);
        }
        for (i, l) in (0..LEVELS).rev().enumerate() {
            let (hl, wl) = hw(l);
            if l + 1 < LEVELS {
                let (hc, wc) = hw(l + 1);
                f += self.up[i - 1].flops(hc, wc);
            }
            f += self.dec_inject[i].flops(hl, wl) + self.dec[i].flops(hl, wl) + self.heads[l].conv.flops(hl, wl);
        }
        f
    }
}

/// Network structure; parameter values live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ReHiTNet {
    pub config: ModelConfig,
    pub estimator: Estimator,
    /// `M_R`, or the single restoration UNet when the dual branch is off.
    pub m_r: UNet,
    pub m_l: Option<UNet>,
}

#[derive(Debug, Clone)]
pub struct ReHiTModel<T> {
    pub net: ReHiTNet,
    pub store: ParamStore<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    pub i_out: Var,
    pub decomposition: RetinexDecomposition,
    pub branch: Option<BranchState>,
    /// Per-level reflectance and illumination predictions, finest first.
    pub deep_r: Vec<Var>,
    pub deep_l: Vec<Var>,
    /// Per-level image predictions, finest first; index 0 is `i_out`.
    pub deep_outputs: Vec<Var>,
}

pub fn build_model<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ReHiTModel<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pb = ParamBuilder::new(&mut store, &mut rng);
    let estimator = Estimator::new(&mut pb, "est", cfg.base_channels, &cfg.widths(), cfg.dual_branch)?;
    let (m_r, m_l) = if cfg.dual_branch {
        (UNet::new(&mut pb, "m_r", cfg)?, Some(UNet::new(&mut pb, "m_l", cfg)?))
    } else {
        (UNet::new(&mut pb, "m", cfg)?, None)
    };
    Ok(ReHiTModel {
        net: ReHiTNet {
            config: cfg.clone(),
            estimator,
            m_r,
            m_l,
        },
        store,
    })
}

/// Error unless both spatial dims are positive multiples of four.
pub fn check_spatial(h: usize, w: usize) -> Result<()> {
    let m = SPATIAL_MULTIPLE;
    if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
        return Err(Error::shape(
            "model_forward",
            format!("spatial dims {h}x{w} must be multiples of {m}; reflect-pad the input first"),
        ));
    }
    Ok(())
}

impl ReHiTNet {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, i_sh: Var) -> Result<ForwardOutputs> {
        let [_, _, h, w] = tape.dims(i_sh);
        check_spatial(h, w)?;
        let dec = self.estimator.estimate(tape, store, i_sh)?;
        match (&self.m_l, dec.r_bar, dec.l_bar) {
            (Some(m_l), Some(r_bar), Some(l_bar)) => {
                let (r_prime, l_prime) = compose_branches(tape, i_sh, r_bar, l_bar)?;
                let hr = self.m_r.forward(tape, store, r_prime, &dec.guidance)?;
                let hl = m_l.forward(tape, store, l_prime, &dec.guidance)?;
                let mut deep_r = Vec::with_capacity(LEVELS);
                let mut deep_l = Vec::with_capacity(LEVELS);
                let mut deep_outputs = Vec::with_capacity(LEVELS);
                for (a, b) in hr.into_iter().zip(hl) {
                    let r = tape.add(r_prime, a)?;
                    let l = tape.add(l_prime, b)?;
                    deep_outputs.push(recombine(tape, r, l)?);
                    deep_r.push(r);
                    deep_l.push(l);
                }
                let branch = BranchState {
                    r_bar,
                    l_bar,
                    r_prime,
                    l_prime,
                    r_out: deep_r[0],
                    l_out: deep_l[0],
                    i_out: deep_outputs[0],
                };
                Ok(ForwardOutputs {
                    i_out: deep_outputs[0],
                    decomposition: dec,
                    branch: Some(branch),
                    deep_r,
                    deep_l,
                    deep_outputs,
                })
            }
            (None, _, _) => {
                let preds = self.m_r.forward(tape, store, i_sh, &dec.guidance)?;
                let deep_outputs = preds
                    .into_iter()
                    .map(|p| tape.add(i_sh, p))
                    .collect::<Result<Vec<_>>>()?;
                Ok(ForwardOutputs {
                    i_out: deep_outputs[0],
                    decomposition: dec,
                    branch: None,
                    deep_r: Vec::new(),
                    deep_l: Vec::new(),
                    deep_outputs,
                })
            }
            _ => Err(Error::invalid(
                "model_forward",
                "dual-branch model without estimator heads",
            )),
        }
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let mut f = self.estimator.flops(h, w) + self.m_r.flops(h, w);
        if let Some(m_l) = &self.m_l {
            f += m_l.flops(h, w);
        }
        f
    }
}

impl<T: Real> ReHiTModel<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn forward(&self, tape: &mut Tape<T>, i_sh: Var) -> Result<ForwardOutputs> {
        self.net.forward(tape, &self.store, i_sh)
    }

    /// Forward pass on a plain tensor, returning the unclamped output.
    pub fn infer(&self, i_sh: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.input(i_sh.clone());
        let out = self.forward(&mut tape, x)?;
        Ok(tape.value(out.i_out).clone())
    }
}

pub fn model_forward<T: Real>(m: &ReHiTModel<T>, tape: &mut Tape<T>, i_sh: Var) -> Result<ForwardOutputs> {
    m.forward(tape, i_sh)
}

pub fn count_params<T: Real>(m: &ReHiTModel<T>) -> usize {
    m.store.total_elements()
}

/// Parameter counts grouped by top-level name prefix, in build order.
pub fn param_breakdown<T: Real>(m: &ReHiTModel<T>) -> Vec<(String, usize)> {
    let mut out: Vec<(String, usize)> = Vec::new();
    for p in m.store.iter() {
        let top = p.name.split('.').next().unwrap_or_default();
        match out.iter_mut().find(|(n, _)| n == top) {
            Some((_, c)) => *c += p.numel(),
            None => out.push((top.to_string(), p.numel())),
        }
    }
    out
}

/// Analytic FLOPs of one forward pass on a single `h x w` image.
pub fn estimate_flops<T: Real>(m: &ReHiTModel<T>, h: usize, w: usize) -> Result<u64> {
    check_spatial(h, w)?;
    Ok(m.net.flops(h, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::OpKind;
    use rand::Rng;

    fn image(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([1, 3, h, w], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn fresh_model_squares_input() {
        let m = build_model::<f64>(&ModelConfig::tiny(), 1).unwrap();
        let x = image(2, 16, 16);
        let y = m.infer(&x).unwrap();
        assert_eq!(y, x.map(|v| v * v));
        let mut tape = Tape::new();
        let xi = tape.input(x.clone());
        let out = m.forward(&mut tape, xi).unwrap();
        assert_eq!(out.deep_outputs.len(), LEVELS);
        for &d in &out.deep_outputs {
            assert_eq!(tape.dims(d), [1, 3, 16, 16]);
        }
    }

    #[test]
    fn same_seed_same_params() {
        let a = build_model::<f32>(&ModelConfig::tiny(), 7).unwrap();
        let b = build_model::<f32>(&ModelConfig::tiny(), 7).unwrap();
        let c = build_model::<f32>(&ModelConfig::tiny(), 8).unwrap();
        assert!(a
            .store
            .iter()
            .zip(b.store.iter())
            .all(|(p, q)| p.name == q.name && p.value == q.value));
        assert_eq!(count_params(&a), count_params(&c));
        assert!(a.store.iter().zip(c.store.iter()).any(|(p, q)| p.value != q.value));
    }

    #[test]
    fn rejects_bad_dims_and_configs() {
        let m = build_model::<f64>(&ModelConfig::tiny(), 1).unwrap();
        let err = m.infer(&image(1, 18, 16)).unwrap_err().to_string();
        assert!(err.contains("reflect"), "{err}");
        let cfg = ModelConfig {
            heads: vec![3, 2, 4],
            ..ModelConfig::tiny()
        };
        assert!(build_model::<f64>(&cfg, 0).is_err());
        let cfg = ModelConfig {
            levels: 4,
            ..ModelConfig::tiny()
        };
        assert!(build_model::<f64>(&cfg, 0).is_err());
    }

    #[test]
    fn no_attention_without_htb() {
        let cfg = ModelConfig {
            use_ig_htb: false,
            ..ModelConfig::tiny()
        };
        let m = build_model::<f64>(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(image(3, 16, 16));
        m.forward(&mut tape, x).unwrap();
        assert_eq!(tape.op_count(OpKind::HistAttention), 0);
        let full = build_model::<f64>(&ModelConfig::tiny(), 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(image(3, 16, 16));
        full.forward(&mut tape, x).unwrap();
        assert!(tape.op_count(OpKind::HistAttention) > 0);
    }

    #[test]
    fn ablations_have_fewer_params() {
        let full = count_params(&build_model::<f32>(&ModelConfig::tiny(), 0).unwrap());
        for cfg in [
            ModelConfig {
                dual_branch: false,
                ..ModelConfig::tiny()
            },
            ModelConfig {
                use_ig_htb: false,
                ..ModelConfig::tiny()
            },
            ModelConfig {
                illumination_mod: false,
                ..ModelConfig::tiny()
            },
        ] {
            assert!(count_params(&build_model::<f32>(&cfg, 0).unwrap()) < full, "{cfg:?}");
        }
    }

    #[test]
    fn deep_heads() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let h1 = DeepHead::new(&mut pb, "h1", 8, 1).unwrap();
        let h3 = DeepHead::new(&mut pb, "h3", 8, 3).unwrap();
        assert!(DeepHead::new(&mut pb, "h4", 8, 4).is_err());
        let mut tape = Tape::new();
        let f = tape.input(image(1, 4, 4).map(|v| v + 1.0));
        let f8 = tape.concat(&[f, f, f]).unwrap();
        let f8 = tape.slice(f8, 0, 8).unwrap();
        let a = deep_supervision_head(&mut tape, &store, &h1, f8).unwrap();
        let b = deep_supervision_head(&mut tape, &store, &h3, f8).unwrap();
        assert_eq!(tape.dims(a), [1, 3, 4, 4]);
        assert_eq!(tape.dims(b), [1, 3, 16, 16]);
        assert!(tape.value(b).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn count_params_closed_form() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        Conv::same3(&mut pb, "c", 8, 8, 1, ConvInit::Fan).unwrap();
        assert_eq!(store.total_elements(), 8 * 8 * 9 + 8);
    }

    #[test]
    fn doubling_width_quadruples_convs() {
        let a = build_model::<f32>(&ModelConfig::tiny(), 0).unwrap();
        let b = build_model::<f32>(
            &ModelConfig {
                base_channels: 16,
                ..ModelConfig::tiny()
            },
            0,
        )
        .unwrap();
        for (p, q) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(p.name, q.name);
            // Weights between two width-scaled channel counts grow by exactly 4.
            if p.name.ends_with(".weight")
                && !p.name.contains("head")
                && p.shape.len() == 4
                && p.shape[0] % 8 == 0
                && p.shape[1] % 8 == 0
                && p.shape[1] > 1
            {
                assert_eq!(q.numel(), 4 * p.numel(), "{}", p.name);
            }
        }
    }

    #[test]
    fn analytic_flops_match_tape() {
        for cfg in [
            ModelConfig::tiny(),
            ModelConfig {
                dual_branch: false,
                ..ModelConfig::tiny()
            },
        ] {
            let m = build_model::<f32>(&cfg, 0).unwrap();
            let mut tape = Tape::new();
            let x = tape.input(image(4, 16, 24).cast());
            m.forward(&mut tape, x).unwrap();
            assert_eq!(estimate_flops(&m, 16, 24).unwrap(), tape.flops());
        }
        // Convolutions scale with pixel count; attention within bins does not.
        let conv_only = ModelConfig {
            use_ig_htb: false,
            ..ModelConfig::tiny()
        };
        let m = build_model::<f32>(&conv_only, 0).unwrap();
        let r = estimate_flops(&m, 128, 128).unwrap() as f64 / estimate_flops(&m, 64, 64).unwrap() as f64;
        assert!((r - 4.0).abs() < 1e-12, "{r}");
    }

    #[test]
    fn one_by_one_conv_flops() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let c = Conv::pointwise(&mut pb, "c", 3, 3, ConvInit::Fan).unwrap();
        assert_eq!(c.flops(4, 4), 288);
    }
}
