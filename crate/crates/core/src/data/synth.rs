use std::f64::consts::TAU;

use std::path::Path;

use rand::Rng;

use super::ShadowPair;
use crate::checkpoint::{decode_records, encode_records};
use crate::error::{Error, Result};
use crate::retinex::{apply_perturbation_model, GroundTruthDecomposition};
use crate::tensor::Tensor;

pub const MIN_SYNTH_SIZE: usize = 16;
/// Upper bound on the reflectance perturbation amplitude.
pub const MAX_REFLECTANCE_AMPLITUDE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct ShadowConfig {
    /// Number of shadow polygons.
    pub count: usize,
    /// Gaussian blur sigma of the mask edge, in pixels.
    pub softness: f64,
    /// Fraction of illumination removed inside the mask, in `[0, 1)`.
    pub attenuation: f64,
    /// Amplitude of the smooth reflectance perturbation, at most 0.05.
    pub reflectance_amplitude: f64,
}

impl Default for ShadowConfig {
    fn default() -> Self {
        Self {
            count: 2,
            softness: 2.0,
            attenuation: 0.6,
            reflectance_amplitude: 0.02,
        }
    }
}

impl ShadowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.attenuation) {
            return Err(Error::invalid(
                "shadow config",
                format!("attenuation {} outside [0, 1)", self.attenuation),
            ));
        }
        if !(0.0..=MAX_REFLECTANCE_AMPLITUDE).contains(&self.reflectance_amplitude) {
            return Err(Error::invalid(
                "shadow config",
                format!("reflectance_amplitude {} outside [0, 0.05]", self.reflectance_amplitude),
            ));
        }
        if !(self.softness >= 0.0) {
            return Err(Error::invalid("shadow config", "softness must be >= 0"));
        }
        Ok(())
    }
}

/// Random smooth field in `[-1, 1]` built from a few low-frequency cosines.
fn smooth_field(rng: &mut impl Rng, size: usize) -> Vec<f64> {
    let terms: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.2..1.0),
                rng.random_range(0.0..2.0),
                rng.random_range(0.0..2.0),
                rng.random_range(0.0..TAU),
            )
        })
        .collect();
    let norm: f64 = terms.iter().map(|t| t.0).sum();
    let s = size as f64;
    (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64 / s, (i / size) as f64 / s);
            terms
                .iter()
                .map(|&(a, fx, fy, ph)| a * (TAU * (fx * x + fy * y) + ph).cos())
                .sum::<f64>()
                / norm
        })
        .collect()
}

/// Reflectance (gradients, smooth texture and flat primitives, in `[0.05, 1]`)
/// and illumination (smooth field in `[0.3, 1]`), both `[1, 3, size, size]`.
pub fn synth_clean_image(size: usize, rng: &mut impl Rng) -> Result<(Tensor<f64>, Tensor<f64>)> {
    if size < MIN_SYNTH_SIZE {
        return Err(Error::invalid(
            "synth_clean_image",
            format!("size {size} < {MIN_SYNTH_SIZE}"),
        ));
    }
    let s = size as f64;
    let mut r = Tensor::zeros([1, 3, size, size]);
    for c in 0..3 {
        let (base, gx, gy) = (
            rng.random_range(0.2..0.8),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
        );
        let tex = smooth_field(rng, size);
        let amp = rng.random_range(0.0..0.15);
        for y in 0..size {
            for x in 0..size {
                let v = base + gx * (x as f64 / s - 0.5) + gy * (y as f64 / s - 0.5) + amp * tex[y * size + x];
                r.set(0, c, y, x, v);
            }
        }
    }
    for _ in 0..rng.random_range(2..6) {
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..1.0));
        let (cx, cy) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let rad = rng.random_range(s / 10.0..s / 4.0);
        let disk = rng.random_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = ((x as f64 + 0.5 - cx).abs(), (y as f64 + 0.5 - cy).abs());
                let inside = if disk {
                    dx * dx + dy * dy <= rad * rad
                } else {
                    dx <= rad && dy <= 0.6 * rad
                };
                if inside {
                    for (c, &v) in color.iter().enumerate() {
                        r.set(0, c, y, x, v);
                    }
                }
            }
        }
    }
    let r = r.map(|v| v.clamp(0.05, 1.0));

    let field = smooth_field(rng, size);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.05));
    let l = Tensor::from_fn([1, 3, size, size], |[_, c, y, x]| {
        ((0.65 + 0.35 * field[y * size + x]) * (1.0 - tint[c])).clamp(0.3, 1.0)
    });
    Ok((r, l))
}

fn polygon_mask(rng: &mut impl Rng, size: usize) -> Vec<f64> {
    let s = size as f64;
    let (cx, cy) = (
        rng.random_range(0.15 * s..0.85 * s),
        rng.random_range(0.15 * s..0.85 * s),
    );
    let radius = rng.random_range(s / 8.0..s / 3.0);
    let k = rng.random_range(3..=7);
    let mut angles: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..TAU)).collect();
    angles.sort_by(f64::total_cmp);
    let verts: Vec<(f64, f64)> = angles
        .iter()
        .map(|&a| {
            let rr = radius * rng.random_range(0.6..1.0);
            (cx + rr * a.cos(), cy + rr * a.sin())
        })
        .collect();
    let mut mask = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut inside = false;
            for i in 0..k {
                let (x0, y0) = verts[i];
                let (x1, y1) = verts[(i + 1) % k];
                if (y0 > py) != (y1 > py) && px < x0 + (py - y0) * (x1 - x0) / (y1 - y0) {
                    inside = !inside;
                }
            }
            if inside {
                mask[y * size + x] = 1.0;
            }
        }
    }
    mask
}

/// Separable Gaussian blur with clamped borders.
fn blur(mask: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return mask.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = taps.iter().sum();
    let clampi = |v: isize| v.clamp(0, size as isize - 1) as usize;
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; size * size];
        for y in 0..size {
            for x in 0..size {
                let mut acc = 0.0;
                for (t, &g) in taps.iter().enumerate() {
                    let o = t as isize - radius;
                    let (sx, sy) = if horizontal {
                        (clampi(x as isize + o), y)
                    } else {
                        (x, clampi(y as isize + o))
                    };
                    acc += g * src[sy * size + sx];
                }
                out[y * size + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(mask, true), false)
}

/// Soft shadow mask in `[0, 1]`: union of blurred random polygons.
pub fn shadow_mask(size: usize, cfg: &ShadowConfig, rng: &mut impl Rng) -> Vec<f64> {
    let mut mask = vec![0.0; size * size];
    for _ in 0..cfg.count {
        let m = blur(&polygon_mask(rng, size), size, cfg.softness);
        for (a, b) in mask.iter_mut().zip(m) {
            *a = f64::max(*a, b);
        }
    }
    mask
}

/// Synthesizes a shadowed/shadow-free pair with its ground-truth factors.
pub fn synth_shadow_pair(size: usize, rng: &mut impl Rng, cfg: &ShadowConfig) -> Result<ShadowPair<f64>> {
    cfg.validate()?;
    let (r_gt, l_gt) = synth_clean_image(size, rng)?;
    let mask = shadow_mask(size, cfg, rng);
    let l_hat = Tensor::from_fn(l_gt.dims(), |[_, c, y, x]| {
        -cfg.attenuation * mask[y * size + x] * l_gt.at(0, c, y, x)
    });
    let fields: Vec<Vec<f64>> = (0..3).map(|_| smooth_field(rng, size)).collect();
    let r_hat = Tensor::from_fn(r_gt.dims(), |[_, c, y, x]| {
        cfg.reflectance_amplitude * fields[c][y * size + x]
    });
    let i_gt = r_gt.zip_map(&l_gt, |a, b| a * b)?.clamp01();
    let g = GroundTruthDecomposition {
        r_gt,
        l_gt,
        r_hat,
        l_hat,
    };
    let i_sh = apply_perturbation_model(&g)?;
    Ok(ShadowPair {
        i_sh,
        i_gt,
        gt_decomp: Some(g),
        id: "synth".into(),
    })
}

const SIDECAR_FIELDS: [&str; 4] = ["r_gt", "l_gt", "r_hat", "l_hat"];

/// Writes the four decomposition factors in the checkpoint record format (f64).
pub fn save_decomposition(g: &GroundTruthDecomposition<f64>, path: &Path) -> Result<()> {
    let tensors = [&g.r_gt, &g.l_gt, &g.r_hat, &g.l_hat];
    let dims: Vec<[usize; 4]> = tensors.iter().map(|t| t.dims()).collect();
    let bytes = encode_records(
        SIDECAR_FIELDS
            .iter()
            .zip(&dims)
            .zip(tensors)
            .map(|((&n, d), t)| (n, &d[..], t.data())),
    );
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_decomposition(path: &Path) -> Result<GroundTruthDecomposition<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut records = decode_records(&bytes)?;
    if records.len() != 4 || records.iter().zip(SIDECAR_FIELDS).any(|(r, n)| r.name != n) {
        return Err(Error::Data(format!(
            "{}: expected records {SIDECAR_FIELDS:?}",
            path.display()
        )));
    }
    let mut take = || -> Result<Tensor<f64>> {
        let r = records.remove(0);
        let dims: [usize; 4] = r
            .shape
            .as_slice()
            .try_into()
            .map_err(|_| Error::Data(format!("{}: {} is not 4-d", path.display(), r.name)))?;
        Tensor::from_vec(dims, r.data)
    };
    let g = GroundTruthDecomposition {
        r_gt: take()?,
        l_gt: take()?,
        r_hat: take()?,
        l_hat: take()?,
    };
    for t in [&g.l_gt, &g.r_hat, &g.l_hat] {
        g.r_gt.expect_same_dims(t, "decomposition sidecar")?;
    }
    Ok(g)
}
