use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// `10·log10(peak²/MSE)` over all elements, capped at [`PSNR_CAP`].
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    a.expect_same_dims(b, "psnr")?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.to_f64().unwrap() - y.to_f64().unwrap();
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// Valid separable Gaussian filtering of one plane.
fn filter_plane(p: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            tmp[y * wo + x] = (0..k).map(|i| g[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..k).map(|i| g[i] * tmp[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Mean SSIM over valid 11x11 Gaussian windows, per channel then averaged
/// (over channels and batch items). Assumes a data range of 1.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_same_dims(b, "ssim")?;
    let [n, c, h, w] = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim",
            format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let g = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let plane = h * w;
    let per_plane = crate::par::map_range(n * c, |i| {
        let x: Vec<f64> = a.data()[i * plane..(i + 1) * plane]
            .iter()
            .map(|v| v.to_f64().unwrap())
            .collect();
        let y: Vec<f64> = b.data()[i * plane..(i + 1) * plane]
            .iter()
            .map(|v| v.to_f64().unwrap())
            .collect();
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mx = filter_plane(&x, h, w, &g);
        let my = filter_plane(&y, h, w, &g);
        let sxx = filter_plane(&prod(&x, &x), h, w, &g);
        let syy = filter_plane(&prod(&y, &y), h, w, &g);
        let sxy = filter_plane(&prod(&x, &y), h, w, &g);
        let total: f64 = (0..mx.len())
            .map(|j| {
                let (ux, uy) = (mx[j], my[j]);
                let vx = sxx[j] - ux * ux;
                let vy = syy[j] - uy * uy;
                let cov = sxy[j] - ux * uy;
                ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
            })
            .sum();
        total / mx.len() as f64
    });
    Ok(per_plane.iter().sum::<f64>() / per_plane.len() as f64)
}
