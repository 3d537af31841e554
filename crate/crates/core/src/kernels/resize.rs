use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Interpolation taps along one axis: `(i0, i1, frac)` per output index.
fn taps(in_len: usize, out_len: usize, align_corners: bool) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = if align_corners {
                if out_len > 1 {
                    o as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
                } else {
                    0.0
                }
            } else {
                let scale = in_len as f64 / out_len as f64;
                ((o as f64 + 0.5) * scale - 0.5).max(0.0)
            };
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn check(out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bilinear_resize", "output dims must be >= 1"));
    }
    Ok(())
}

/// Bilinear resampling; half-pixel centers unless `align_corners`.
pub fn bilinear_resize<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize, align_corners: bool) -> Result<Tensor<T>> {
    check(out_h, out_w)?;
    if (out_h, out_w) == (x.h(), x.w()) {
        return Ok(x.clone());
    }
    let ty = taps(x.h(), out_h, align_corners);
    let tx = taps(x.w(), out_w, align_corners);
    Ok(Tensor::from_fn([x.n(), x.c(), out_h, out_w], |[n, c, oy, ox]| {
        let (y0, y1, fy) = ty[oy];
        let (x0, x1, fx) = tx[ox];
        let (fy, fx) = (T::from_f64(fy).unwrap(), T::from_f64(fx).unwrap());
        let top = x.at(n, c, y0, x0) * (T::one() - fx) + x.at(n, c, y0, x1) * fx;
        let bot = x.at(n, c, y1, x0) * (T::one() - fx) + x.at(n, c, y1, x1) * fx;
        top * (T::one() - fy) + bot * fy
    }))
}

pub fn bilinear_resize_backward<T: Real>(in_dims: [usize; 4], dy: &Tensor<T>, align_corners: bool) -> Tensor<T> {
    let [n, c, h, w] = in_dims;
    if (dy.h(), dy.w()) == (h, w) {
        return dy.clone();
    }
    let ty = taps(h, dy.h(), align_corners);
    let tx = taps(w, dy.w(), align_corners);
    let mut dx = Tensor::zeros(in_dims);
    for ni in 0..n {
        for ci in 0..c {
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let g = dy.at(ni, ci, oy, ox);
                    let (fy, fx) = (T::from_f64(fy).unwrap(), T::from_f64(fx).unwrap());
                    let (oy_, ox_) = (T::one() - fy, T::one() - fx);
                    for (yy, xx, wgt) in [
                        (y0, x0, oy_ * ox_),
                        (y0, x1, oy_ * fx),
                        (y1, x0, fy * ox_),
                        (y1, x1, fy * fx),
                    ] {
                        let i = dx.index(ni, ci, yy, xx);
                        dx.data_mut()[i] = dx.data()[i] + g * wgt;
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_dims_is_bit_identical() {
        let x = Tensor::<f64>::from_fn([1, 2, 3, 5], |[_, c, y, x]| {
            (c as f64).sin() + y as f64 * 0.1 + (x as f64).sqrt()
        });
        assert_eq!(bilinear_resize(&x, 3, 5, false).unwrap(), x);
    }

    #[test]
    fn constants_stay_constant() {
        let x = Tensor::<f64>::full([1, 2, 3, 4], 0.375);
        for (h, w) in [(1, 1), (7, 2), (12, 9)] {
            let y = bilinear_resize(&x, h, w, false).unwrap();
            assert!(y.data().iter().all(|&v| (v - 0.375).abs() < 1e-15));
        }
    }

    #[test]
    fn checkerboard_upsample_half_pixel() {
        let x = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let y = bilinear_resize(&x, 4, 4, false).unwrap();
        // Hand evaluation: source coordinate s(o) = max((o + 0.5) / 2 - 0.5, 0)
        // gives s = [0, 0.25, 0.75, 1]; value = v00(1-fy)(1-fx) + v01(1-fy)fx + ...
        let s = [0.0, 0.25, 0.75, 1.0];
        for oy in 0..4 {
            for ox in 0..4 {
                let (fy, fx) = (s[oy], s[ox]);
                let want = (1.0 - fy) * fx + fy * (1.0 - fx);
                assert!((y.at(0, 0, oy, ox) - want).abs() < 1e-15, "{oy},{ox}");
            }
        }
    }

    #[test]
    fn backward_is_adjoint() {
        let x = Tensor::<f64>::from_fn([1, 2, 5, 3], |[_, c, y, x]| {
            ((c * 31 + y * 7 + x * 3) % 11) as f64 / 11.0
        });
        let dy = Tensor::<f64>::from_fn([1, 2, 8, 2], |[_, c, y, x]| ((c * 5 + y * 3 + x) % 7) as f64 - 3.0);
        for ac in [false, true] {
            let y = bilinear_resize(&x, 8, 2, ac).unwrap();
            let dx = bilinear_resize_backward(x.dims(), &dy, ac);
            let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_output_rejected() {
        assert!(bilinear_resize(&Tensor::<f64>::zeros([1, 1, 2, 2]), 0, 3, false).is_err());
    }
}
