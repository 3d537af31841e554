use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Sub-pixel rearrangement: input channel `c_out * r^2 + dy * r + dx` lands at
/// output pixel `(y * r + dy, x * r + dx)` of channel `c_out`.
pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    if r == 0 || !x.c().is_multiple_of(r * r) {
        return Err(Error::invalid(
            "pixel_shuffle",
            format!("channels {} not divisible by r^2 = {}", x.c(), r * r),
        ));
    }
    let co = x.c() / (r * r);
    Ok(Tensor::from_fn([x.n(), co, x.h() * r, x.w() * r], |[n, c, y, xx]| {
        x.at(n, c * r * r + (y % r) * r + xx % r, y / r, xx / r)
    }))
}

/// Adjoint of [`pixel_shuffle`] (also its inverse).
pub fn pixel_unshuffle<T: Real>(y: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    if r == 0 || !y.h().is_multiple_of(r) || !y.w().is_multiple_of(r) {
        return Err(Error::invalid("pixel_unshuffle", "spatial dims not divisible by r"));
    }
    Ok(Tensor::from_fn(
        [y.n(), y.c() * r * r, y.h() / r, y.w() / r],
        |[n, c, yy, xx]| {
            let (co, sub) = (c / (r * r), c % (r * r));
            y.at(n, co, yy * r + sub / r, xx * r + sub % r)
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_law_and_layout() {
        let x = Tensor::<f64>::from_vec([1, 4, 1, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.dims(), [1, 1, 2, 2]);
        assert_eq!(y.data(), &[0.0, 1.0, 2.0, 3.0]);
        let x = Tensor::<f64>::from_fn([1, 4, 2, 2], |[_, c, y, x]| (c * 4 + y * 2 + x) as f64);
        assert_eq!(pixel_shuffle(&x, 2).unwrap().dims(), [1, 1, 4, 4]);
        assert_eq!(pixel_unshuffle(&pixel_shuffle(&x, 2).unwrap(), 2).unwrap(), x);
    }

    #[test]
    fn r1_is_identity() {
        let x = Tensor::<f64>::from_fn([2, 3, 2, 5], |[n, c, y, x]| (n + c * 7 + y * 3 + x) as f64);
        assert_eq!(pixel_shuffle(&x, 1).unwrap(), x);
    }

    #[test]
    fn indivisible_channels_rejected() {
        assert!(pixel_shuffle(&Tensor::<f64>::zeros([1, 3, 2, 2]), 2).is_err());
    }
}
