use crate::real::Real;
use crate::tensor::Tensor;

/// In-place softmax over each `cols`-wide row, with max subtraction.
pub fn softmax_lastdim<T: Real>(rows: &mut [T], cols: usize) {
    for row in rows.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Softmax across the channel axis at every spatial location.
pub fn softmax_channels<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (c, plane) = (x.c(), x.plane());
    let mut y = x.clone();
    let mut buf = vec![T::zero(); c];
    for n in 0..x.n() {
        let base = n * c * plane;
        for p in 0..plane {
            for ch in 0..c {
                buf[ch] = x.data()[base + ch * plane + p];
            }
            softmax_lastdim(&mut buf, c);
            for ch in 0..c {
                y.data_mut()[base + ch * plane + p] = buf[ch];
            }
        }
    }
    y
}

/// Backward of [`softmax_channels`] from its output `y`.
pub fn softmax_channels_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let (c, plane) = (y.c(), y.plane());
    let mut dx = Tensor::zeros(y.dims());
    for n in 0..y.n() {
        let base = n * c * plane;
        for p in 0..plane {
            let dot: T = (0..c)
                .map(|ch| y.data()[base + ch * plane + p] * dy.data()[base + ch * plane + p])
                .sum();
            for ch in 0..c {
                let i = base + ch * plane + p;
                dx.data_mut()[i] = y.data()[i] * (dy.data()[i] - dot);
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_row() {
        let mut r = [0.0f64; 3];
        softmax_lastdim(&mut r, 3);
        for v in r {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let mut r = [1000.0f64, 0.0];
        softmax_lastdim(&mut r, 2);
        assert!((r[0] - 1.0).abs() < 1e-12 && r[1] >= 0.0 && r[1] < 1e-12);
        assert!(r.iter().all(|v| v.is_finite()));
    }

    proptest! {
        #[test]
        fn rows_sum_to_one_and_shift_invariant(
            row in prop::collection::vec(-50.0f64..50.0, 1..16),
            shift in -100.0f64..100.0,
        ) {
            let cols = row.len();
            let mut a = row.clone();
            softmax_lastdim(&mut a, cols);
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let mut b: Vec<f64> = row.iter().map(|v| v + shift).collect();
            softmax_lastdim(&mut b, cols);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
