//! Reflective padding of image tensors to a size the network accepts.

use rehit::real::Real;
use rehit::tensor::Tensor;

/// Mirror index into `0..len` without repeating the edge sample.
fn reflect(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let m = i % period;
    if m < len {
        m
    } else {
        period - m
    }
}

pub fn round_up(v: usize, multiple: usize) -> usize {
    v.div_ceil(multiple) * multiple
}

/// Pads bottom and right by reflection up to the next multiple of `multiple`.
pub fn reflect_pad<T: Real>(x: &Tensor<T>, multiple: usize) -> Tensor<T> {
    let [n, c, h, w] = x.dims();
    let (ph, pw) = (round_up(h, multiple), round_up(w, multiple));
    Tensor::from_fn([n, c, ph, pw], |[b, ch, y, xx]| {
        x.at(b, ch, reflect(y, h), reflect(xx, w))
    })
}

/// Top-left `h x w` window.
pub fn crop<T: Real>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let [n, c, _, _] = x.dims();
    Tensor::from_fn([n, c, h, w], |[b, ch, y, xx]| x.at(b, ch, y, xx))
}
