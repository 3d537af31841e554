use rand::Rng;

use crate::data::ShadowPair;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::retinex::GroundTruthDecomposition;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flip {
    None,
    Horizontal,
    Vertical,
}

/// `quarter_turns` counter-clockwise rotations followed by an optional flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dihedral {
    pub quarter_turns: u8,
    pub flip: Flip,
}

fn rot90<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = t.dims();
    Tensor::from_fn([n, c, w, h], |[b, ch, y, x]| t.at(b, ch, x, w - 1 - y))
}

fn flip<T: Real>(t: &Tensor<T>, f: Flip) -> Tensor<T> {
    let [_, _, h, w] = t.dims();
    match f {
        Flip::None => t.clone(),
        Flip::Horizontal => Tensor::from_fn(t.dims(), |[b, c, y, x]| t.at(b, c, y, w - 1 - x)),
        Flip::Vertical => Tensor::from_fn(t.dims(), |[b, c, y, x]| t.at(b, c, h - 1 - y, x)),
    }
}

impl Dihedral {
    pub const IDENTITY: Self = Self {
        quarter_turns: 0,
        flip: Flip::None,
    };

    /// The 12 sampled transforms: 4 rotations x {none, hflip, vflip}.
    pub fn all() -> impl Iterator<Item = Self> {
        (0..4u8)
            .flat_map(|q| [Flip::None, Flip::Horizontal, Flip::Vertical].map(|flip| Self { quarter_turns: q, flip }))
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        let i = rng.random_range(0..12);
        Self::all().nth(i).expect("12 transforms")
    }

    pub fn apply<T: Real>(&self, t: &Tensor<T>) -> Tensor<T> {
        let mut out = t.clone();
        for _ in 0..self.quarter_turns % 4 {
            out = rot90(&out);
        }
        flip(&out, self.flip)
    }

    pub fn invert<T: Real>(&self, t: &Tensor<T>) -> Tensor<T> {
        let mut out = flip(t, self.flip);
        for _ in 0..(4 - self.quarter_turns % 4) % 4 {
            out = rot90(&out);
        }
        out
    }
}

fn map_pair<T: Real>(pair: &ShadowPair<T>, f: impl Fn(&Tensor<T>) -> Tensor<T>) -> ShadowPair<T> {
    ShadowPair {
        i_sh: f(&pair.i_sh),
        i_gt: f(&pair.i_gt),
        gt_decomp: pair.gt_decomp.as_ref().map(|g| GroundTruthDecomposition {
            r_gt: f(&g.r_gt),
            l_gt: f(&g.l_gt),
            r_hat: f(&g.r_hat),
            l_hat: f(&g.l_hat),
        }),
        id: pair.id.clone(),
    }
}

/// Applies one uniformly sampled dihedral transform to every image of the pair.
pub fn augment_pair<T: Real>(pair: &ShadowPair<T>, rng: &mut impl Rng) -> ShadowPair<T> {
    let d = Dihedral::sample(rng);
    map_pair(pair, |t| d.apply(t))
}

/// Cuts the same uniformly placed `size x size` window from every image.
pub fn random_crop_pair<T: Real>(pair: &ShadowPair<T>, size: usize, rng: &mut impl Rng) -> Result<ShadowPair<T>> {
    let [_, _, h, w] = pair.i_sh.dims();
    if size == 0 || size > h || size > w {
        return Err(Error::invalid(
            "random_crop_pair",
            format!("{}: image {h}x{w} smaller than crop {size}", pair.id),
        ));
    }
    let oy = rng.random_range(0..=h - size);
    let ox = rng.random_range(0..=w - size);
    Ok(map_pair(pair, |t| {
        let [n, c, _, _] = t.dims();
        Tensor::from_fn([n, c, size, size], |[b, ch, y, x]| t.at(b, ch, y + oy, x + ox))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn([1, 2, h, w], |[_, c, y, x]| (c * 10000 + y * 100 + x) as f64)
    }

    #[test]
    fn group_properties() {
        let t = ramp(3, 5);
        let r = Dihedral {
            quarter_turns: 1,
            flip: Flip::None,
        };
        let mut x = t.clone();
        for _ in 0..4 {
            x = r.apply(&x);
        }
        assert_eq!(x, t);
        assert_eq!(r.apply(&t).dims(), [1, 2, 5, 3]);
        // Counter-clockwise: the top-right pixel moves to the top-left.
        assert_eq!(r.apply(&t).at(0, 0, 0, 0), t.at(0, 0, 0, 4));
        let h = Dihedral {
            quarter_turns: 0,
            flip: Flip::Horizontal,
        };
        assert_eq!(h.apply(&h.apply(&t)), t);
        for d in Dihedral::all() {
            assert_eq!(d.invert(&d.apply(&t)), t, "{d:?}");
        }
        assert_eq!(Dihedral::all().count(), 12);
    }

    #[test]
    fn augment_is_paired_and_reproducible() {
        let p = ShadowPair::new(ramp(4, 6), ramp(4, 6).map(|v| v + 0.5), "p").unwrap();
        let a: Vec<_> = (0..5)
            .scan(ChaCha8Rng::seed_from_u64(3), |r, _| Some(augment_pair(&p, r)))
            .collect();
        let b: Vec<_> = (0..5)
            .scan(ChaCha8Rng::seed_from_u64(3), |r, _| Some(augment_pair(&p, r)))
            .collect();
        assert_eq!(a, b);
        for q in &a {
            assert_eq!(q.i_gt, q.i_sh.map(|v| v + 0.5));
        }
    }

    #[test]
    fn crop_matches_offsets() {
        let p = ShadowPair::new(ramp(8, 10), ramp(8, 10), "p").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let same = random_crop_pair(&p, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(same.i_sh.dims(), [1, 2, 8, 8]);
        for _ in 0..10 {
            let c = random_crop_pair(&p, 4, &mut rng).unwrap();
            assert_eq!(c.i_sh.dims(), [1, 2, 4, 4]);
            let v = c.i_sh.at(0, 0, 0, 0) as usize;
            let (oy, ox) = (v / 100, v % 100);
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(c.i_sh.at(0, 1, y, x), (10000 + (oy + y) * 100 + ox + x) as f64);
                }
            }
        }
        let full = ShadowPair::new(ramp(4, 4), ramp(4, 4), "q").unwrap();
        assert_eq!(random_crop_pair(&full, 4, &mut rng).unwrap(), full);
        assert!(random_crop_pair(&full, 5, &mut rng).is_err());
    }
}
