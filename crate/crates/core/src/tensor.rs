//! Dense NCHW tensors and spatial permutations.

use crate::error::{Error, Result};
use crate::real::Real;

pub type Dims = [usize; 4];

/// Rank-4 row-major `(n, c, h, w)` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: Dims, value: T) -> Self {
        Self {
            dims,
            data: vec![value; numel(dims)],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::shape("tensor", format!("zero-sized dims {dims:?}")));
        }
        if data.len() != numel(dims) {
            return Err(Error::shape(
                "tensor",
                format!("dims {dims:?} need {} values, got {}", numel(dims), data.len()),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut data = Vec::with_capacity(numel(dims));
        for n in 0..dims[0] {
            for c in 0..dims[1] {
                for y in 0..dims[2] {
                    for x in 0..dims[3] {
                        data.push(f([n, c, y, x]));
                    }
                }
            }
        }
        Self { dims, data }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            dims: [1, 1, 1, 1],
            data: vec![v],
        }
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }
    #[inline]
    pub fn n(&self) -> usize {
        self.dims[0]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.dims[1]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.dims[2]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.dims[3]
    }
    #[inline]
    pub fn plane(&self) -> usize {
        self.dims[2] * self.dims[3]
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// Reinterprets the buffer under new dims with the same element count.
    pub fn reshape(mut self, dims: Dims) -> Result<Self> {
        if numel(dims) != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {dims:?} changes element count", self.dims),
            ));
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_dims(other, "zip_map")?;
        Ok(Self {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn expect_same_dims(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.dims, other.dims)));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.data.len()).unwrap()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.max(T::zero()).min(T::one()))
    }

    /// Casts to another precision.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    /// Copies batch item `n` out as a single-item tensor.
    pub fn batch_item(&self, n: usize) -> Self {
        let per = self.dims[1] * self.plane();
        Self {
            dims: [1, self.dims[1], self.dims[2], self.dims[3]],
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Concatenates single-or-multi item tensors along the batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::invalid("stack", "no tensors"))?;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            if t.dims[1..] != first.dims[1..] {
                return Err(Error::shape("stack", format!("{:?} vs {:?}", t.dims, first.dims)));
            }
            n += t.dims[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Self {
            dims: [n, first.dims[1], first.dims[2], first.dims[3]],
            data,
        })
    }
}

#[inline]
pub fn numel(dims: Dims) -> usize {
    dims.iter().product()
}

/// A bijection on `0..len` with its inverse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    forward: Vec<usize>,
    inverse: Vec<usize>,
}

impl Permutation {
    pub fn identity(len: usize) -> Self {
        let forward: Vec<usize> = (0..len).collect();
        Self {
            inverse: forward.clone(),
            forward,
        }
    }

    pub fn from_forward(forward: Vec<usize>) -> Result<Self> {
        let mut inverse = vec![usize::MAX; forward.len()];
        for (i, &f) in forward.iter().enumerate() {
            if f >= forward.len() || inverse[f] != usize::MAX {
                return Err(Error::invalid("permutation", "forward map is not a bijection"));
            }
            inverse[f] = i;
        }
        Ok(Self { forward, inverse })
    }

    pub fn forward(&self) -> &[usize] {
        &self.forward
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Ascending stable argsort: `forward[i]` is the index of the i-th smallest value.
pub fn argsort_stable<T: Real>(values: &[T]) -> Result<Permutation> {
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("argsort_stable", "NaN in sort keys"));
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    // sort_by is stable; NaN was rejected above so partial_cmp never fails.
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    Permutation::from_forward(idx)
}

/// Gathers `x` through `p`: forward yields `x[p.forward[i]]`, inverse undoes it.
pub fn permute_apply<T: Copy>(x: &[T], p: &Permutation, direction: Direction) -> Result<Vec<T>> {
    if x.len() != p.len() {
        return Err(Error::shape(
            "permute_apply",
            format!("view length {} vs permutation length {}", x.len(), p.len()),
        ));
    }
    let map = match direction {
        Direction::Forward => &p.forward,
        Direction::Inverse => &p.inverse,
    };
    Ok(map.iter().map(|&i| x[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn argsort_examples() {
        let p = argsort_stable(&[3.0f64, 1.0, 2.0]).unwrap();
        assert_eq!(p.forward(), &[1, 2, 0]);
        let p = argsort_stable(&[5.0f64, 5.0, 5.0]).unwrap();
        assert_eq!(p.forward(), &[0, 1, 2]);
        assert!(argsort_stable(&[1.0f64, f64::NAN]).is_err());
    }

    #[test]
    fn permute_examples() {
        let p = argsort_stable(&[3.0f64, 1.0, 2.0]).unwrap();
        let y = permute_apply(&[30, 10, 20], &p, Direction::Forward).unwrap();
        assert_eq!(y, vec![10, 20, 30]);
        let id = Permutation::identity(3);
        assert_eq!(
            permute_apply(&[7, 8, 9], &id, Direction::Forward).unwrap(),
            vec![7, 8, 9]
        );
        assert!(permute_apply(&[1, 2], &id, Direction::Forward).is_err());
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f64>::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::from_vec([1, 0, 2, 2], vec![]).is_err());
    }

    proptest! {
        #[test]
        fn argsort_sorts_and_round_trips(values in prop::collection::vec(-1e3f64..1e3, 1..200)) {
            let p = argsort_stable(&values).unwrap();
            let sorted = permute_apply(&values, &p, Direction::Forward).unwrap();
            prop_assert!(sorted.windows(2).all(|w| w[0] <= w[1]));
            let back = permute_apply(&sorted, &p, Direction::Inverse).unwrap();
            prop_assert_eq!(back, values);
            for i in 0..p.len() {
                prop_assert_eq!(p.inverse()[p.forward()[i]], i);
            }
        }
    }
}
