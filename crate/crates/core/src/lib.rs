//! Mask-free shadow removal with a Retinex-guided hybrid CNN/transformer UNet.
//!
//! The crate is self-contained: a small reverse-mode tape ([`tape`]) over dense
//! NCHW tensors ([`tensor`]) carries the network ([`model`]), its training
//! recipe ([`training`]) and the data/metric tooling ([`data`]).

// `!(x >= lo)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Kernels index several parallel buffers with one loop variable.
#![allow(clippy::needless_range_loop)]

pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod hist_attention;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod par;
pub mod param;
pub mod real;
pub mod retinex;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use real::{DType, Real};
pub use tape::{OpKind, Tape, Var};
pub use tensor::{Permutation, Tensor};
