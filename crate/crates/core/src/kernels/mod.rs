//! Forward and backward kernels on plain tensors.

pub mod conv;
pub mod norm;
pub mod resize;
pub mod shuffle;
pub mod softmax;

pub use conv::{conv2d_backward, conv2d_forward, ConvGeom, ConvShape};
pub use norm::{layer_norm_backward, layer_norm_forward};
pub use resize::{bilinear_resize, bilinear_resize_backward};
pub use shuffle::{pixel_shuffle, pixel_unshuffle};
pub use softmax::{softmax_channels, softmax_channels_backward, softmax_lastdim};
