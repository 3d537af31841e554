//! Images, synthetic shadow pairs, manifests and evaluation metrics.

mod eval;
mod image_io;
mod manifest;
mod metrics;
mod synth;

pub use eval::{evaluate_dir, EvalReport, EvalRow};
pub use image_io::{list_images, load_image, save_image};
pub use manifest::{DatasetManifest, ManifestEntry};
pub use metrics::{gaussian_window, psnr, ssim, PSNR_CAP};
pub use synth::{load_decomposition, save_decomposition, synth_clean_image, synth_shadow_pair, ShadowConfig};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::retinex::GroundTruthDecomposition;
use crate::tensor::Tensor;

/// Paired shadowed input and shadow-free target.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowPair<T> {
    pub i_sh: Tensor<T>,
    pub i_gt: Tensor<T>,
    /// Present for synthetic pairs.
    pub gt_decomp: Option<GroundTruthDecomposition<T>>,
    pub id: String,
}

impl<T: Real> ShadowPair<T> {
    pub fn new(i_sh: Tensor<T>, i_gt: Tensor<T>, id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        i_sh.expect_same_dims(&i_gt, "shadow pair").map_err(|_| {
            Error::Data(format!(
                "{id}: input {:?} and target {:?} differ",
                i_sh.dims(),
                i_gt.dims()
            ))
        })?;
        Ok(Self {
            i_sh,
            i_gt,
            gt_decomp: None,
            id,
        })
    }

    pub fn cast<U: Real>(&self) -> ShadowPair<U> {
        ShadowPair {
            i_sh: self.i_sh.cast(),
            i_gt: self.i_gt.cast(),
            gt_decomp: self.gt_decomp.as_ref().map(|g| GroundTruthDecomposition {
                r_gt: g.r_gt.cast(),
                l_gt: g.l_gt.cast(),
                r_hat: g.r_hat.cast(),
                l_hat: g.l_hat.cast(),
            }),
            id: self.id.clone(),
        }
    }
}
