//! Losses, optimizer, schedule, augmentation and the training loop.

mod augment;
mod config;
mod loss;
mod optim;
mod train;

pub use augment::{augment_pair, random_crop_pair, Dihedral, Flip};
pub use config::{Schedule, TrainConfig};
pub use loss::{l1_loss, ms_ssim_loss, ms_ssim_scales, total_loss, LossTerms, LossWeights, MS_SSIM_WEIGHTS};
pub use optim::{adam_step, clip_grad_norm, lr_at, AdamState};
pub use train::{evaluate_psnr, train_loop, LogRecord, TrainOutcome};
