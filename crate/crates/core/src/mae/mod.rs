//! Masked-image-modeling pretraining of the patch-token encoder.

mod mask;
mod model;
mod quality;
mod train;

pub use mask::{masked_count, MaskPlan};
pub use model::{masked_mse_loss, mse_loss, Decoder, DecoderConfig, LossOn, MaeModel, MaeOutput};
pub use quality::{psnr, ssim, PSNR_CAP};
pub use train::{extract_features, features_at, pretrain, EpochRecord, MaeConfig, PretrainReport, Reconstruction};
