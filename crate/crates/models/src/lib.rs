//! Learned models: CycleGAN translation for emulating distortions, and a
//! center-offset instance segmenter.

mod convert;
pub mod error;
pub mod segmentation;
pub mod translation;

pub use convert::{batch_to_tensor, image_to_tensor, tensor_to_image};
pub use error::{ModelError, Result};
