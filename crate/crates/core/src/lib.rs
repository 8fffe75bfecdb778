//! Images, distortion mappings, synthetic instance-segmentation scenes and
//! Cityscapes-style evaluation.

pub mod distortions;
pub mod error;
pub mod evaluation;
pub mod imagecore;
pub mod par;
pub mod scenes;

pub use distortions::{DistortionKind, DistortionSpec};
pub use error::{Error, Result};
pub use evaluation::{map_cityscapes, map_cityscapes_at, EvalReport, Prediction};
pub use imagecore::{mse, psnr, Image, RandomSource};
pub use scenes::{DatasetSplit, InstanceAnnotation, Mask, Role, Sample};
