//! Minimal CPU autodiff for the translation and segmentation networks.
//!
//! Tensors are dense NCHW. A [`Graph`] records one forward pass and
//! differentiates it; [`ParamStore`]s own network weights between passes.

pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use error::NnError;
pub use graph::{Graph, Var};
pub use optim::{Adam, Sgd};
pub use params::{normal_tensor, Bound, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
