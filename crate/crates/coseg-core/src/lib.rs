//! Attention-based object co-segmentation, end to end: a small dense-tensor
//! engine with reverse-mode differentiation, a siamese encoder/decoder with
//! three attention variants (CA, FCA, CSA), linear-time instant group
//! co-segmentation, and synthetic data plus metrics to train and verify the
//! whole thing at desk scale.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod group;
pub mod model;
pub mod tensor;

pub use error::{CosegError, Result};
pub use tensor::{Element, Graph, MaskBatch, Mode, NodeId, Tensor};
