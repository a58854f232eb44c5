//! Desk-scale laboratory for systematic outliers in transformer language
//! models.

pub mod attention;
pub mod checkpoint;
pub mod compress;
pub mod config;
pub mod corpus;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod model;
pub mod outliers;
pub mod rng;
pub mod tensor;
pub mod train;

pub use attention::VariantKind;
pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{CaptureSet, MlpKind, Model, NormKind, TransformerConfig};
pub use tensor::{Activation, DType, Mask, Scalar, Tape, Tensor, TensorId};
