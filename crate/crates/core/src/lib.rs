//! Inception-ResNet-v2 from scratch for binary image classification:
//! tensors and layers with hand-written gradients, the network builder,
//! checkpoints, data loading, training, cross-validation and metrics.
//!
//! ```
//! use irnet::arch::{build_model, ModelConfig};
//!
//! let model = build_model(&ModelConfig::desk())?;
//! assert_eq!(model.count_params(), 190_246);
//! # Ok::<(), irnet::Error>(())
//! ```

pub mod arch;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/layers.md")]
    struct Layers;
    #[doc = include_str!("../../../book/src/models.md")]
    struct Models;
    #[doc = include_str!("../../../book/src/data.md")]
    struct Data;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/metrics.md")]
    struct Metrics;
    #[doc = include_str!("../../../book/src/checkpoints.md")]
    struct Checkpoints;
    #[doc = include_str!("../../../book/src/gradcheck.md")]
    struct Gradcheck;
    #[doc = include_str!("../../../book/src/reproduction.md")]
    struct Reproduction;
}
