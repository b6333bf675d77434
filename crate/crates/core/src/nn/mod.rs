//! Differentiable layer primitives.
//!
//! Every primitive is a pure function: a forward that returns its output
//! (plus whatever the backward pass needs) and a backward that maps an
//! upstream gradient to gradients of each input. All of them are generic over
//! [`Scalar`](crate::Scalar) so the same code runs in 32-bit production mode
//! and in 64-bit verification mode.

use serde::{Deserialize, Serialize};

pub mod activation;
pub mod batchnorm;
pub mod concat;
pub mod conv;
pub mod dense;
pub mod dropout;
pub mod gradcheck;
pub mod loss;
pub mod pool;
pub mod residual;

pub use activation::{relu, relu_backward};
pub use batchnorm::{batchnorm, batchnorm_backward, BnCache, BnGrads, BnState, BN_EPSILON, BN_MOMENTUM};
pub use concat::{concat_channels, split_channels};
pub use conv::{conv2d, conv2d_backward, window_geometry, ConvGeometry, ConvGrads, Padding};
pub use dense::{dense, dense_backward, DenseGrads};
pub use dropout::{dropout, dropout_backward};
pub use gradcheck::{check_sampled, grad_check, GradCheckConfig, GradCheckReport, InputReport};
pub use loss::{softmax, softmax_cross_entropy};
pub use pool::{avgpool2d, avgpool2d_backward, global_avgpool, global_avgpool_backward, maxpool2d, maxpool2d_backward};
pub use residual::{residual_add_scaled, residual_add_scaled_backward};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}
