//! Layers with hand-written forward and backward passes, and the tape that
//! sequences them.

pub mod activation;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod pool;
pub mod tape;

pub use activation::{relu, relu_backward};
pub use conv::{conv2d_backward, conv2d_forward, zero_inflate_kernel, ConvGeometry, ConvGrads, ConvLayer};
pub use linear::{affine_backward, affine_forward, resize_backward};
pub use loss::{pixel_softmax_cross_entropy, softmax_cross_entropy};
pub use pool::{global_avg_pool, global_avg_pool_backward, max_pool2d, max_pool2d_backward, PoolGeometry};
pub use tape::{Backward, Gradients, ParamId, ParamStore, Tape, Var};
