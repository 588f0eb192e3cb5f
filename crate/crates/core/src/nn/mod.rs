//! Layer primitives with hand-written backward passes.
//!
//! Every layer follows the same pattern: `forward` is a pure function of the
//! input and the layer parameters, `backward` takes whatever the forward pass
//! cached, accumulates parameter gradients into [`Param::grad`] and returns the
//! gradient with respect to the layer input.

mod activation;
mod conv;
mod direct;
mod norm;
mod param;
mod pool;
mod resize;

pub use activation::{relu, relu_backward, softmax_channels, softmax_channels_backward, Perturbation};
pub use conv::{Conv3d, UpConv3d};
pub use norm::{InstanceNorm, NormCache};
pub use param::Param;
pub use pool::{max_pool, max_pool_backward, PoolCache};
pub use resize::Resize;
