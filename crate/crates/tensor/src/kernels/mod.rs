//! Raw numeric kernels shared by the graph and by non-differentiable callers.

mod conv;
mod diff;
mod pool;
mod resize;

pub use conv::{conv2d_backward, conv2d_forward, ConvGeometry, ConvGrads};
pub use diff::{forward_diff, forward_diff_adjoint};
pub use pool::{max_pool2, max_pool2_backward};
pub use resize::{resize_bilinear, resize_bilinear_backward};
