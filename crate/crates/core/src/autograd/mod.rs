//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor)s.

mod attention;
pub mod check;
mod conv;
mod graph;
mod norm;
mod ops;
mod similarity;

pub use attention::{attention_forward, AttnMask};
pub use conv::{conv_nd_forward, maxpool_nd_forward, resize_linear_forward};
pub use graph::{Grads, Graph, Var};
pub use norm::NORM_EPS;
pub use similarity::{cosine_relu_forward, ZERO_NORM};
