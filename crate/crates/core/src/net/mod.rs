//! Small dense networks with explicit backpropagation.

mod loss;
mod matrix;
mod network;

pub use loss::{per_row_soft_cross_entropy, soft_cross_entropy, weighted_soft_cross_entropy, LOG_FLOOR};
pub use matrix::Matrix;
pub use network::{Activation, DenseLayer, DenseNetwork, ForwardCache, LayerGrads, ParamGrads};
