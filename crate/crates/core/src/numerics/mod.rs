//! Minimal differentiable core: dense matrices, the shared two-layer extractor with
//! explicit backward pass, probability primitives, and heavy-ball SGD.

mod extractor;
mod matrix;
mod ops;
mod optim;

pub use extractor::{FeatureExtractor, Tape};
pub use matrix::{dot, l2_normalize, norm, squared_distance, Matrix};
pub use ops::{argmax, cross_entropy, entropy, one_hot, softmax};
pub(crate) use ops::{entropy_unchecked, softmax_backward, softmax_unchecked};
pub use optim::{sgd_step, Param, SgdConfig};
