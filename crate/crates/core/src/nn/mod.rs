//! Minimal dense/convolutional network core in double precision.
//!
//! Layers are described by a [`ModelSpec`]; parameters live in a separate,
//! value-semantic [`ModelWeights`]. [`forward`] records a [`ForwardCache`]
//! that [`backward`] consumes to produce parameter and input gradients.

mod checkpoint;
mod layers;
mod loss;
mod optim;
mod spec;
mod tensor;
mod weights;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::{backward, evaluate, forward, predict, Evaluation, ForwardCache, Gradients};
pub use loss::{cross_entropy, CrossEntropy};
pub use optim::{sgd_step, LrSchedule, SgdConfig, SgdState};
pub use spec::{Layer, ModelSpec};
pub use tensor::Tensor;
pub use weights::{unflatten, ModelWeights};
