//! Minimal feed-forward network with manual backpropagation.

mod io;
mod mlp;
mod optim;

pub use io::{read_mlp, write_mlp, MLP_MAGIC, MLP_VERSION};
pub(crate) use io::{read_mlp_from, TokenLines};
pub use mlp::{Activation, DenseLayer, ForwardMode, Gradients, LayerGrad, MlpConfig, MlpNetwork};
pub use optim::{Optimizer, OptimizerKind};

/// Random state used for dropout masks, shuffling and data generation.
pub type RandomState = rand_chacha::ChaCha8Rng;
