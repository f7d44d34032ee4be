//! Small differentiable function approximators: MLPs with explicit
//! backward passes, Adam with parameter EMA, and checkpoint files.

pub mod checkpoint;
pub mod embed;
pub mod mlp;
pub mod model;
pub mod optim;

pub use embed::TimeEmbedding;
pub use mlp::{Activation, Grads, Layer, Mlp, Tape};
pub use model::{BridgeNet, InputGrads, InputSpec};
pub use optim::{AdamConfig, OptimizerState};
