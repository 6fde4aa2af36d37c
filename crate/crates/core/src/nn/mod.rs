//! Minimal differentiable-programming substrate: tensors, a time-conditioned
//! dense network with hand-derived reverse-mode gradients, Adam, and a binary
//! checkpoint container.

pub mod checkpoint;
pub mod embed;
pub mod network;
pub mod optim;
pub mod tensor;

pub use embed::{time_embed, TimeEmbedding};
pub use network::{Activation, Architecture, ConditionedNetwork, Tape};
pub use optim::{Adam, AdamConfig};
pub use tensor::{Param, Tensor};
