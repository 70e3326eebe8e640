//! Dense tensors, reverse-mode differentiation, layers and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_store};
pub use layers::{AdditiveAttention, Conv2d, Linear, LstmCell, LstmState, Mlp};
pub use optim::Adam;
pub use params::{GradBuffer, ParamId, ParamStore};
pub use tape::{entropy_nats, kl_divergence, Gradients, Tape, Var, LOG_FLOOR};
pub use tensor::{softmax, Tensor};
