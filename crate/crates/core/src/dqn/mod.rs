//! From-scratch deep Q-learning: networks, replay, and the vanilla, double
//! and dueling learners.

mod adam;
mod learner;
mod mlp;
mod replay;

pub use adam::Adam;
pub use learner::{epsilon_greedy, Checkpoint, DqnParams, QLearner, Variant, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use mlp::{argmax, Architecture, ForwardPass, Head, Mlp};
pub use replay::{Experience, ReplayBuffer};
