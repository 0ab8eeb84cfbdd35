//! Interactive spoken content retrieval: corpus handling, query-likelihood
//! retrieval with feedback, DQN dialogue manager, learned user simulator,
//! co-training and evaluation.

pub mod config;
pub mod corpus;
pub mod cotrain;
pub mod dialogue;
pub mod dqn;
pub mod episode;
pub mod error;
pub mod eval;
pub mod features;
pub mod retrieval;
pub mod simulator;
pub mod synth;

pub use error::{Error, Result};
