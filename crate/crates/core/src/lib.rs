//! OSAKA-style continual-learning harness at desk scale.
//!
//! The crate is organized around the run loop: a non-stationary context
//! stream ([`stream`]) feeds per-step batches to an online learner
//! ([`algorithms`]) whose predictions are scored before every update
//! ([`eval`]). Learners share a small f64 tensor/autodiff engine
//! ([`ndcore`]) and an MLP parameter container ([`models`]).

pub mod algorithms;
pub mod eval;
pub mod models;
pub mod ndcore;
pub mod stream;
