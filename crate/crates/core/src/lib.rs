//! Assistive state estimation.
//!
//! An assistant filters its own belief over a partially observed state,
//! chooses the observation to show a biased user so that the user's belief
//! moves toward its own, and learns the user's belief-update model from
//! demonstrated actions on known tasks.

pub mod belief;
pub mod env;
pub mod policy;
pub mod assistant;
pub mod learner;
pub mod user;
pub mod harness;
