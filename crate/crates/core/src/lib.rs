//! Tree-structured policy optimization with geometric step rewards.

pub mod harness;
pub mod optim;
pub mod policy;
pub mod reward;
pub mod rollout;
pub mod seed;
pub mod sim;
pub mod task;
pub mod transcript;
