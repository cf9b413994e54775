//! Cooperative multi-agent value learning with a centralized mixing network
//! trained on off-policy lambda-return targets.

pub mod agents;
pub mod env;
pub mod error;
pub mod harness;
pub mod mixers;
pub mod replay;
pub mod rng;
pub mod targets;
pub mod tensor;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
