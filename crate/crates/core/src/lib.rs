//! Spatial preference rewards and group-relative RL for a toy
//! flow-matching scene generator.

pub mod error;
pub mod flow;
pub mod forge;
pub mod grpo;
pub mod numerics;
pub mod reward;
pub mod scene;

pub use error::{LabError, Result};
