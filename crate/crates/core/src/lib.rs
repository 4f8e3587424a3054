//! Temporal-distance representations, latent dynamics and rollout
//! augmentation for offline goal-conditioned RL on small mazes.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod dynamics;
pub mod env;
pub mod error;
pub mod nn;
pub mod oracle;
pub mod pipeline;
pub mod policy;
pub mod registry;
pub mod repr;

pub use error::{Error, Result};
