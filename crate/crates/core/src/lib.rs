//! Statistics-conditioned diffusion augmentation for 1-D sensor windows and
//! a split-attention classifier trained on the augmented data.

pub mod bench;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod stats;
pub mod train;

pub use error::{Error, Result};
