//! Parameter-efficient fine-tuning of frozen vision backbones for binary
//! segmentation with Rein-style low-rank learnable token adapters.

pub mod backbone;
pub mod config;
pub mod datagen;
pub mod error;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod rein;
pub mod seghead;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
