//! Mask-transformer panoptic segmentation on synthetic scenes: model,
//! losses, matching, inference, evaluation, data generation and training.

pub mod config;
pub mod dataset;
pub mod error;
pub mod gradsuite;
pub mod inference;
pub mod losses;
pub mod matching;
pub mod model;
pub mod nn;
pub mod panoptic;
pub mod pnm;
pub mod pq;
pub mod slots;
pub mod synth;
pub mod train;
pub mod transformer;

pub use config::Config;
pub use dataset::Dataset;
pub use error::{Error, Result};
pub use model::Model;
pub use panoptic::{Panoptic, Vocabulary};
