//! The nested denoiser and its architecture config.

pub mod config;
pub mod model;

pub use config::LevelConfig;
pub use model::{default_pyramid, norm_groups, pyramid_for, timestep_features, NestedUNet};
