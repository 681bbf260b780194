//! Joint multi-resolution diffusion with a nested UNet denoiser.
//!
//! The crate covers the full desk-scale pipeline: noise schedules and the
//! extended-space forward process, a small reverse-mode autodiff engine, the
//! nested denoiser with progressive growth, training with EMA, the parallel
//! multi-resolution sampler, the simple/cascaded baselines and
//! feature-extractor-free metrics on a procedural shapes dataset.

pub mod autograd;
pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod image_io;
pub mod kvdoc;
pub mod metrics;
pub mod multires;
pub mod optim;
pub mod params;
pub mod sampler;
pub mod schedules;
pub mod tensor;
pub mod trainer;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
