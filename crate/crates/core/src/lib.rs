pub mod augment;
pub mod config;
pub mod autodiff;
pub mod distill;
pub mod downstream;
pub mod error;
pub mod eval;
pub mod image;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod slices;
pub mod volume;
pub mod vit;

pub use error::{Error, Result};
