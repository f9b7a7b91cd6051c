//! Localized sketch and text conditioning for latent diffusion.

pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod nn;
pub mod pair_codec;
pub mod pair_former;
pub mod sketchy;

pub use error::{Error, Result};
