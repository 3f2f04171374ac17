//! Image quality prediction from whitened-patch codebooks.
//!
//! Images are reduced to log-contrast patches, whitened, and soft-encoded
//! against a k-means codebook; the resulting features drive a nu-SVR.

pub mod codebook;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod io;
pub mod preprocess;
pub mod regression;
pub mod rng;
pub mod synthgen;
pub mod video;

pub use error::{Error, Result};
