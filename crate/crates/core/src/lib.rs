//! Supersampling toolkit for point-scan micrographs: reconstructs
//! full-resolution scans from 1/s^2-coverage sub-scans with classical
//! interpolators or small learned generators, plus the training, evaluation,
//! deconvolution, and serving machinery around them.

pub mod alrc;
pub mod deconv;
pub mod error;
pub mod imaging;
pub mod losses;
pub mod checkpoint;
pub mod models;
pub mod training;
pub mod nn;

pub use error::{Error, Result};
