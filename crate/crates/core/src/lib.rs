//! Diagnostics and anisotropic correction of the geometric gap between two
//! embedding modalities that share a normalized representation space.

pub mod aligner;
pub mod artifact;
pub mod diagnostics;
pub mod error;
pub mod evalsuite;
pub mod frame;
pub mod nn;
pub mod numerics;
pub mod phase_prior;
pub mod pipeline;
pub mod rng;
pub mod store;
pub mod synthetic;
pub mod transforms;

pub use error::{Error, Result};
