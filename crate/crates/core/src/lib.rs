//! Deep Gaussian process fusion and principal-component emulation of functional
//! simulator output.

pub mod artifact;
pub mod dgpfco;
pub mod error;
pub mod gaussmath;
pub mod kernelcov;
mod optim;
pub mod pcemu;
pub mod rng;
pub mod simstudy;
pub mod spectra;

pub use error::{Error, Result};
