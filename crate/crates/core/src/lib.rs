//! Face-conditioned two-speaker speech separation.
//!
//! A still face image is mapped to an identity embedding shared with the voice domain;
//! that embedding conditions a time-frequency mask estimator so the network always
//! emits the designated speaker. Everything trainable runs on the small reverse-mode
//! engine in [`numerics`].

pub mod biometric;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod separation;
pub mod training;
pub mod seed;

pub use error::{Error, Result};
