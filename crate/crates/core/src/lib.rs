//! Joint survival and clinical-presence modelling for irregularly sampled
//! multivariate sequences.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod presence;
pub mod seed;
pub mod survival;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
