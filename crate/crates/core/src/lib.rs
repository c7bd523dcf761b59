//! Iterative rectification of curved and perspective-distorted text lines.

pub mod cli;
pub mod error;
pub mod fitline;
pub mod fitter;
pub mod imagebuf;
pub mod rectifier;
pub mod sampler;
pub mod synth;
pub mod tps;

pub use error::{Error, Result};
