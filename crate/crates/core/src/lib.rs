//! Learnable pulse accumulator (LPA): a linear-time replacement for softmax
//! self-attention built from learned rectangular, periodic and positional
//! gates, plus the tooling to convert a trained attention model layer by
//! layer, compile trained gates into integer segment programs, and estimate
//! cost with a roofline model.

pub mod autodiff;
pub mod bench;
pub mod conversion;
pub mod error;
pub mod numerics;

pub use error::{LpaError, Result};
pub mod gates;
pub mod hardgate;
pub mod mixer;
pub mod optim;
pub mod params;
pub mod perfmodel;
pub mod reference;
pub mod verify;
