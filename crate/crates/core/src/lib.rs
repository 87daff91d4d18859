//! Desk-scale monocular metric depth estimation built around attractor-refined
//! adaptive depth bins, with a two-stage training pipeline on synthetic scenes
//! and an evaluation harness for standard depth metrics and relative-improvement
//! reporting.

pub mod array;
pub mod assembly;
pub mod backbone;
pub mod bins;
pub mod datagen;
pub mod depth;
pub mod config;
pub mod error;
pub mod formats;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod prob;
pub mod rng;
pub mod router;
pub mod scalar;
pub mod tape;
pub mod train;
pub mod verify;

pub use array::NdArray;
pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tape::{NodeId, Tape};
