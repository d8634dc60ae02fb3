//! Dual-system diffusion world model for a tabletop pushing task.

pub mod diffmatcher;
mod error;
pub mod hidiff;
pub mod lodiff;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod pushworld;
pub mod risk;
pub mod schedulers;

pub use error::{MindError, Result};
