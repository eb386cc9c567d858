//! Memory-augmented recurrent networks with discrete, wormhole-style
//! memory access, built on a small reverse-mode differentiation engine.

pub mod addressing;
pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod controller;
pub mod error;
pub mod memory;
pub mod model;
pub mod params;
pub mod rng;
pub mod run;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
