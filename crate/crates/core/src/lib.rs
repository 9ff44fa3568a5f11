//! Quantum-train style weight generation: a distributed real-amplitude
//! circuit produces a probability distribution, a matrix product state (or an
//! MLP baseline) maps each basis-state probability to one weight of a
//! classical network, and only the circuit angles and mapping parameters are
//! trained.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod mapping;
pub mod optim;
pub mod qnn;
pub mod target;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
