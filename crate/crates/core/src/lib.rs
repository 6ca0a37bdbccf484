//! Identification of interpretable hybrid robot dynamics models.
//!
//! An analytical rigid-body model supplies `τ_rbd = M q̈ + C q̇ + τ_g`; learned models
//! (sparse polynomial regression, symbolic regression, or a small neural network)
//! either predict the motor torque directly or the residual `τ_m − τ_rbd`.

pub mod control;
pub mod dataset;
pub mod error;
pub mod excitation;
pub mod mlp;
pub mod models;
pub mod numdiff;
pub mod pipeline;
pub mod provenance;
pub mod rbd;
pub mod sim;
pub mod sparsereg;
pub mod symreg;

pub use error::{Error, Result};
