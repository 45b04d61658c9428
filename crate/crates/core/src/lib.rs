//! Desk-scale closed-loop digital twin for fractionated radiotherapy.
//!
//! The numeric core is generic over a [`Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`, which is what the CLI uses.

pub mod calibration;
pub mod decision;
pub mod error;
pub mod grid;
pub mod phantom;
mod scalar;
pub mod surrogate;
pub mod twin;
pub mod uq;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Grid = grid::ScalarGrid<f64>;
pub type Patient = grid::PatientRecord<f64>;
pub type Phantom = phantom::PhantomSpec<f64>;
