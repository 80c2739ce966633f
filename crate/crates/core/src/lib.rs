//! Simulation, limit-law computation and concentration diagnostics for
//! interacting particle systems on graphons.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod concentration;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod graphon;
pub mod limitlaw;
pub mod ot;
pub mod rng;
pub mod simulate;
pub mod validation;

pub use error::{Error, Result};
