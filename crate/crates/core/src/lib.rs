//! Non-collinear hyperfine spin dynamics of an electron coupled to a nuclear ensemble.

pub mod cli;
pub mod coherence;
pub mod error;
pub mod fitters;
pub mod frames;
pub mod io;
pub mod magnon;
pub(crate) mod ode;
pub mod species;

pub use error::{Error, Result};
