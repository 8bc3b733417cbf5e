pub mod error;
pub mod grid_model;
pub mod powerflow;
pub mod classic_estimation;
pub mod contingency;
pub mod dataset;
pub mod nn;
pub mod chimera;
pub mod fdia;
pub mod evaluation;

pub use error::{Error, Result};
