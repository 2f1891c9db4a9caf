pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod convert;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod metrics;
pub mod nn;
pub mod pseudo;
pub mod selection;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
