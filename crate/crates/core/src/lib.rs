pub mod analysis;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod io;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod targets;
pub mod training;

pub use error::{Error, Result};
