pub mod afw;
pub mod amw;
pub mod autodiff;
pub mod balance;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod modality;
pub mod model;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
