pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod output;
pub mod params;
pub mod seeds;
pub mod selftest;
pub mod sensitivity;
pub mod sim;
pub mod strategy;

pub use error::{Error, Result};
pub use params::ParamVector;
