pub mod audit;
pub mod clf;
pub mod config;
pub mod error;
pub mod gan;
pub mod io;
pub mod lab;
pub mod metrics;
pub mod pipeline;
pub mod pseudo;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod unet;
pub mod vae;

pub use error::{Error, Result};
