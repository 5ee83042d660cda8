//! MAP inference in multi-layer generative networks by message passing, with
//! its splitting-method interpretation, a state-evolution predictor and a
//! gradient baseline.

pub mod admm;
pub mod baseline;
pub mod denoise;
mod error;
pub mod harness;
pub mod mlvamp;
pub mod model;
pub mod oracle;
pub mod rng;
mod scalar;
pub mod se;

pub use error::{Error, Result};
pub use scalar::Real;

pub type NetworkF64 = model::Network<f64>;
pub type NetworkF32 = model::Network<f32>;
pub type FactoredNetworkF64 = model::FactoredNetwork<f64>;
pub type FactoredNetworkF32 = model::FactoredNetwork<f32>;
