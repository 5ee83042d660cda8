//! Generative network, its singular-basis form, synthetic instances and the model file.

mod io;
mod network;
mod svd;
pub mod synthetic;

pub use io::{load_model, model_from_str, model_to_string, save_model};
pub use network::{
    forward_sample, forward_sample_with, sample_input, Activation, GaussianPrior, Layer,
    LinearLayer, Network, Precision, Trajectory, Transformed,
};
pub use svd::{complete_columns, decompose_linear, transform_signals, FactoredNetwork, LinearSvd};
pub use synthetic::{
    build_conditioned_matrix, build_random_factored, build_random_network, SyntheticConfig,
};
