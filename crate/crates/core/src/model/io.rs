use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize, Serializer};
use serde_json::value::RawValue;

use super::network::{Activation, GaussianPrior, Layer, LinearLayer, Network, Precision};
use crate::error::{Error, Result};
use crate::scalar::Real;

const FORMAT_VERSION: u32 = 1;

/// Number written with 17 significant digits.
struct Exact(f64);

impl Serialize for Exact {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return Err(serde::ser::Error::custom("non-finite number"));
        }
        let raw =
            RawValue::from_string(format!("{:.16e}", self.0)).map_err(serde::ser::Error::custom)?;
        raw.serialize(serializer)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    version: u32,
    input_dim: usize,
    prior: PriorSpec,
    layers: Vec<LayerSpec>,
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum PriorSpec {
    Gaussian { precision: f64 },
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum LayerSpec {
    Linear {
        rows: usize,
        cols: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        noise_precision: NoiseSpec,
    },
    Nonlinear {
        activation: ActivationSpec,
        dim: usize,
    },
}

#[derive(Deserialize)]
#[serde(rename_all = "lowercase")]
enum ActivationSpec {
    Relu,
    Identity,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum NoiseSpec {
    Finite(f64),
    Tag(InfTag),
}

#[derive(Deserialize)]
enum InfTag {
    #[serde(rename = "inf")]
    Inf,
}

#[derive(Serialize)]
struct ModelOut<'a> {
    version: u32,
    input_dim: usize,
    prior: PriorOut,
    layers: Vec<LayerOut<'a>>,
}

#[derive(Serialize)]
struct PriorOut {
    kind: &'static str,
    precision: Exact,
}

#[derive(Serialize)]
#[serde(untagged)]
enum LayerOut<'a> {
    Linear {
        kind: &'static str,
        rows: usize,
        cols: usize,
        weights: Vec<Exact>,
        bias: Vec<Exact>,
        noise_precision: NoiseOut,
    },
    Nonlinear {
        kind: &'static str,
        activation: &'a str,
        dim: usize,
    },
}

#[derive(Serialize)]
#[serde(untagged)]
enum NoiseOut {
    Finite(Exact),
    Infinite(&'static str),
}

/// Serializes a network to the JSON model format.
pub fn model_to_string<T: Real>(network: &Network<T>) -> Result<String> {
    let layers = network
        .layers()
        .iter()
        .map(|layer| match layer {
            Layer::Linear(lin) => {
                let weights = (0..lin.rows())
                    .flat_map(|i| (0..lin.cols()).map(move |j| (i, j)))
                    .map(|(i, j)| Exact(lin.weights[(i, j)].as_f64()))
                    .collect();
                LayerOut::Linear {
                    kind: "linear",
                    rows: lin.rows(),
                    cols: lin.cols(),
                    weights,
                    bias: lin.bias.iter().map(|v| Exact(v.as_f64())).collect(),
                    noise_precision: match lin.noise_precision {
                        Precision::Finite(nu) => NoiseOut::Finite(Exact(nu.as_f64())),
                        Precision::Infinite => NoiseOut::Infinite("inf"),
                    },
                }
            }
            Layer::Nonlinear { activation, dim } => LayerOut::Nonlinear {
                kind: "nonlinear",
                activation: activation.name(),
                dim: *dim,
            },
        })
        .collect();
    let out = ModelOut {
        version: FORMAT_VERSION,
        input_dim: network.input_dim(),
        prior: PriorOut {
            kind: "gaussian",
            precision: Exact(network.prior().precision.as_f64()),
        },
        layers,
    };
    serde_json::to_string(&out).map_err(|e| Error::Parse {
        path: "<model>".into(),
        message: e.to_string(),
    })
}

/// Parses a network from the JSON model format; `origin` labels error messages.
pub fn model_from_str<T: Real>(text: &str, origin: &str) -> Result<Network<T>> {
    let parse_err = |message: String| Error::Parse {
        path: origin.to_string(),
        message,
    };
    let mut de = serde_json::Deserializer::from_str(text);
    let file: ModelFile = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let inner = e.inner();
        parse_err(format!(
            "field `{}`: {} (line {}, column {})",
            e.path(),
            inner,
            inner.line(),
            inner.column()
        ))
    })?;
    de.end().map_err(|e| parse_err(e.to_string()))?;
    if file.version != FORMAT_VERSION {
        return Err(parse_err(format!("unsupported version {}", file.version)));
    }
    let PriorSpec::Gaussian { precision } = file.prior;
    let mut layers = Vec::with_capacity(file.layers.len());
    for (i, spec) in file.layers.into_iter().enumerate() {
        let layer = match spec {
            LayerSpec::Linear {
                rows,
                cols,
                weights,
                bias,
                noise_precision,
            } => {
                if weights.len() != rows * cols {
                    return Err(parse_err(format!(
                        "field `layers[{i}].weights`: expected {} entries, found {}",
                        rows * cols,
                        weights.len()
                    )));
                }
                let nu = match noise_precision {
                    NoiseSpec::Finite(v) => Precision::Finite(T::lit(v)),
                    NoiseSpec::Tag(InfTag::Inf) => Precision::Infinite,
                };
                Layer::Linear(LinearLayer::new(
                    DMatrix::from_row_iterator(rows, cols, weights.into_iter().map(T::lit)),
                    DVector::from_iterator(bias.len(), bias.into_iter().map(T::lit)),
                    nu,
                ))
            }
            LayerSpec::Nonlinear { activation, dim } => Layer::Nonlinear {
                activation: match activation {
                    ActivationSpec::Relu => Activation::Relu,
                    ActivationSpec::Identity => Activation::Identity,
                },
                dim,
            },
        };
        layers.push(layer);
    }
    Network::new(
        file.input_dim,
        GaussianPrior {
            precision: T::lit(precision),
        },
        layers,
    )
    .map_err(|e| parse_err(e.to_string()))
}

pub fn save_model<T: Real>(network: &Network<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut text = model_to_string(network)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_model<T: Real>(path: impl AsRef<Path>) -> Result<Network<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    model_from_str(&text, &path.display().to_string())
}
