use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::Identity => x,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

/// Precision of additive Gaussian noise; `Infinite` marks a noiseless layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Precision<T> {
    Finite(T),
    Infinite,
}

impl<T: Real> Precision<T> {
    pub fn is_infinite(&self) -> bool {
        matches!(self, Precision::Infinite)
    }

    pub fn finite(&self) -> Option<T> {
        match *self {
            Precision::Finite(v) => Some(v),
            Precision::Infinite => None,
        }
    }

    pub fn cast<U: Real>(self) -> Precision<U> {
        match self {
            Precision::Finite(v) => Precision::Finite(U::lit(v.as_f64())),
            Precision::Infinite => Precision::Infinite,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer<T: Real> {
    pub weights: DMatrix<T>,
    pub bias: DVector<T>,
    pub noise_precision: Precision<T>,
}

impl<T: Real> LinearLayer<T> {
    pub fn new(weights: DMatrix<T>, bias: DVector<T>, noise_precision: Precision<T>) -> Self {
        Self {
            weights,
            bias,
            noise_precision,
        }
    }

    pub fn rows(&self) -> usize {
        self.weights.nrows()
    }

    pub fn cols(&self) -> usize {
        self.weights.ncols()
    }

    /// Noiseless affine map `W x + b`.
    pub fn apply(&self, x: &DVector<T>) -> DVector<T> {
        &self.weights * x + &self.bias
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T: Real> {
    Linear(LinearLayer<T>),
    Nonlinear { activation: Activation, dim: usize },
}

impl<T: Real> Layer<T> {
    pub fn output_dim(&self) -> usize {
        match self {
            Layer::Linear(lin) => lin.rows(),
            Layer::Nonlinear { dim, .. } => *dim,
        }
    }

    pub fn as_linear(&self) -> Option<&LinearLayer<T>> {
        match self {
            Layer::Linear(lin) => Some(lin),
            Layer::Nonlinear { .. } => None,
        }
    }

    pub fn activation(&self) -> Option<Activation> {
        match self {
            Layer::Nonlinear { activation, .. } => Some(*activation),
            Layer::Linear(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianPrior<T> {
    pub precision: T,
}

/// Alternating linear / componentwise-nonlinear generative network.
///
/// Layers are numbered from 1; layer `l` maps `z_{l-1}` to `z_l`. Odd layers are
/// linear and even layers are nonlinear, so the depth is always even.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T: Real> {
    input_dim: usize,
    prior: GaussianPrior<T>,
    layers: Vec<Layer<T>>,
}

impl<T: Real> Network<T> {
    pub fn new(input_dim: usize, prior: GaussianPrior<T>, layers: Vec<Layer<T>>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidNetwork {
                layer: 0,
                reason: "input dimension must be positive".into(),
            });
        }
        if !(prior.precision > T::zero()) || !prior.precision.is_finite() {
            return Err(Error::NonPositive {
                what: "prior precision",
                value: prior.precision.as_f64(),
            });
        }
        if layers.is_empty() || !layers.len().is_multiple_of(2) {
            return Err(Error::InvalidNetwork {
                layer: layers.len(),
                reason: format!("layer count must be even and nonzero, got {}", layers.len()),
            });
        }
        let mut width = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            let index = i + 1;
            let want_linear = index % 2 == 1;
            match layer {
                Layer::Linear(lin) => {
                    if !want_linear {
                        return Err(Error::InvalidNetwork {
                            layer: index,
                            reason: "expected a nonlinear layer at an even position".into(),
                        });
                    }
                    if lin.cols() != width {
                        return Err(Error::DimensionMismatch {
                            layer: index,
                            expected: width,
                            found: lin.cols(),
                        });
                    }
                    if lin.bias.len() != lin.rows() {
                        return Err(Error::DimensionMismatch {
                            layer: index,
                            expected: lin.rows(),
                            found: lin.bias.len(),
                        });
                    }
                    if lin.rows() == 0 {
                        return Err(Error::InvalidNetwork {
                            layer: index,
                            reason: "linear layer has no rows".into(),
                        });
                    }
                    if let Precision::Finite(nu) = lin.noise_precision {
                        if !(nu > T::zero()) || !nu.is_finite() {
                            return Err(Error::NonPositive {
                                what: "noise precision",
                                value: nu.as_f64(),
                            });
                        }
                    }
                    if lin
                        .weights
                        .iter()
                        .chain(lin.bias.iter())
                        .any(|v| !v.is_finite())
                    {
                        return Err(Error::InvalidNetwork {
                            layer: index,
                            reason: "non-finite weight or bias".into(),
                        });
                    }
                    width = lin.rows();
                }
                Layer::Nonlinear { dim, .. } => {
                    if want_linear {
                        return Err(Error::InvalidNetwork {
                            layer: index,
                            reason: "expected a linear layer at an odd position".into(),
                        });
                    }
                    if *dim != width {
                        return Err(Error::DimensionMismatch {
                            layer: index,
                            expected: width,
                            found: *dim,
                        });
                    }
                }
            }
        }
        Ok(Self {
            input_dim,
            prior,
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers
            .last()
            .map(Layer::output_dim)
            .unwrap_or(self.input_dim)
    }

    pub fn prior(&self) -> GaussianPrior<T> {
        self.prior
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// Number of layers `L`.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Layer `l`, numbered from 1.
    pub fn layer(&self, l: usize) -> &Layer<T> {
        &self.layers[l - 1]
    }

    /// Widths `N_0, ..., N_L`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim)
            .chain(self.layers.iter().map(Layer::output_dim))
            .collect()
    }

    /// Noiseless pass through every layer, returning `z_0, ..., z_L`.
    pub fn propagate(&self, z0: &DVector<T>) -> Result<Vec<DVector<T>>> {
        self.check_input(z0)?;
        let mut out = Vec::with_capacity(self.layers.len() + 1);
        out.push(z0.clone());
        for layer in &self.layers {
            let prev = out.last().unwrap();
            let next = match layer {
                Layer::Linear(lin) => lin.apply(prev),
                Layer::Nonlinear { activation, .. } => prev.map(|v| activation.apply(v)),
            };
            out.push(next);
        }
        Ok(out)
    }

    fn check_input(&self, z0: &DVector<T>) -> Result<()> {
        if z0.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                layer: 0,
                expected: self.input_dim,
                found: z0.len(),
            });
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        let layers = self
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::Linear(lin) => Layer::Linear(LinearLayer {
                    weights: lin.weights.map(|v| U::lit(v.as_f64())),
                    bias: lin.bias.map(|v| U::lit(v.as_f64())),
                    noise_precision: lin.noise_precision.cast(),
                }),
                Layer::Nonlinear { activation, dim } => Layer::Nonlinear {
                    activation: *activation,
                    dim: *dim,
                },
            })
            .collect();
        Network {
            input_dim: self.input_dim,
            prior: GaussianPrior {
                precision: U::lit(self.prior.precision.as_f64()),
            },
            layers,
        }
    }
}

/// Signals of one forward draw, with their singular-basis transforms once filled.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T: Real> {
    /// `z_0, ..., z_L`; the last entry is the observation.
    pub z: Vec<DVector<T>>,
    pub transformed: Option<Transformed<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transformed<T: Real> {
    pub p: Vec<DVector<T>>,
    pub q: Vec<DVector<T>>,
}

impl<T: Real> Trajectory<T> {
    pub fn input(&self) -> &DVector<T> {
        &self.z[0]
    }

    pub fn output(&self) -> &DVector<T> {
        self.z.last().expect("trajectory is never empty")
    }
}

/// Draws the stochastic forward pass from a given input; noise comes from `seed`.
pub fn forward_sample<T: Real>(
    network: &Network<T>,
    z0: &DVector<T>,
    seed: u64,
) -> Result<Trajectory<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    forward_sample_with(network, z0, &mut rng)
}

pub fn forward_sample_with<T: Real, R: rand::Rng + ?Sized>(
    network: &Network<T>,
    z0: &DVector<T>,
    rng: &mut R,
) -> Result<Trajectory<T>> {
    network.check_input(z0)?;
    let mut z = Vec::with_capacity(network.depth() + 1);
    z.push(z0.clone());
    for layer in network.layers() {
        let prev = z.last().unwrap();
        let next = match layer {
            Layer::Linear(lin) => {
                let mut out = lin.apply(prev);
                if let Precision::Finite(nu) = lin.noise_precision {
                    let sd = T::one() / nu.sqrt();
                    for v in out.iter_mut() {
                        let e: f64 = StandardNormal.sample(rng);
                        *v += sd * T::lit(e);
                    }
                }
                out
            }
            Layer::Nonlinear { activation, .. } => prev.map(|v| activation.apply(v)),
        };
        z.push(next);
    }
    Ok(Trajectory {
        z,
        transformed: None,
    })
}

/// Draws `z_0` from the Gaussian prior.
pub fn sample_input<T: Real, R: rand::Rng + ?Sized>(
    network: &Network<T>,
    rng: &mut R,
) -> DVector<T> {
    let sd = 1.0 / network.prior().precision.as_f64().sqrt();
    DVector::from_fn(network.input_dim(), |_, _| {
        let e: f64 = StandardNormal.sample(rng);
        T::lit(sd * e)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_linear(n: usize) -> Layer<f64> {
        Layer::Linear(LinearLayer::new(
            DMatrix::identity(n, n),
            DVector::zeros(n),
            Precision::Infinite,
        ))
    }

    fn prior() -> GaussianPrior<f64> {
        GaussianPrior { precision: 1.0 }
    }

    #[test]
    fn identity_composition_is_transparent() {
        let net = Network::new(
            2,
            prior(),
            vec![
                identity_linear(2),
                Layer::Nonlinear {
                    activation: Activation::Identity,
                    dim: 2,
                },
                identity_linear(2),
                Layer::Nonlinear {
                    activation: Activation::Identity,
                    dim: 2,
                },
            ],
        )
        .unwrap();
        let z0 = DVector::from_vec(vec![1.0, 2.0]);
        let traj = forward_sample(&net, &z0, 3).unwrap();
        for z in &traj.z {
            assert_eq!(z, &z0);
        }
    }

    #[test]
    fn affine_layer() {
        let lin = LinearLayer::new(
            DMatrix::identity(2, 2) * 2.0,
            DVector::from_vec(vec![1.0, 1.0]),
            Precision::Infinite,
        );
        let net = Network::new(
            2,
            prior(),
            vec![
                Layer::Linear(lin),
                Layer::Nonlinear {
                    activation: Activation::Identity,
                    dim: 2,
                },
            ],
        )
        .unwrap();
        let traj = forward_sample(&net, &DVector::from_vec(vec![1.0, 0.0]), 0).unwrap();
        assert_eq!(traj.z[1].as_slice(), &[3.0, 1.0]);
    }

    #[test]
    fn relu_layer() {
        let net = Network::new(
            2,
            prior(),
            vec![
                identity_linear(2),
                Layer::Nonlinear {
                    activation: Activation::Relu,
                    dim: 2,
                },
            ],
        )
        .unwrap();
        let traj = forward_sample(&net, &DVector::from_vec(vec![-1.0, 2.0]), 0).unwrap();
        assert_eq!(traj.z[2].as_slice(), &[0.0, 2.0]);
    }

    #[test]
    fn rejects_odd_depth_and_bad_order() {
        let odd = Network::new(2, prior(), vec![identity_linear(2)]);
        assert!(matches!(odd, Err(Error::InvalidNetwork { .. })));
        let swapped = Network::new(
            2,
            prior(),
            vec![
                Layer::Nonlinear {
                    activation: Activation::Relu,
                    dim: 2,
                },
                identity_linear(2),
            ],
        );
        assert!(matches!(
            swapped,
            Err(Error::InvalidNetwork { layer: 1, .. })
        ));
    }

    #[test]
    fn dimension_mismatch_names_layer() {
        let err = Network::new(
            2,
            prior(),
            vec![
                identity_linear(2),
                Layer::Nonlinear {
                    activation: Activation::Relu,
                    dim: 2,
                },
                identity_linear(3),
                Layer::Nonlinear {
                    activation: Activation::Relu,
                    dim: 3,
                },
            ],
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::DimensionMismatch {
                layer: 3,
                expected: 2,
                found: 3
            }
        ));
        let net = Network::new(
            2,
            prior(),
            vec![
                identity_linear(2),
                Layer::Nonlinear {
                    activation: Activation::Relu,
                    dim: 2,
                },
            ],
        )
        .unwrap();
        let bad = forward_sample(&net, &DVector::zeros(3), 0).unwrap_err();
        assert!(matches!(bad, Error::DimensionMismatch { layer: 0, .. }));
    }

    #[test]
    fn noisy_sampling_is_reproducible() {
        let lin = LinearLayer::new(
            DMatrix::identity(3, 3),
            DVector::zeros(3),
            Precision::Finite(4.0),
        );
        let net = Network::new(
            3,
            prior(),
            vec![
                Layer::Linear(lin),
                Layer::Nonlinear {
                    activation: Activation::Identity,
                    dim: 3,
                },
            ],
        )
        .unwrap();
        let z0 = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let a = forward_sample(&net, &z0, 11).unwrap();
        let b = forward_sample(&net, &z0, 11).unwrap();
        let c = forward_sample(&net, &z0, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.z[1], c.z[1]);
    }
}
