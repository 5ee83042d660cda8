//! Direct MAP estimation: Adam on the negative log posterior of the input,
//! with the hidden layers composed deterministically.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{Activation, Layer, Network, Precision};
use crate::rng::child_seed;
use crate::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerOptions {
    pub step_size: f64,
    pub iters: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub restarts: usize,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            step_size: 0.01,
            iters: 500,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            restarts: 1,
        }
    }
}

impl OptimizerOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size >= 0.0) || !self.step_size.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "step size must be finite and nonnegative, got {}",
                self.step_size
            )));
        }
        if self.iters == 0 || self.restarts == 0 {
            return Err(Error::InvalidArgument(
                "iters and restarts must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.epsilon > 0.0)
        {
            return Err(Error::InvalidArgument(
                "moment decay rates must lie in [0, 1) and epsilon be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Minimized<T: Real> {
    /// Best iterate over all steps and restarts.
    pub z0: DVector<T>,
    pub objective: f64,
    /// Objective of the current iterate of the winning restart, one entry per
    /// evaluated point including the initial one.
    pub trace: Vec<f64>,
    /// Running minimum of `trace`.
    pub best_trace: Vec<f64>,
}

/// Output noise precision, after checking that every earlier linear layer is
/// noiseless so the composition is well defined.
fn output_precision<T: Real>(network: &Network<T>) -> Result<T> {
    let linear: Vec<(usize, Precision<T>)> = network
        .layers()
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.as_linear().map(|lin| (i + 1, lin.noise_precision)))
        .collect();
    let Some(&(_, last)) = linear.last() else {
        return Err(Error::InvalidNetwork {
            layer: 0,
            reason: "the network has no linear layer".into(),
        });
    };
    if let Some((l, _)) = linear[..linear.len() - 1]
        .iter()
        .find(|(_, p)| !p.is_infinite())
    {
        return Err(Error::Unsupported(format!(
            "layer {l} is noisy; direct estimation needs deterministic hidden layers"
        )));
    }
    last.finite().ok_or_else(|| {
        Error::Unsupported("direct estimation needs a finite output noise precision".into())
    })
}

fn check_dims<T: Real>(network: &Network<T>, y: &DVector<T>) -> Result<()> {
    if y.len() != network.output_dim() {
        return Err(Error::DimensionMismatch {
            layer: network.depth(),
            expected: network.output_dim(),
            found: y.len(),
        });
    }
    Ok(())
}

/// `prior/2 |z0|^2 + nu/2 |y - net(z0)|^2`.
pub fn objective<T: Real>(network: &Network<T>, z0: &DVector<T>, y: &DVector<T>) -> Result<T> {
    let nu = output_precision(network)?;
    check_dims(network, y)?;
    let signals = network.propagate(z0)?;
    let out = signals.last().unwrap();
    let half = T::lit(0.5);
    Ok(half * network.prior().precision * z0.norm_squared() + half * nu * (y - out).norm_squared())
}

/// Reverse-mode gradient of [`objective`]; the ReLU derivative at 0 is taken as 0.
pub fn gradient<T: Real>(
    network: &Network<T>,
    z0: &DVector<T>,
    y: &DVector<T>,
) -> Result<DVector<T>> {
    Ok(objective_and_gradient(network, z0, y)?.1)
}

pub fn objective_and_gradient<T: Real>(
    network: &Network<T>,
    z0: &DVector<T>,
    y: &DVector<T>,
) -> Result<(T, DVector<T>)> {
    let nu = output_precision(network)?;
    check_dims(network, y)?;
    let signals = network.propagate(z0)?;
    let residual = y - signals.last().unwrap();
    let prior = network.prior().precision;
    let half = T::lit(0.5);
    let value = half * prior * z0.norm_squared() + half * nu * residual.norm_squared();

    let mut g = residual * -nu;
    for (i, layer) in network.layers().iter().enumerate().rev() {
        g = match layer {
            Layer::Linear(lin) => lin.weights.tr_mul(&g),
            Layer::Nonlinear {
                activation: Activation::Relu,
                ..
            } => g.zip_map(
                &signals[i],
                |gv, pre| if pre > T::zero() { gv } else { T::zero() },
            ),
            Layer::Nonlinear {
                activation: Activation::Identity,
                ..
            } => g,
        };
    }
    g.axpy(prior, z0, T::one());
    Ok((value, g))
}

struct Adam<T: Real> {
    m: DVector<T>,
    v: DVector<T>,
    b1_pow: f64,
    b2_pow: f64,
}

impl<T: Real> Adam<T> {
    fn new(n: usize) -> Self {
        Self {
            m: DVector::zeros(n),
            v: DVector::zeros(n),
            b1_pow: 1.0,
            b2_pow: 1.0,
        }
    }

    fn step(&mut self, x: &mut DVector<T>, g: &DVector<T>, o: &OptimizerOptions) {
        let (b1, b2) = (T::lit(o.beta1), T::lit(o.beta2));
        self.b1_pow *= o.beta1;
        self.b2_pow *= o.beta2;
        let c1 = T::lit(1.0 / (1.0 - self.b1_pow));
        let c2 = T::lit(1.0 / (1.0 - self.b2_pow));
        let (lr, eps) = (T::lit(o.step_size), T::lit(o.epsilon));
        for i in 0..x.len() {
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g[i] * g[i];
            x[i] -= lr * (self.m[i] * c1) / ((self.v[i] * c2).sqrt() + eps);
        }
    }
}

fn single_run<T: Real>(
    network: &Network<T>,
    y: &DVector<T>,
    opts: &OptimizerOptions,
    seed: u64,
) -> Result<Minimized<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DVector::from_fn(network.input_dim(), |_, _| {
        let e: f64 = StandardNormal.sample(&mut rng);
        T::lit(e)
    });
    let mut adam = Adam::new(x.len());
    let mut best = x.clone();
    let mut best_value = f64::INFINITY;
    let mut trace = Vec::with_capacity(opts.iters + 1);
    let mut best_trace = Vec::with_capacity(opts.iters + 1);
    for step in 0..=opts.iters {
        let (value, g) = objective_and_gradient(network, &x, y)?;
        let value = value.as_f64();
        if !value.is_finite() {
            return Err(Error::NonFiniteObjective { step });
        }
        if value < best_value {
            best_value = value;
            best.copy_from(&x);
        }
        trace.push(value);
        best_trace.push(best_value);
        if step < opts.iters {
            adam.step(&mut x, &g, opts);
        }
    }
    Ok(Minimized {
        z0: best,
        objective: best_value,
        trace,
        best_trace,
    })
}

/// Runs Adam for `opts.iters` steps from each of `opts.restarts` standard-normal
/// starts and keeps the best iterate seen.
pub fn minimize<T: Real>(
    network: &Network<T>,
    y: &DVector<T>,
    opts: &OptimizerOptions,
) -> Result<Minimized<T>> {
    opts.validate()?;
    output_precision(network)?;
    check_dims(network, y)?;
    let mut best: Option<Minimized<T>> = None;
    for r in 0..opts.restarts {
        let seed = if opts.restarts == 1 {
            opts.seed
        } else {
            child_seed(opts.seed, r as u64)
        };
        let run = single_run(network, y, opts, seed)?;
        if best.as_ref().is_none_or(|b| run.objective < b.objective) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_random_network, GaussianPrior, LinearLayer, SyntheticConfig};
    use crate::oracle;
    use nalgebra::DMatrix;

    fn normal(rng: &mut ChaCha8Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    fn gaussian_net(dims: &[usize], nu: f64, seed: u64) -> Network<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let last = dims.len() - 2;
        for (i, w) in dims.windows(2).enumerate() {
            let weights =
                DMatrix::from_fn(w[1], w[0], |_, _| normal(&mut rng) / (w[0] as f64).sqrt());
            let bias = DVector::from_fn(w[1], |_, _| 0.1 * normal(&mut rng));
            let p = if i == last {
                Precision::Finite(nu)
            } else {
                Precision::Infinite
            };
            layers.push(Layer::Linear(LinearLayer::new(weights, bias, p)));
            layers.push(Layer::Nonlinear {
                activation: Activation::Identity,
                dim: w[1],
            });
        }
        Network::new(dims[0], GaussianPrior { precision: 1.0 }, layers).unwrap()
    }

    fn reference_net(ny: usize, seed: u64) -> Network<f64> {
        let cfg = SyntheticConfig {
            output_dim: ny,
            ..Default::default()
        };
        build_random_network(&cfg, seed).unwrap()
    }

    #[test]
    fn zero_network_output_leaves_data_term() {
        let net = Network::new(
            3,
            GaussianPrior { precision: 2.0 },
            vec![
                Layer::Linear(LinearLayer::new(
                    DMatrix::from_element(2, 3, 1.0),
                    DVector::zeros(2),
                    Precision::Finite(4.0),
                )),
                Layer::Nonlinear {
                    activation: Activation::Identity,
                    dim: 2,
                },
            ],
        )
        .unwrap();
        let y = DVector::from_vec(vec![1.0, -2.0]);
        let j: f64 = objective(&net, &DVector::zeros(3), &y).unwrap();
        assert!((j - 2.0 * 5.0).abs() < 1e-14);
        let z = DVector::from_vec(vec![0.5, -1.0, 0.5]);
        let exact = DVector::from_vec(vec![0.0, 0.0]);
        let j: f64 = objective(&net, &z, &exact).unwrap();
        assert!((j - 1.5).abs() < 1e-14);
    }

    #[test]
    fn matches_split_objective_on_feasible_point() {
        let net = reference_net(100, 3);
        let fac = crate::model::FactoredNetwork::new(net.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z0 = DVector::from_fn(net.input_dim(), |_, _| normal(&mut rng));
        let y = DVector::from_fn(net.output_dim(), |_, _| normal(&mut rng));
        let sig = net.propagate(&z0).unwrap();
        let split: Vec<_> = sig[..net.depth() - 1].to_vec();
        let f = crate::admm::split_objective(&fac, &split, &split, &y).unwrap();
        let j = objective(&net, &z0, &y).unwrap();
        assert!((f - j).abs() <= 1e-12 * j.abs().max(1.0), "{f} {j}");
        assert!((oracle::direct_objective(&net, &z0, &y) - j).abs() <= 1e-12 * j);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let net = reference_net(100, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y = DVector::from_fn(net.output_dim(), |_, _| normal(&mut rng));
        for _ in 0..5 {
            let z0 = DVector::from_fn(net.input_dim(), |_, _| normal(&mut rng));
            let g = gradient(&net, &z0, &y).unwrap();
            let scale = z0.amax().max(1.0);
            let fd = oracle::fd_gradient(|x| objective(&net, x, &y).unwrap(), &z0, 1e-6 * scale);
            let err = (&g - &fd).amax();
            assert!(err <= 1e-5 * g.amax().max(1.0), "{err}");
        }
    }

    #[test]
    fn linear_gradient_is_normal_equation_residual() {
        let net = gaussian_net(&[6, 9], 3.0, 1);
        let lin = net.layer(1).as_linear().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z0 = DVector::from_fn(6, |_, _| normal(&mut rng));
        let y = DVector::from_fn(9, |_, _| normal(&mut rng));
        let expected = &z0 - lin.weights.tr_mul(&(&y - lin.apply(&z0))) * 3.0;
        assert!((gradient(&net, &z0, &y).unwrap() - expected).amax() < 1e-12);
    }

    #[test]
    fn gradient_vanishes_at_map() {
        let net = gaussian_net(&[8, 15, 12], 5.0, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y = DVector::from_fn(12, |_, _| normal(&mut rng));
        let map = oracle::composed_gaussian_map(&net, &y).unwrap();
        assert!(gradient(&net, &map, &y).unwrap().norm() <= 1e-8);
    }

    #[test]
    fn adam_reaches_quadratic_optimum() {
        let net = gaussian_net(&[10, 30, 20], 10.0, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let y = DVector::from_fn(20, |_, _| normal(&mut rng));
        let map = oracle::composed_gaussian_map(&net, &y).unwrap();
        let best = objective(&net, &map, &y).unwrap();
        let out = minimize(&net, &y, &OptimizerOptions::default()).unwrap();
        assert!(out.objective <= 1.01 * best, "{} vs {best}", out.objective);
        assert!(out.best_trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(out.trace.len(), 501);
    }

    #[test]
    fn zero_step_keeps_the_start() {
        let net = gaussian_net(&[4, 6], 1.0, 11);
        let y = DVector::from_element(6, 1.0);
        let opts = OptimizerOptions {
            step_size: 0.0,
            iters: 10,
            ..Default::default()
        };
        let out = minimize(&net, &y, &opts).unwrap();
        assert!(out.trace.iter().all(|&v| v == out.trace[0]));
        let again = minimize(&net, &y, &opts).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn rejects_noisy_hidden_layers() {
        let mut net = gaussian_net(&[4, 6, 5], 1.0, 12);
        let mut layers = net.layers().to_vec();
        if let Layer::Linear(l) = &mut layers[0] {
            l.noise_precision = Precision::Finite(2.0);
        }
        net = Network::new(4, net.prior(), layers).unwrap();
        let y = DVector::zeros(5);
        assert!(matches!(
            objective(&net, &DVector::zeros(4), &y),
            Err(Error::Unsupported(_))
        ));
        assert!(minimize(&net, &y, &OptimizerOptions::default()).is_err());
    }

    #[test]
    fn nan_objective_reports_step() {
        let net = gaussian_net(&[3, 4], 1.0, 13);
        let y = DVector::from_element(4, f64::NAN);
        assert!(matches!(
            minimize(&net, &y, &OptimizerOptions::default()),
            Err(Error::NonFiniteObjective { step: 0 })
        ));
    }
}
