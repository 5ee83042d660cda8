use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};

use super::network::{
    sample_input, Activation, GaussianPrior, Layer, LinearLayer, Network, Precision,
};
use super::svd::{FactoredNetwork, LinearSvd};
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::scalar::Real;

const SNR_PROBES: usize = 256;

/// Random ReLU network with a conditioned linear measurement at the end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    /// Target fraction of positive pre-activations in each hidden layer.
    pub sparsity: f64,
    /// Condition number of the measurement matrix.
    pub kappa: f64,
    pub snr_db: f64,
    /// Spread of the bias entries around their mean.
    pub bias_std: f64,
    pub prior_precision: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            input_dim: 20,
            hidden: vec![100, 500],
            output_dim: 300,
            sparsity: 0.4,
            kappa: 10.0,
            snr_db: 20.0,
            bias_std: 0.1,
            prior_precision: 1.0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("all widths must be positive".into()));
        }
        if !(self.sparsity > 0.0 && self.sparsity < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "sparsity must lie in (0, 1), got {}",
                self.sparsity
            )));
        }
        if !(self.kappa >= 1.0) || !self.kappa.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "kappa must be at least 1, got {}",
                self.kappa
            )));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::InvalidArgument("snr_db must be finite".into()));
        }
        if !(self.bias_std >= 0.0) {
            return Err(Error::InvalidArgument(
                "bias_std must be nonnegative".into(),
            ));
        }
        if !(self.prior_precision > 0.0) || !self.prior_precision.is_finite() {
            return Err(Error::NonPositive {
                what: "prior precision",
                value: self.prior_precision,
            });
        }
        Ok(())
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    let x = -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p);
    // One Newton step polishes the approximation to full precision.
    let pdf = normal_pdf(x);
    if x.is_finite() && pdf > 0.0 {
        x - (normal_cdf(x) - p) / pdf
    } else {
        x
    }
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `E[max(X, 0)^2]` for `X ~ N(mean, sd^2)`.
fn relu_second_moment(mean: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return mean.max(0.0).powi(2);
    }
    let t = mean / sd;
    (mean * mean + sd * sd) * normal_cdf(t) + mean * sd * normal_pdf(t)
}

/// Bias mean that puts a fraction `sparsity` of pre-activations above zero when the
/// weighted input has variance `input_var` and the bias spread is `bias_std`.
pub fn bias_mean(input_var: f64, bias_std: f64, sparsity: f64) -> f64 {
    (input_var + bias_std * bias_std).sqrt() * normal_quantile(sparsity)
}

fn gaussian_matrix<T: Real, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    scale: f64,
    rng: &mut R,
) -> DMatrix<T> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let e: f64 = StandardNormal.sample(rng);
        T::lit(scale * e)
    })
}

/// `k` leading columns of a Haar-distributed orthogonal `n x n` matrix.
pub fn haar_columns<T: Real, R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> DMatrix<T> {
    let g: DMatrix<T> = gaussian_matrix(n, k, 1.0, rng);
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..k {
        if r[(j, j)] < T::zero() {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Thin factors `(U, s, V^T)` of a conditioned matrix: Haar singular vectors and
/// log-spaced singular values with ratio `kappa` and unit mean square.
pub fn conditioned_factors<T: Real, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    kappa: f64,
    rng: &mut R,
) -> Result<(DMatrix<T>, DVector<T>, DMatrix<T>)> {
    if !(kappa >= 1.0) || !kappa.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "kappa must be at least 1, got {kappa}"
        )));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(
            "matrix dimensions must be positive".into(),
        ));
    }
    let k = rows.min(cols);
    let raw: Vec<f64> = (0..k)
        .map(|i| {
            if k == 1 {
                1.0
            } else {
                kappa.powf(-(i as f64) / (k - 1) as f64)
            }
        })
        .collect();
    let mean_sq = raw.iter().map(|s| s * s).sum::<f64>() / k as f64;
    let scale = mean_sq.sqrt().recip();
    let mut s = DVector::from_fn(k, |i, _| T::lit(raw[i] * scale));
    if k > 1 {
        // Pin the extreme ratio to kappa exactly after rounding.
        s[k - 1] = s[0] / T::lit(kappa);
    }
    let u = haar_columns(rows, k, rng);
    let v = haar_columns(cols, k, rng);
    Ok((u, s, v.transpose()))
}

/// Dense conditioned matrix `U Diag(s) V^T`.
pub fn build_conditioned_matrix<T: Real>(
    rows: usize,
    cols: usize,
    kappa: f64,
    seed: u64,
) -> Result<DMatrix<T>> {
    let mut rng = stream_rng(seed, 0);
    let (u, s, v_t) = conditioned_factors::<T, _>(rows, cols, kappa, &mut rng)?;
    let mut us = u;
    for (j, mut col) in us.column_iter_mut().enumerate() {
        col *= s[j];
    }
    Ok(us * v_t)
}

/// Random network together with its factors; the measurement factors are the
/// ones it was built from.
pub fn build_random_factored<T: Real>(
    cfg: &SyntheticConfig,
    seed: u64,
) -> Result<FactoredNetwork<T>> {
    cfg.validate()?;
    let mut layers = Vec::with_capacity(2 * cfg.hidden.len() + 2);
    let mut width = cfg.input_dim;
    let mut input_var = 1.0 / cfg.prior_precision;
    for (h, &units) in cfg.hidden.iter().enumerate() {
        let mut w_rng = stream_rng(seed, 2 * h as u64);
        let mut b_rng = stream_rng(seed, 2 * h as u64 + 1);
        let weights =
            gaussian_matrix::<T, _>(units, width, (1.0 / width as f64).sqrt(), &mut w_rng);
        let mean = bias_mean(input_var, cfg.bias_std, cfg.sparsity);
        let bias = DVector::from_fn(units, |_, _| {
            let e: f64 = StandardNormal.sample(&mut b_rng);
            T::lit(mean + cfg.bias_std * e)
        });
        layers.push(Layer::Linear(LinearLayer::new(
            weights,
            bias,
            Precision::Infinite,
        )));
        layers.push(Layer::Nonlinear {
            activation: Activation::Relu,
            dim: units,
        });
        let pre_sd = (input_var + cfg.bias_std * cfg.bias_std).sqrt();
        input_var = relu_second_moment(mean, pre_sd);
        width = units;
    }

    let mut a_rng = stream_rng(seed, 1000);
    let (u, s, v_t) = conditioned_factors::<T, _>(cfg.output_dim, width, cfg.kappa, &mut a_rng)?;
    let mut us = u.clone();
    for (j, mut col) in us.column_iter_mut().enumerate() {
        col *= s[j];
    }
    let a = &us * &v_t;

    // Calibrate the noise level against the empirical output energy.
    let mut probe_layers = layers.clone();
    probe_layers.push(Layer::Linear(LinearLayer::new(
        a.clone(),
        DVector::zeros(cfg.output_dim),
        Precision::Infinite,
    )));
    probe_layers.push(Layer::Nonlinear {
        activation: Activation::Identity,
        dim: cfg.output_dim,
    });
    let prior = GaussianPrior {
        precision: T::lit(cfg.prior_precision),
    };
    let probe = Network::new(cfg.input_dim, prior, probe_layers)?;
    let mut p_rng = stream_rng(seed, 1001);
    let mut energy = 0.0;
    for _ in 0..SNR_PROBES {
        let z0 = sample_input(&probe, &mut p_rng);
        let out = probe.propagate(&z0)?;
        energy += out.last().unwrap().norm_squared().as_f64();
    }
    let per_entry = energy / (SNR_PROBES * cfg.output_dim) as f64;
    if !(per_entry > 0.0) {
        return Err(Error::InvalidArgument(
            "network output has zero energy".into(),
        ));
    }
    let nu = 10f64.powf(cfg.snr_db / 10.0) / per_entry;

    let noise = Precision::Finite(T::lit(nu));
    let zero_bias = DVector::zeros(cfg.output_dim);
    layers.push(Layer::Linear(LinearLayer::new(a, zero_bias.clone(), noise)));
    layers.push(Layer::Nonlinear {
        activation: Activation::Identity,
        dim: cfg.output_dim,
    });
    let network = Network::new(cfg.input_dim, prior, layers)?;
    let mut known: Vec<Option<LinearSvd<T>>> = vec![None; network.depth()];
    known[network.depth() - 2] = Some(LinearSvd::from_factors(u, s, v_t, zero_bias, noise)?);
    FactoredNetwork::with_factors(network, known)
}

pub fn build_random_network<T: Real>(cfg: &SyntheticConfig, seed: u64) -> Result<Network<T>> {
    Ok(build_random_factored(cfg, seed)?.into_network())
}
