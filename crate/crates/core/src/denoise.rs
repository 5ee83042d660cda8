//! Layer-wise MAP estimators and their average divergences.
//!
//! Every estimator returns the raw divergence; clamping into `(0, 1)` is left to
//! the message-passing driver.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::model::{Activation, LinearSvd, Precision};
use crate::scalar::Real;

/// Message precisions seen by one layer: `gamma_prev` weighs the message on the
/// layer input and `gamma_cur` the message on its output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrecisionPair<T> {
    pub gamma_prev: T,
    pub gamma_cur: T,
}

impl<T: Real> PrecisionPair<T> {
    pub fn new(gamma_prev: T, gamma_cur: T) -> Self {
        Self {
            gamma_prev,
            gamma_cur,
        }
    }

    fn check(&self) -> Result<()> {
        check_positive("gamma_prev", self.gamma_prev)?;
        check_positive("gamma_cur", self.gamma_cur)
    }
}

fn check_positive<T: Real>(what: &'static str, v: T) -> Result<()> {
    if v > T::zero() && v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositive {
            what,
            value: v.as_f64(),
        })
    }
}

/// Joint estimate of a layer's input and output with the mean diagonal slopes.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseResult<T: Real> {
    /// Estimate of the layer input.
    pub zhat_prev: DVector<T>,
    /// Estimate of the layer output.
    pub zhat_cur: DVector<T>,
    /// Mean of `d zhat_cur / d r_cur`.
    pub alpha_plus: T,
    /// Mean of `d zhat_prev / d r_prev`.
    pub alpha_minus: T,
    /// Components whose input estimate sits exactly on a kink.
    pub kink_hits: usize,
}

/// MAP estimate under the Gaussian prior `N(0, 1/prior_precision)`.
pub fn prox_input<T: Real>(
    r: &DVector<T>,
    gamma: T,
    prior_precision: T,
) -> Result<(DVector<T>, T)> {
    check_positive("gamma", gamma)?;
    check_positive("prior precision", prior_precision)?;
    let slope = gamma / (prior_precision + gamma);
    Ok((r * slope, slope))
}

/// Scalar solution of the ReLU pair problem.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReluPoint<T> {
    pub z_prev: T,
    pub z_cur: T,
    pub d_prev: T,
    pub d_cur: T,
    pub positive: bool,
    pub kink: bool,
}

/// Energy of the ReLU pair problem at a feasible point `z_cur = max(0, z_prev)`.
#[inline]
pub fn relu_energy<T: Real>(z_prev: T, r_prev: T, r_cur: T, gamma_prev: T, gamma_cur: T) -> T {
    let half = T::lit(0.5);
    let z_cur = Activation::Relu.apply(z_prev);
    let dp = z_prev - r_prev;
    let dc = z_cur - r_cur;
    half * gamma_prev * dp * dp + half * gamma_cur * dc * dc
}

/// Minimizes `gp/2 (zp - rp)^2 + gc/2 (zc - rc)^2` subject to `zc = max(0, zp)`.
#[inline]
pub fn relu_scalar<T: Real>(r_prev: T, r_cur: T, gamma_prev: T, gamma_cur: T) -> ReluPoint<T> {
    let zero = T::zero();
    let half = T::lit(0.5);
    let total = gamma_prev + gamma_cur;

    let neg_prev = r_prev.min(zero);
    let over = r_prev.max(zero);
    let e_neg = half * gamma_prev * over * over + half * gamma_cur * r_cur * r_cur;

    let mean = (gamma_prev * r_prev + gamma_cur * r_cur) / total;
    let pos = mean.max(zero);
    let (dp, dc) = (pos - r_prev, pos - r_cur);
    let e_pos = half * gamma_prev * dp * dp + half * gamma_cur * dc * dc;

    if e_neg <= e_pos {
        let clamped = r_prev >= zero;
        ReluPoint {
            z_prev: neg_prev,
            z_cur: zero,
            d_prev: if clamped { zero } else { T::one() },
            d_cur: zero,
            positive: false,
            kink: clamped,
        }
    } else {
        ReluPoint {
            z_prev: pos,
            z_cur: pos,
            d_prev: gamma_prev / total,
            d_cur: gamma_cur / total,
            positive: true,
            kink: false,
        }
    }
}

/// Scalar solution of the identity pair problem `zc = zp`.
#[inline]
pub fn identity_scalar<T: Real>(r_prev: T, r_cur: T, gamma_prev: T, gamma_cur: T) -> (T, T, T) {
    let total = gamma_prev + gamma_cur;
    (
        (gamma_prev * r_prev + gamma_cur * r_cur) / total,
        gamma_prev / total,
        gamma_cur / total,
    )
}

fn check_pair_lengths<T: Real>(r_prev: &DVector<T>, r_cur: &DVector<T>) -> Result<()> {
    if r_prev.len() != r_cur.len() {
        return Err(Error::DimensionMismatch {
            layer: 0,
            expected: r_prev.len(),
            found: r_cur.len(),
        });
    }
    Ok(())
}

fn mean_of<T: Real>(sum: T, n: usize) -> T {
    if n == 0 {
        T::zero()
    } else {
        sum / T::lit(n as f64)
    }
}

/// Componentwise MAP estimate through a deterministic ReLU.
pub fn prox_relu_pair<T: Real>(
    r_prev: &DVector<T>,
    r_cur: &DVector<T>,
    theta: PrecisionPair<T>,
) -> Result<DenoiseResult<T>> {
    theta.check()?;
    check_pair_lengths(r_prev, r_cur)?;
    let n = r_prev.len();
    let mut zhat_prev = DVector::zeros(n);
    let mut zhat_cur = DVector::zeros(n);
    let (mut sum_prev, mut sum_cur) = (T::zero(), T::zero());
    let mut kink_hits = 0;
    for i in 0..n {
        let pt = relu_scalar(r_prev[i], r_cur[i], theta.gamma_prev, theta.gamma_cur);
        zhat_prev[i] = pt.z_prev;
        zhat_cur[i] = pt.z_cur;
        sum_prev += pt.d_prev;
        sum_cur += pt.d_cur;
        kink_hits += pt.kink as usize;
    }
    Ok(DenoiseResult {
        zhat_prev,
        zhat_cur,
        alpha_plus: mean_of(sum_cur, n),
        alpha_minus: mean_of(sum_prev, n),
        kink_hits,
    })
}

/// Componentwise MAP estimate through the identity.
pub fn prox_identity_pair<T: Real>(
    r_prev: &DVector<T>,
    r_cur: &DVector<T>,
    theta: PrecisionPair<T>,
) -> Result<DenoiseResult<T>> {
    theta.check()?;
    check_pair_lengths(r_prev, r_cur)?;
    let total = theta.gamma_prev + theta.gamma_cur;
    let z = (r_prev * theta.gamma_prev + r_cur * theta.gamma_cur) / total;
    Ok(DenoiseResult {
        zhat_prev: z.clone(),
        zhat_cur: z,
        alpha_plus: theta.gamma_cur / total,
        alpha_minus: theta.gamma_prev / total,
        kink_hits: 0,
    })
}

/// Dispatches on the activation.
pub fn prox_activation_pair<T: Real>(
    activation: Activation,
    r_prev: &DVector<T>,
    r_cur: &DVector<T>,
    theta: PrecisionPair<T>,
) -> Result<DenoiseResult<T>> {
    match activation {
        Activation::Relu => prox_relu_pair(r_prev, r_cur, theta),
        Activation::Identity => prox_identity_pair(r_prev, r_cur, theta),
    }
}

/// One component of the transformed linear estimator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearComponent<T> {
    pub g_prev: T,
    pub g_cur: T,
    /// `d g_prev / d u_prev`.
    pub d_prev: T,
    /// `d g_cur / d u_cur`.
    pub d_cur: T,
}

/// Solves the 2x2 system of one paired component with singular value `s` and
/// transformed bias `bbar`.
#[inline]
pub fn linear_component<T: Real>(
    u_prev: T,
    u_cur: T,
    s: T,
    bbar: T,
    gamma_prev: T,
    gamma_cur: T,
    nu: Precision<T>,
) -> Result<LinearComponent<T>> {
    match nu {
        Precision::Finite(nu) => {
            let a = gamma_prev + nu * s * s;
            let d = gamma_cur + nu;
            let off = nu * s;
            let det = gamma_prev * gamma_cur + gamma_prev * nu + gamma_cur * nu * s * s;
            if !(det > T::zero()) || !det.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "singular 2x2 system (det = {det})"
                )));
            }
            let r1 = gamma_prev * u_prev - off * bbar;
            let r2 = gamma_cur * u_cur + nu * bbar;
            Ok(LinearComponent {
                g_prev: (d * r1 + off * r2) / det,
                g_cur: (off * r1 + a * r2) / det,
                d_prev: gamma_prev * d / det,
                d_cur: gamma_cur * a / det,
            })
        }
        Precision::Infinite => {
            if s > T::zero() {
                let den = gamma_prev + gamma_cur * s * s;
                let g_prev = (gamma_prev * u_prev + gamma_cur * s * (u_cur - bbar)) / den;
                Ok(LinearComponent {
                    g_prev,
                    g_cur: s * g_prev + bbar,
                    d_prev: gamma_prev / den,
                    d_cur: gamma_cur * s * s / den,
                })
            } else {
                Ok(LinearComponent {
                    g_prev: u_prev,
                    g_cur: bbar,
                    d_prev: T::one(),
                    d_cur: T::zero(),
                })
            }
        }
    }
}

/// Output-only component (`s = 0`, no input partner): returns `(estimate, slope)`.
#[inline]
pub fn linear_output_only<T: Real>(u_cur: T, bbar: T, gamma_cur: T, nu: Precision<T>) -> (T, T) {
    match nu {
        Precision::Finite(nu) => (
            (gamma_cur * u_cur + nu * bbar) / (gamma_cur + nu),
            gamma_cur / (gamma_cur + nu),
        ),
        Precision::Infinite => (bbar, T::zero()),
    }
}

fn check_svd_dims<T: Real>(
    svd: &LinearSvd<T>,
    r_prev: &DVector<T>,
    r_cur: &DVector<T>,
) -> Result<()> {
    if r_prev.len() != svd.cols() {
        return Err(Error::DimensionMismatch {
            layer: 0,
            expected: svd.cols(),
            found: r_prev.len(),
        });
    }
    if r_cur.len() != svd.rows() {
        return Err(Error::DimensionMismatch {
            layer: 0,
            expected: svd.rows(),
            found: r_cur.len(),
        });
    }
    Ok(())
}

/// MAP estimate of `(z_prev, z_cur)` for `z_cur = W z_prev + b + noise`, computed
/// componentwise in the singular bases.
pub fn linear_denoise<T: Real>(
    svd: &LinearSvd<T>,
    r_prev: &DVector<T>,
    r_cur: &DVector<T>,
    theta: PrecisionPair<T>,
) -> Result<DenoiseResult<T>> {
    theta.check()?;
    check_svd_dims(svd, r_prev, r_cur)?;
    let k = svd.thin_dim();
    let nu = svd.noise_precision();
    let u_prev = svd.to_input_basis(r_prev);
    let u_cur = svd.to_output_basis(r_cur);
    let bbar = svd.bbar_lead();
    let mut g_prev = DVector::zeros(k);
    let mut g_cur = DVector::zeros(k);
    for n in 0..k {
        let c = linear_component(
            u_prev[n],
            u_cur[n],
            svd.singular(n),
            bbar[n],
            theta.gamma_prev,
            theta.gamma_cur,
            nu,
        )?;
        g_prev[n] = c.g_prev;
        g_cur[n] = c.g_cur;
    }

    // Input-only components keep the message; output-only ones see s = 0.
    let mut zhat_prev = svd.right().tr_mul(&g_prev);
    if svd.cols() > k {
        zhat_prev += r_prev - svd.right().tr_mul(&u_prev);
    }
    let mut zhat_cur = svd.left() * &g_cur;
    if svd.rows() > k {
        let target = match nu {
            Precision::Finite(v) => {
                (r_cur * theta.gamma_cur + svd.bias() * v) / (theta.gamma_cur + v)
            }
            Precision::Infinite => svd.bias().clone(),
        };
        let lead = svd.to_output_basis(&target);
        zhat_cur += &target - svd.left() * lead;
    }
    let (alpha_plus, alpha_minus) = linear_alpha(svd, theta)?;
    Ok(DenoiseResult {
        zhat_prev,
        zhat_cur,
        alpha_plus,
        alpha_minus,
        kink_hits: 0,
    })
}

/// Exact mean diagonal of the linear estimator's Jacobian.
pub fn linear_alpha<T: Real>(svd: &LinearSvd<T>, theta: PrecisionPair<T>) -> Result<(T, T)> {
    theta.check()?;
    let k = svd.thin_dim();
    let nu = svd.noise_precision();
    let (mut sum_cur, mut sum_prev) = (T::zero(), T::zero());
    for n in 0..k {
        let c = linear_component(
            T::zero(),
            T::zero(),
            svd.singular(n),
            T::zero(),
            theta.gamma_prev,
            theta.gamma_cur,
            nu,
        )?;
        sum_cur += c.d_cur;
        sum_prev += c.d_prev;
    }
    let extra_cur = T::lit((svd.rows() - k) as f64);
    let extra_prev = T::lit((svd.cols() - k) as f64);
    sum_cur += extra_cur * linear_output_only(T::zero(), T::zero(), theta.gamma_cur, nu).1;
    sum_prev += extra_prev;
    Ok((mean_of(sum_cur, svd.rows()), mean_of(sum_prev, svd.cols())))
}

/// MAP estimate of the last hidden signal from the observation `y` through
/// `y = W z + b + noise`; returns the estimate and its mean slope.
pub fn prox_output_linear<T: Real>(
    svd: &LinearSvd<T>,
    r_prev: &DVector<T>,
    y: &DVector<T>,
    gamma_prev: T,
) -> Result<(DVector<T>, T)> {
    check_positive("gamma_prev", gamma_prev)?;
    check_svd_dims(svd, r_prev, y)?;
    let k = svd.thin_dim();
    let u = svd.to_input_basis(r_prev);
    let ybar = svd.to_output_basis(y);
    let bbar = svd.bbar_lead();
    let nu = svd.noise_precision();
    let g = DVector::from_fn(k, |n, _| {
        output_component(u[n], ybar[n] - bbar[n], svd.singular(n), gamma_prev, nu).0
    });
    let mut zhat = svd.right().tr_mul(&g);
    if svd.cols() > k {
        zhat += r_prev - svd.right().tr_mul(&u);
    }
    Ok((zhat, output_alpha(svd, gamma_prev)))
}

/// Exact mean slope of the output estimator.
pub fn output_alpha<T: Real>(svd: &LinearSvd<T>, gamma_prev: T) -> T {
    let k = svd.thin_dim();
    let nu = svd.noise_precision();
    let mut sum = T::lit((svd.cols() - k) as f64);
    for n in 0..k {
        sum += output_component(T::zero(), T::zero(), svd.singular(n), gamma_prev, nu).1;
    }
    mean_of(sum, svd.cols())
}

/// One component of the output estimator given the bias-corrected observation.
#[inline]
pub fn output_component<T: Real>(
    u: T,
    residual_obs: T,
    s: T,
    gamma_prev: T,
    nu: Precision<T>,
) -> (T, T) {
    match nu {
        Precision::Finite(nu) => {
            let den = gamma_prev + nu * s * s;
            (
                (gamma_prev * u + nu * s * residual_obs) / den,
                gamma_prev / den,
            )
        }
        Precision::Infinite => {
            if s > T::zero() {
                (residual_obs / s, T::zero())
            } else {
                (u, T::one())
            }
        }
    }
}
