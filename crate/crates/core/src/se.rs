//! State evolution: a Monte-Carlo scalar recursion that predicts the
//! per-position error of the message-passing driver in the large-system limit,
//! plus an empirical-convergence checker for pseudo-Lipschitz test functions.
//!
//! Errors of linear stages are tracked in the singular bases, those of
//! componentwise stages in the signal domain. Crossing a linear layer is
//! modeled by a Haar rotation, so a second-moment description of
//! `(truth, error)` is all that passes between stages. The bias of a linear
//! layer is kept out of the rotated part and re-enters the next componentwise
//! stage as an independent draw from the actual bias entries.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::denoise::{
    identity_scalar, linear_component, linear_output_only, output_component, relu_scalar,
};
use crate::error::{Error, Result};
use crate::mlvamp::{Bounds, InferenceChain, Stage};
use crate::model::{Activation, FactoredNetwork, LinearSvd, Precision};
use crate::rng::stream_rng;

const CHUNK: usize = 4096;
const MIN_SAMPLES: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct SeOptions {
    pub max_iters: usize,
    pub mc_samples: usize,
    pub seed: u64,
    pub bounds: Bounds<f64>,
    pub gamma_init: f64,
    /// Stop once every tracked precision and error changes by less than this,
    /// relatively, between iterations. With common random numbers the recursion
    /// is piecewise smooth at kinks and can settle into a tiny cycle, so this
    /// should stay well above machine precision.
    pub tol: f64,
}

impl Default for SeOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            mc_samples: 100_000,
            seed: 0,
            bounds: Bounds::default(),
            gamma_init: 1e-2,
            tol: 1e-4,
        }
    }
}

/// Empirical law of one linear layer in its singular bases.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLaw {
    /// Paired singular values, `min(n_in, n_out)` of them.
    pub singular: Vec<f64>,
    /// Transformed bias on the paired components.
    pub bbar: Vec<f64>,
    /// Per-component bias energy on output-only components.
    pub rest_bias_var: f64,
    pub n_in: usize,
    pub n_out: usize,
    pub noise: Precision<f64>,
}

impl LinearLaw {
    pub fn from_svd(svd: &LinearSvd<f64>) -> Self {
        let k = svd.thin_dim();
        let rest = svd.rows() - k;
        let rest_energy = (svd.bias().norm_squared() - svd.bbar_lead().norm_squared()).max(0.0);
        Self {
            singular: (0..k).map(|n| svd.singular(n)).collect(),
            bbar: svd.bbar_lead().iter().copied().collect(),
            rest_bias_var: if rest > 0 {
                rest_energy / rest as f64
            } else {
                0.0
            },
            n_in: svd.cols(),
            n_out: svd.rows(),
            noise: svd.noise_precision(),
        }
    }

    fn paired(&self) -> usize {
        self.singular.len()
    }

    /// Exact divergences of the linear estimator, `(alpha_plus, alpha_minus)`.
    fn alphas(&self, gamma_prev: f64, gamma_cur: f64) -> Result<(f64, f64)> {
        let (mut cur, mut prev) = (0.0, 0.0);
        for &s in &self.singular {
            let c = linear_component(0.0, 0.0, s, 0.0, gamma_prev, gamma_cur, self.noise)?;
            cur += c.d_cur;
            prev += c.d_prev;
        }
        let k = self.paired();
        cur += (self.n_out - k) as f64 * linear_output_only(0.0, 0.0, gamma_cur, self.noise).1;
        prev += (self.n_in - k) as f64;
        Ok((cur / self.n_out as f64, prev / self.n_in as f64))
    }

    fn output_alpha(&self, gamma_prev: f64) -> f64 {
        let mut sum = (self.n_in - self.paired()) as f64;
        for &s in &self.singular {
            sum += output_component(0.0, 0.0, s, gamma_prev, self.noise).1;
        }
        sum / self.n_in as f64
    }
}

/// Per-stage laws driving the recursion.
#[derive(Clone, Debug, PartialEq)]
pub enum StageLaw {
    Linear(LinearLaw),
    /// Componentwise stage fed by a linear layer whose bias entries are `bias`.
    Nonlinear {
        activation: Activation,
        bias: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisturbanceModel {
    pub prior_precision: f64,
    /// Stages `1..M`.
    pub stages: Vec<StageLaw>,
    pub output: LinearLaw,
}

impl DisturbanceModel {
    pub fn from_network(net: &FactoredNetwork<f64>) -> Result<Self> {
        let chain = InferenceChain::new(net)?;
        let mut stages = Vec::with_capacity(chain.stages.len());
        for (i, stage) in chain.stages.iter().enumerate() {
            let j = i + 1;
            stages.push(match stage {
                Stage::Linear(svd) => StageLaw::Linear(LinearLaw::from_svd(svd)),
                Stage::Nonlinear(act) => {
                    let feeder = net.network().layer(j - 1).as_linear().ok_or_else(|| {
                        Error::Unsupported(format!(
                            "componentwise layer {j} does not follow a linear layer"
                        ))
                    })?;
                    StageLaw::Nonlinear {
                        activation: *act,
                        bias: feeder.bias.iter().copied().collect(),
                    }
                }
            });
        }
        Ok(Self {
            prior_precision: chain.prior_precision,
            stages,
            output: LinearLaw::from_svd(chain.output),
        })
    }

    pub fn positions(&self) -> usize {
        self.stages.len() + 1
    }
}

/// Tracked quantities after one full iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct SeIteration {
    pub gamma_plus: Vec<f64>,
    pub gamma_minus: Vec<f64>,
    pub alpha_plus: Vec<f64>,
    pub alpha_minus: Vec<f64>,
    /// Error variance of the reverse messages produced in this iteration.
    pub tau_minus: Vec<f64>,
    /// Raw second moments of `(truth, forward-message error)` per position.
    pub k_plus: Vec<[[f64; 2]; 2]>,
    /// Mean squared error of the forward estimates.
    pub mse_plus: Vec<f64>,
    /// Mean squared error of the reverse estimates.
    pub mse_minus: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeState {
    pub iterations: Vec<SeIteration>,
    /// Second moment of the true signal per position.
    pub tau0: Vec<f64>,
    pub warnings: Vec<String>,
    pub converged: bool,
}

impl SeState {
    pub fn last(&self) -> &SeIteration {
        self.iterations.last().expect("at least one iteration")
    }
}

// Feature slots accumulated per sample.
const Z: usize = 0;
const R: usize = 1;
const T: usize = 2;
const U: usize = 3;
const B: usize = 4;
const F: usize = 5;

#[derive(Clone, Debug, Default)]
struct Moments {
    count: f64,
    slope: f64,
    m: [[f64; F]; F],
}

impl Moments {
    fn add(&mut self, v: &[f64; F], d: f64) {
        self.count += 1.0;
        self.slope += d;
        for i in 0..F {
            for j in i..F {
                self.m[i][j] += v[i] * v[j];
            }
        }
    }

    fn merge(&mut self, o: &Moments) {
        self.count += o.count;
        self.slope += o.slope;
        for i in 0..F {
            for j in i..F {
                self.m[i][j] += o.m[i][j];
            }
        }
    }

    fn raw(&self, i: usize, j: usize) -> f64 {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        self.m[a][b] / self.count
    }

    /// `E[(a . v)(b . v)]`.
    fn bilinear(&self, a: &[f64; F], b: &[f64; F]) -> f64 {
        let mut s = 0.0;
        for i in 0..F {
            for j in 0..F {
                s += a[i] * b[j] * self.raw(i, j);
            }
        }
        s
    }

    fn mean_slope(&self) -> f64 {
        self.slope / self.count
    }
}

fn unit(i: usize) -> [f64; F] {
    let mut e = [0.0; F];
    e[i] = 1.0;
    e
}

/// Coefficients of the extrinsic error `(Z - alpha R) / (1 - alpha) - T`.
fn extrinsic_error(alpha: f64) -> [f64; F] {
    let mut c = [0.0; F];
    c[Z] = 1.0 / (1.0 - alpha);
    c[R] = -alpha / (1.0 - alpha);
    c[T] = -1.0;
    c
}

fn squared_error() -> [f64; F] {
    let mut c = [0.0; F];
    c[Z] = 1.0;
    c[T] = -1.0;
    c
}

/// Law of `(truth, error)` handed to the next stage.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Handoff {
    /// Jointly Gaussian with raw second moments `k` (after a Haar rotation).
    Rotated([[f64; 2]; 2]),
    /// `truth = G + B`, `error = c_g G + c_b B + N(0, var_r)` with
    /// `G ~ N(0, var_g)` and `B` drawn from the feeding layer's bias.
    Biased {
        var_g: f64,
        c_g: f64,
        c_b: f64,
        var_r: f64,
    },
}

fn draw_pair(k: &[[f64; 2]; 2], g1: f64, g2: f64) -> (f64, f64) {
    let a = k[0][0].max(0.0).sqrt();
    if a == 0.0 {
        return (0.0, k[1][1].max(0.0).sqrt() * g2);
    }
    let c = k[0][1] / a;
    let d = (k[1][1] - c * c).max(0.0).sqrt();
    (a * g1, c * g1 + d * g2)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn activation_point(act: Activation, rp: f64, rc: f64, gp: f64, gc: f64) -> (f64, f64, f64, f64) {
    match act {
        Activation::Relu => {
            let p = relu_scalar(rp, rc, gp, gc);
            (p.z_prev, p.z_cur, p.d_prev, p.d_cur)
        }
        Activation::Identity => {
            let (z, dp, dc) = identity_scalar(rp, rc, gp, gc);
            (z, z, dp, dc)
        }
    }
}

struct Sampler<'a> {
    opts: &'a SeOptions,
}

impl Sampler<'_> {
    /// Sums per-sample features over `mc_samples` draws. Each fixed-size chunk has
    /// its own counter-based stream, so the result does not depend on threading
    /// and every iteration sees the same draws.
    fn run<S>(&self, stream: u64, sample: S) -> Moments
    where
        S: Fn(&mut ChaCha8Rng) -> Option<([f64; F], f64)> + Sync,
    {
        let total = self.opts.mc_samples;
        let chunks = total.div_ceil(CHUNK);
        let parts: Vec<Moments> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut rng = stream_rng(self.opts.seed, (stream << 32) | c as u64);
                let mut acc = Moments::default();
                for _ in 0..CHUNK.min(total - c * CHUNK) {
                    if let Some((v, d)) = sample(&mut rng) {
                        acc.add(&v, d);
                    }
                }
                acc
            })
            .collect();
        let mut out = Moments::default();
        for p in &parts {
            out.merge(p);
        }
        out
    }
}

/// Random inputs shared by the forward and reverse pass of a linear stage.
struct LinearDraw {
    paired: bool,
    has_prev: bool,
    has_cur: bool,
    s: f64,
    p0: f64,
    p_err: f64,
    xi: f64,
    bbar: f64,
    q_fwd: f64,
    q_rev: f64,
}

fn linear_draw(law: &LinearLaw, k_in: &[[f64; 2]; 2], rng: &mut ChaCha8Rng) -> LinearDraw {
    let n = rng.random_range(0..law.n_in.max(law.n_out));
    let (g1, g2, gx, gb, q_fwd, q_rev) = (
        normal(rng),
        normal(rng),
        normal(rng),
        normal(rng),
        normal(rng),
        normal(rng),
    );
    let paired = n < law.paired();
    let has_cur = n < law.n_out;
    let (p0, p_err) = draw_pair(k_in, g1, g2);
    let xi = match law.noise {
        Precision::Finite(nu) if has_cur => gx / nu.sqrt(),
        _ => 0.0,
    };
    let bbar = if paired {
        law.bbar[n]
    } else if has_cur {
        gb * law.rest_bias_var.sqrt()
    } else {
        0.0
    };
    LinearDraw {
        paired,
        has_prev: n < law.n_in,
        has_cur,
        s: if paired { law.singular[n] } else { 0.0 },
        p0,
        p_err,
        xi,
        bbar,
        q_fwd,
        q_rev,
    }
}

struct Tracker<'a> {
    model: &'a DisturbanceModel,
    opts: &'a SeOptions,
    warnings: Vec<String>,
}

impl Tracker<'_> {
    fn clamp_alpha(&mut self, raw: f64, what: &str, m: usize, k: usize) -> Result<f64> {
        if !raw.is_finite() {
            return Err(Error::StateEvolution(format!(
                "non-finite {what} at iteration {k}, position {m}"
            )));
        }
        if !(raw > 0.0 && raw < 1.0) {
            self.warnings.push(format!(
                "{what} = {raw} outside (0, 1) at iteration {k}, position {m}"
            ));
        }
        Ok(self.opts.bounds.clamp_alpha(raw))
    }

    fn next_gamma(&self, gamma: f64, alpha: f64) -> f64 {
        self.opts.bounds.clamp_gamma(gamma * (1.0 - alpha) / alpha)
    }
}

fn finite_or(k: usize, m: usize, vals: &[f64]) -> Result<()> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::StateEvolution(format!(
            "non-finite moment at iteration {k}, position {m}"
        )))
    }
}

fn rotated_of(mom: &Moments, err: &[f64; F]) -> [[f64; 2]; 2] {
    let t = unit(T);
    let tt = mom.bilinear(&t, &t);
    let te = mom.bilinear(&t, err);
    let ee = mom.bilinear(err, err);
    [[tt, te], [te, ee]]
}

fn biased_of(mom: &Moments, err: &[f64; F]) -> (Handoff, [[f64; 2]; 2]) {
    let (u, b) = (unit(U), unit(B));
    let uu = mom.bilinear(&u, &u);
    let ub = mom.bilinear(&u, &b);
    let bb = mom.bilinear(&b, &b);
    let ue = mom.bilinear(&u, err);
    let be = mom.bilinear(&b, err);
    let ee = mom.bilinear(err, err);
    let (c_g, c_b) = if bb > 0.0 && uu > 0.0 {
        let det = uu * bb - ub * ub;
        if det > 1e-12 * uu * bb {
            ((bb * ue - ub * be) / det, (uu * be - ub * ue) / det)
        } else {
            (ue / uu, 0.0)
        }
    } else if uu > 0.0 {
        (ue / uu, 0.0)
    } else if bb > 0.0 {
        (0.0, be / bb)
    } else {
        (0.0, 0.0)
    };
    let var_r = (ee - c_g * ue - c_b * be).max(0.0);
    (
        Handoff::Biased {
            var_g: uu,
            c_g,
            c_b,
            var_r,
        },
        rotated_of(mom, err),
    )
}

/// Runs the recursion until the tracked quantities settle or `max_iters` is hit.
pub fn run_se(model: &DisturbanceModel, opts: &SeOptions) -> Result<SeState> {
    if opts.mc_samples < MIN_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "mc_samples must be at least {MIN_SAMPLES}, got {}",
            opts.mc_samples
        )));
    }
    if !(opts.gamma_init > 0.0) || opts.max_iters == 0 {
        return Err(Error::InvalidArgument(
            "gamma_init must be positive and max_iters at least 1".into(),
        ));
    }
    let m_count = model.positions();
    let sampler = Sampler { opts };
    let mut tr = Tracker {
        model,
        opts,
        warnings: Vec::new(),
    };
    let tau_prior = model.prior_precision;
    let mut gamma_plus = vec![opts.gamma_init; m_count];
    let mut gamma_minus = vec![opts.gamma_init; m_count];
    let mut tau_minus = vec![0.0f64; m_count];
    let mut handoff = vec![Handoff::Rotated([[0.0; 2]; 2]); m_count];
    let mut iterations: Vec<SeIteration> = Vec::new();
    let mut tau0 = vec![0.0; m_count];
    let mut converged = false;

    for k in 0..opts.max_iters {
        let first = k == 0;
        let mut it = SeIteration {
            gamma_plus: vec![0.0; m_count],
            gamma_minus: vec![0.0; m_count],
            alpha_plus: vec![0.0; m_count],
            alpha_minus: vec![0.0; m_count],
            tau_minus: vec![0.0; m_count],
            k_plus: vec![[[0.0; 2]; 2]; m_count],
            mse_plus: vec![0.0; m_count],
            mse_minus: vec![0.0; m_count],
        };

        // Forward: prior stage.
        {
            let gm = gamma_minus[0];
            let tq = tau_minus[0];
            let mom = sampler.run(0, |rng| {
                let t = normal(rng) / tau_prior.sqrt();
                let q = normal(rng);
                let r = if first { 0.0 } else { t + tq.sqrt() * q };
                Some(([gm * r / (tau_prior + gm), r, t, 0.0, 0.0], 0.0))
            });
            let alpha = tr.clamp_alpha(gm / (tau_prior + gm), "alpha_plus", 0, k)?;
            let err = extrinsic_error(alpha);
            let kk = rotated_of(&mom, &err);
            let mse = mom.bilinear(&squared_error(), &squared_error());
            finite_or(k, 0, &[kk[0][0], kk[0][1], kk[1][1], mse])?;
            handoff[0] = Handoff::Rotated(kk);
            it.k_plus[0] = kk;
            it.mse_plus[0] = mse;
            it.alpha_plus[0] = alpha;
            gamma_plus[0] = tr.next_gamma(gm, alpha);
            if first {
                tau0[0] = kk[0][0];
            }
        }

        // Forward: stages 1..M.
        for j in 1..m_count {
            let (gp, gc) = (gamma_plus[j - 1], gamma_minus[j]);
            let tq = tau_minus[j];
            let input = handoff[j - 1];
            let (mom, alpha) = match &tr.model.stages[j - 1] {
                StageLaw::Linear(law) => {
                    let Handoff::Rotated(k_in) = input else {
                        return Err(Error::StateEvolution(format!(
                            "linear stage {j} must follow a rotated handoff"
                        )));
                    };
                    let mom = sampler.run(j as u64, |rng| {
                        let d = linear_draw(law, &k_in, rng);
                        if !d.has_cur {
                            return None;
                        }
                        let u = d.s * d.p0 + d.xi;
                        let t = u + d.bbar;
                        let r = if first { 0.0 } else { t + tq.sqrt() * d.q_fwd };
                        let z = if d.paired {
                            linear_component(d.p0 + d.p_err, r, d.s, d.bbar, gp, gc, law.noise)
                                .ok()?
                                .g_cur
                        } else {
                            linear_output_only(r, d.bbar, gc, law.noise).0
                        };
                        Some(([z, r, t, u, d.bbar], 0.0))
                    });
                    let (raw, _) = law.alphas(gp, gc)?;
                    (mom, tr.clamp_alpha(raw, "alpha_plus", j, k)?)
                }
                StageLaw::Nonlinear { activation, bias } => {
                    let Handoff::Biased {
                        var_g,
                        c_g,
                        c_b,
                        var_r,
                    } = input
                    else {
                        return Err(Error::StateEvolution(format!(
                            "componentwise stage {j} must follow a linear stage"
                        )));
                    };
                    let act = *activation;
                    let mom = sampler.run(j as u64, |rng| {
                        let (g1, g2, q_fwd, _q_rev) =
                            (normal(rng), normal(rng), normal(rng), normal(rng));
                        let bv = if bias.is_empty() {
                            0.0
                        } else {
                            bias[rng.random_range(0..bias.len())]
                        };
                        let g = var_g.sqrt() * g1;
                        let x0 = g + bv;
                        let rp = x0 + c_g * g + c_b * bv + var_r.sqrt() * g2;
                        let t = act.apply(x0);
                        let rc = if first { 0.0 } else { t + tq.sqrt() * q_fwd };
                        let (_, zc, _, dc) = activation_point(act, rp, rc, gp, gc);
                        Some(([zc, rc, t, 0.0, 0.0], dc))
                    });
                    let raw = mom.mean_slope();
                    (mom, tr.clamp_alpha(raw, "alpha_plus", j, k)?)
                }
            };
            let err = extrinsic_error(alpha);
            let (next, kk) = match &tr.model.stages[j - 1] {
                StageLaw::Linear(_) => biased_of(&mom, &err),
                StageLaw::Nonlinear { .. } => {
                    let kk = rotated_of(&mom, &err);
                    (Handoff::Rotated(kk), kk)
                }
            };
            let mse = mom.bilinear(&squared_error(), &squared_error());
            finite_or(k, j, &[kk[0][0], kk[0][1], kk[1][1], mse])?;
            handoff[j] = next;
            it.k_plus[j] = kk;
            it.mse_plus[j] = mse;
            it.alpha_plus[j] = alpha;
            gamma_plus[j] = tr.next_gamma(gc, alpha);
            if first {
                tau0[j] = kk[0][0];
            }
        }

        // Reverse: output stage.
        let last = m_count - 1;
        {
            let law = &tr.model.output;
            let gp = gamma_plus[last];
            let Handoff::Rotated(k_in) = handoff[last] else {
                return Err(Error::StateEvolution(
                    "output stage must follow a rotated handoff".into(),
                ));
            };
            let stream = m_count as u64;
            let mom = sampler.run(stream, |rng| {
                let n = rng.random_range(0..law.n_in);
                let (g1, g2, gx) = (normal(rng), normal(rng), normal(rng));
                let (p0, pe) = draw_pair(&k_in, g1, g2);
                let r = p0 + pe;
                let z = if n < law.paired() {
                    let s = law.singular[n];
                    let xi = match law.noise {
                        Precision::Finite(nu) => gx / nu.sqrt(),
                        Precision::Infinite => 0.0,
                    };
                    output_component(r, s * p0 + xi, s, gp, law.noise).0
                } else {
                    r
                };
                Some(([z, r, p0, 0.0, 0.0], 0.0))
            });
            let alpha = tr.clamp_alpha(law.output_alpha(gp), "alpha_minus", last, k)?;
            let err = extrinsic_error(alpha);
            let tau = mom.bilinear(&err, &err);
            let mse = mom.bilinear(&squared_error(), &squared_error());
            finite_or(k, last, &[tau, mse])?;
            tau_minus[last] = tau;
            it.mse_minus[last] = mse;
            it.alpha_minus[last] = alpha;
            gamma_minus[last] = tr.next_gamma(gp, alpha);
        }

        // Reverse: stages M-1..1, reusing the forward draws with fresh reverse noise.
        for j in (1..m_count).rev() {
            let (gp, gc) = (gamma_plus[j - 1], gamma_minus[j]);
            let tq = tau_minus[j];
            let input = handoff[j - 1];
            let (mom, alpha) = match &tr.model.stages[j - 1] {
                StageLaw::Linear(law) => {
                    let Handoff::Rotated(k_in) = input else {
                        return Err(Error::StateEvolution(format!(
                            "linear stage {j} must follow a rotated handoff"
                        )));
                    };
                    let mom = sampler.run(j as u64, |rng| {
                        let d = linear_draw(law, &k_in, rng);
                        if !d.has_prev {
                            return None;
                        }
                        let rp = d.p0 + d.p_err;
                        let z = if d.paired {
                            let t = d.s * d.p0 + d.xi + d.bbar;
                            let r = t + tq.sqrt() * d.q_rev;
                            linear_component(rp, r, d.s, d.bbar, gp, gc, law.noise)
                                .ok()?
                                .g_prev
                        } else {
                            rp
                        };
                        Some(([z, rp, d.p0, 0.0, 0.0], 0.0))
                    });
                    let (_, raw) = law.alphas(gp, gc)?;
                    (mom, tr.clamp_alpha(raw, "alpha_minus", j - 1, k)?)
                }
                StageLaw::Nonlinear { activation, bias } => {
                    let Handoff::Biased {
                        var_g,
                        c_g,
                        c_b,
                        var_r,
                    } = input
                    else {
                        return Err(Error::StateEvolution(format!(
                            "componentwise stage {j} must follow a linear stage"
                        )));
                    };
                    let act = *activation;
                    let mom = sampler.run(j as u64, |rng| {
                        let (g1, g2, _q_fwd, q_rev) =
                            (normal(rng), normal(rng), normal(rng), normal(rng));
                        let bv = if bias.is_empty() {
                            0.0
                        } else {
                            bias[rng.random_range(0..bias.len())]
                        };
                        let g = var_g.sqrt() * g1;
                        let x0 = g + bv;
                        let rp = x0 + c_g * g + c_b * bv + var_r.sqrt() * g2;
                        let t = act.apply(x0);
                        let rc = t + tq.sqrt() * q_rev;
                        let (zp, _, dp, _) = activation_point(act, rp, rc, gp, gc);
                        Some(([zp, rp, x0, 0.0, 0.0], dp))
                    });
                    let raw = mom.mean_slope();
                    (mom, tr.clamp_alpha(raw, "alpha_minus", j - 1, k)?)
                }
            };
            let err = extrinsic_error(alpha);
            let tau = mom.bilinear(&err, &err);
            let mse = mom.bilinear(&squared_error(), &squared_error());
            finite_or(k, j - 1, &[tau, mse])?;
            tau_minus[j - 1] = tau;
            it.mse_minus[j - 1] = mse;
            it.alpha_minus[j - 1] = alpha;
            gamma_minus[j - 1] = tr.next_gamma(gp, alpha);
        }

        it.gamma_plus = gamma_plus.clone();
        it.gamma_minus = gamma_minus.clone();
        it.tau_minus = tau_minus.clone();
        let settled = iterations
            .last()
            .is_some_and(|prev| max_relative_change(prev, &it) <= opts.tol);
        iterations.push(it);
        if settled {
            converged = true;
            break;
        }
    }

    Ok(SeState {
        iterations,
        tau0,
        warnings: tr.warnings,
        converged,
    })
}

fn max_relative_change(a: &SeIteration, b: &SeIteration) -> f64 {
    let pairs = [
        (&a.gamma_plus, &b.gamma_plus),
        (&a.gamma_minus, &b.gamma_minus),
        (&a.mse_plus, &b.mse_plus),
        (&a.mse_minus, &b.mse_minus),
    ];
    let mut worst: f64 = 0.0;
    for (x, y) in pairs {
        for (u, v) in x.iter().zip(y) {
            let d = (u - v).abs();
            if d > 0.0 {
                worst = worst.max(d / u.abs().max(v.abs()));
            }
        }
    }
    worst
}

/// Predicted NMSE in dB at `position` for half-iteration `half_iter`: even halves
/// are forward estimates, odd halves reverse estimates.
pub fn predicted_nmse_db(se: &SeState, position: usize, half_iter: usize) -> Result<f64> {
    let it = se.iterations.get(half_iter / 2).ok_or_else(|| {
        Error::InvalidArgument(format!("half-iteration {half_iter} was not tracked"))
    })?;
    let energy = *se
        .tau0
        .get(position)
        .ok_or_else(|| Error::InvalidArgument(format!("position {position} out of range")))?;
    if energy <= 0.0 {
        return Err(Error::ZeroReference);
    }
    let mse = if half_iter.is_multiple_of(2) {
        it.mse_plus[position]
    } else {
        it.mse_minus[position]
    };
    Ok(10.0 * (mse / energy).log10())
}

/// Predicted NMSE of the reverse estimate at the last tracked iteration.
pub fn final_nmse_db(se: &SeState, position: usize) -> Result<f64> {
    predicted_nmse_db(se, position, 2 * se.iterations.len() - 1)
}

/// Pseudo-Lipschitz test functions of order at most 2.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TestFn {
    Identity,
    Square,
    Abs,
    ShiftedSquare(f64),
    /// `x * y` over paired blocks.
    Product,
}

/// Declared limit law of the samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LimitLaw {
    Normal { mean: f64, var: f64 },
    BivariateNormal { mean: [f64; 2], cov: [[f64; 2]; 2] },
}

#[derive(Clone, Copy, Debug)]
pub enum Samples<'a> {
    Scalar(&'a [f64]),
    Paired(&'a [f64], &'a [f64]),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvergenceCheck {
    pub empirical_mean: f64,
    pub reference_mean: f64,
    pub deviation: f64,
}

/// Compares `(1/N) sum f(x_n)` with `E f(X)` under the declared law.
pub fn empirical_converge_check(
    samples: Samples<'_>,
    test_fn: TestFn,
    law: LimitLaw,
) -> Result<ConvergenceCheck> {
    use crate::model::synthetic::normal_cdf;
    let (empirical_mean, reference_mean) = match (samples, test_fn, law) {
        (Samples::Paired(x, y), TestFn::Product, LimitLaw::BivariateNormal { mean, cov }) => {
            if x.len() != y.len() || x.is_empty() {
                return Err(Error::InvalidArgument(
                    "paired blocks must be nonempty and equally long".into(),
                ));
            }
            let emp = x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / x.len() as f64;
            (emp, cov[0][1] + mean[0] * mean[1])
        }
        (Samples::Scalar(x), f, LimitLaw::Normal { mean, var }) if f != TestFn::Product => {
            if x.is_empty() {
                return Err(Error::InvalidArgument("no samples".into()));
            }
            let eval = |v: f64| match f {
                TestFn::Identity => v,
                TestFn::Square => v * v,
                TestFn::Abs => v.abs(),
                TestFn::ShiftedSquare(c) => (v - c) * (v - c),
                TestFn::Product => unreachable!(),
            };
            let emp = x.iter().map(|&v| eval(v)).sum::<f64>() / x.len() as f64;
            let sd = var.sqrt();
            let reference = match f {
                TestFn::Identity => mean,
                TestFn::Square => mean * mean + var,
                TestFn::Abs if sd == 0.0 => mean.abs(),
                TestFn::Abs => {
                    sd * (2.0 / std::f64::consts::PI).sqrt() * (-mean * mean / (2.0 * var)).exp()
                        + mean * (1.0 - 2.0 * normal_cdf(-mean / sd))
                }
                TestFn::ShiftedSquare(c) => (mean - c) * (mean - c) + var,
                TestFn::Product => unreachable!(),
            };
            (emp, reference)
        }
        _ => {
            return Err(Error::InvalidArgument(
                "test function, samples and limit law do not fit together".into(),
            ))
        }
    };
    Ok(ConvergenceCheck {
        empirical_mean,
        reference_mean,
        deviation: (empirical_mean - reference_mean).abs(),
    })
}
