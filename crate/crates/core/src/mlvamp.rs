//! Multi-layer message passing for MAP inference: forward and reverse passes
//! over the inference chain with adaptive or fixed message precisions.

use nalgebra::DVector;

use crate::denoise::{self, DenoiseResult, PrecisionPair};
use crate::error::{Error, Result};
use crate::model::{Activation, FactoredNetwork, Layer, LinearSvd, Trajectory};
use crate::scalar::Real;

/// Clamping window for precisions and divergences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds<T> {
    pub gamma_min: T,
    pub gamma_max: T,
    pub alpha_min: T,
}

impl<T: Real> Default for Bounds<T> {
    fn default() -> Self {
        Self {
            gamma_min: T::lit(1e-8),
            gamma_max: T::lit(1e8),
            alpha_min: T::lit(1e-4),
        }
    }
}

impl<T: Real> Bounds<T> {
    pub fn clamp_gamma(&self, g: T) -> T {
        g.max(self.gamma_min).min(self.gamma_max)
    }

    pub fn clamp_alpha(&self, a: T) -> T {
        a.max(self.alpha_min).min(T::one() - self.alpha_min)
    }
}

/// How message precisions evolve.
#[derive(Clone, Debug, PartialEq)]
pub enum Mode<T> {
    /// Precisions follow the divergence recursion.
    Adaptive,
    /// Precisions `(gamma_plus, gamma_minus)` per message position stay fixed and
    /// divergences are replaced by `alpha_plus = gamma_minus / eta`,
    /// `alpha_minus = gamma_plus / eta` with `eta = gamma_plus + gamma_minus`.
    Fixed(Vec<(T, T)>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions<T> {
    pub max_iters: usize,
    /// Weight of the new candidate in the damped update, in `(0, 1]`.
    pub damping: T,
    pub bounds: Bounds<T>,
    pub mode: Mode<T>,
    /// Relative-change threshold for convergence.
    pub tol: T,
    /// Precision of the all-zero initial reverse messages.
    pub gamma_init: T,
}

impl<T: Real> Default for RunOptions<T> {
    fn default() -> Self {
        Self {
            max_iters: 500,
            damping: T::lit(0.8),
            bounds: Bounds::default(),
            mode: Mode::Adaptive,
            tol: T::lit(1e-8),
            gamma_init: T::lit(1e-2),
        }
    }
}

impl<T: Real> RunOptions<T> {
    pub fn validate(&self, positions: usize) -> Result<()> {
        if !(self.damping > T::zero() && self.damping <= T::one()) {
            return Err(Error::InvalidArgument(format!(
                "damping must lie in (0, 1], got {}",
                self.damping
            )));
        }
        if !(self.bounds.gamma_min > T::zero()) || self.bounds.gamma_max < self.bounds.gamma_min {
            return Err(Error::InvalidArgument(
                "precision bounds must satisfy 0 < min <= max".into(),
            ));
        }
        if !(self.bounds.alpha_min > T::zero() && self.bounds.alpha_min < T::lit(0.5)) {
            return Err(Error::InvalidArgument(
                "alpha_min must lie in (0, 0.5)".into(),
            ));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument(
                "max_iters must be at least 1".into(),
            ));
        }
        if !(self.gamma_init > T::zero()) {
            return Err(Error::NonPositive {
                what: "gamma_init",
                value: self.gamma_init.as_f64(),
            });
        }
        if let Mode::Fixed(gammas) = &self.mode {
            if gammas.len() != positions {
                return Err(Error::DimensionMismatch {
                    layer: 0,
                    expected: positions,
                    found: gammas.len(),
                });
            }
            for &(gp, gm) in gammas {
                if !(gp > T::zero() && gm > T::zero()) {
                    return Err(Error::NonPositive {
                        what: "fixed precision",
                        value: gp.min(gm).as_f64(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// One estimation stage between message positions `j - 1` and `j`.
#[derive(Clone, Copy, Debug)]
pub enum Stage<'a, T: Real> {
    Linear(&'a LinearSvd<T>),
    Nonlinear(Activation),
}

impl<T: Real> Stage<'_, T> {
    pub fn denoise(
        &self,
        r_prev: &DVector<T>,
        r_cur: &DVector<T>,
        theta: PrecisionPair<T>,
    ) -> Result<DenoiseResult<T>> {
        match self {
            Stage::Linear(svd) => denoise::linear_denoise(svd, r_prev, r_cur, theta),
            Stage::Nonlinear(act) => denoise::prox_activation_pair(*act, r_prev, r_cur, theta),
        }
    }
}

/// The network seen as a chain of estimation stages.
///
/// Messages live at positions `0..M` holding `z_0, ..., z_{M-1}` with
/// `M = L - 1`. Position 0 is tied to the prior, stage `j` in `1..M` is network
/// layer `j`, and the final linear layer together with the closing identity
/// forms the output stage attached to position `M - 1`.
#[derive(Clone, Debug)]
pub struct InferenceChain<'a, T: Real> {
    pub prior_precision: T,
    pub stages: Vec<Stage<'a, T>>,
    pub output: &'a LinearSvd<T>,
    pub dims: Vec<usize>,
}

impl<'a, T: Real> InferenceChain<'a, T> {
    pub fn new(net: &'a FactoredNetwork<T>) -> Result<Self> {
        let network = net.network();
        let depth = network.depth();
        if network.layer(depth).activation() != Some(Activation::Identity) {
            return Err(Error::Unsupported(
                "the last layer must be an identity so the observation is a noisy linear map"
                    .into(),
            ));
        }
        let output = net
            .factor(depth - 1)
            .ok_or_else(|| Error::Unsupported("missing factors for the output layer".into()))?;
        let mut stages = Vec::with_capacity(depth - 2);
        for l in 1..depth - 1 {
            stages.push(match network.layer(l) {
                Layer::Linear(_) => {
                    Stage::Linear(net.factor(l).ok_or_else(|| {
                        Error::Unsupported(format!("missing factors for layer {l}"))
                    })?)
                }
                Layer::Nonlinear { activation, .. } => Stage::Nonlinear(*activation),
            });
        }
        let dims = network.dims()[..depth - 1].to_vec();
        Ok(Self {
            prior_precision: network.prior().precision,
            stages,
            output,
            dims,
        })
    }

    /// Number of message positions `M`.
    pub fn positions(&self) -> usize {
        self.dims.len()
    }

    /// Stage `j` in `1..M`.
    pub fn stage(&self, j: usize) -> &Stage<'a, T> {
        &self.stages[j - 1]
    }
}

/// All messages and estimates at every position.
#[derive(Clone, Debug, PartialEq)]
pub struct BeliefState<T: Real> {
    pub r_plus: Vec<DVector<T>>,
    pub r_minus: Vec<DVector<T>>,
    pub gamma_plus: Vec<T>,
    pub gamma_minus: Vec<T>,
    pub zhat_plus: Vec<DVector<T>>,
    pub zhat_minus: Vec<DVector<T>>,
    pub alpha_plus: Vec<T>,
    pub alpha_minus: Vec<T>,
    pub eta_plus: Vec<T>,
    pub eta_minus: Vec<T>,
    /// Completed full iterations.
    pub iteration: usize,
}

impl<T: Real> BeliefState<T> {
    fn initial(dims: &[usize], gamma_minus: Vec<T>, gamma_plus: Vec<T>) -> Self {
        let zeros = || dims.iter().map(|&d| DVector::zeros(d)).collect::<Vec<_>>();
        let m = dims.len();
        Self {
            r_plus: zeros(),
            r_minus: zeros(),
            gamma_plus,
            gamma_minus,
            zhat_plus: zeros(),
            zhat_minus: zeros(),
            alpha_plus: vec![T::zero(); m],
            alpha_minus: vec![T::zero(); m],
            eta_plus: vec![T::zero(); m],
            eta_minus: vec![T::zero(); m],
            iteration: 0,
        }
    }
}

/// Diagnostics of one half-iteration (forward pass even, reverse pass odd).
#[derive(Clone, Debug, PartialEq)]
pub struct HalfIterRecord {
    pub half_iter: usize,
    /// NMSE in dB per position; empty without a truth trajectory.
    pub nmse_db: Vec<f64>,
    /// Precisions produced in this half (`gamma_plus` or `gamma_minus`).
    pub gamma: Vec<f64>,
    /// Divergences used in this half (`alpha_plus` or `alpha_minus`).
    pub alpha: Vec<f64>,
    /// ReLU components sitting on the kink.
    pub kink_hits: usize,
}

#[derive(Clone, Debug)]
pub struct RunResult<T: Real> {
    pub records: Vec<HalfIterRecord>,
    pub state: BeliefState<T>,
    pub converged: bool,
    pub iterations: usize,
}

/// Precision recursion `eta = gamma / alpha`, `gamma_new = eta - gamma`, clamped.
pub fn update_gamma<T: Real>(gamma: T, alpha: T, bounds: &Bounds<T>) -> (T, T) {
    let eta = gamma / alpha;
    let next = gamma * (T::one() - alpha) / alpha;
    (eta, bounds.clamp_gamma(next))
}

/// Extrinsic message `(zhat - alpha r) / (1 - alpha)`.
pub fn extrinsic<T: Real>(zhat: &DVector<T>, alpha: T, r_in: &DVector<T>) -> DVector<T> {
    (zhat - r_in * alpha) / (T::one() - alpha)
}

/// `10 log10(|z0 - zhat|^2 / |z0|^2)`; exact recovery gives `-inf`.
pub fn nmse_db<T: Real>(zhat: &DVector<T>, z0: &DVector<T>) -> Result<f64> {
    if zhat.len() != z0.len() {
        return Err(Error::DimensionMismatch {
            layer: 0,
            expected: z0.len(),
            found: zhat.len(),
        });
    }
    let den = z0.norm_squared().as_f64();
    if den == 0.0 {
        return Err(Error::ZeroReference);
    }
    let num = (z0 - zhat).norm_squared().as_f64();
    Ok(10.0 * (num / den).log10())
}

/// `|a - b| / |a|` with `0 / 0 = 0`.
pub fn relative_change<T: Real>(a: &DVector<T>, b: &DVector<T>) -> f64 {
    let num = (a - b).norm().as_f64();
    let den = a.norm().as_f64();
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn all_finite<T: Real>(v: &DVector<T>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Stepwise driver; `run` is a loop over it.
pub struct Session<'a, T: Real> {
    chain: InferenceChain<'a, T>,
    y: DVector<T>,
    truth: Option<Vec<DVector<T>>>,
    opts: RunOptions<T>,
    state: BeliefState<T>,
    half_iter: usize,
}

impl<'a, T: Real> Session<'a, T> {
    pub fn new(
        net: &'a FactoredNetwork<T>,
        y: &DVector<T>,
        truth: Option<&Trajectory<T>>,
        opts: RunOptions<T>,
    ) -> Result<Self> {
        let chain = InferenceChain::new(net)?;
        let m = chain.positions();
        opts.validate(m)?;
        if y.len() != chain.output.rows() {
            return Err(Error::DimensionMismatch {
                layer: net.network().depth(),
                expected: chain.output.rows(),
                found: y.len(),
            });
        }
        let truth = match truth {
            Some(t) => {
                if t.z.len() < m || t.z.iter().zip(&chain.dims).any(|(z, &d)| z.len() != d) {
                    return Err(Error::InvalidArgument(
                        "truth trajectory does not match the network".into(),
                    ));
                }
                Some(t.z[..m].to_vec())
            }
            None => None,
        };
        let (gamma_plus, gamma_minus) = match &opts.mode {
            Mode::Adaptive => (vec![opts.gamma_init; m], vec![opts.gamma_init; m]),
            Mode::Fixed(g) => g.iter().copied().unzip(),
        };
        let state = BeliefState::initial(&chain.dims, gamma_minus, gamma_plus);
        Ok(Self {
            chain,
            y: y.clone(),
            truth,
            opts,
            state,
            half_iter: 0,
        })
    }

    pub fn state(&self) -> &BeliefState<T> {
        &self.state
    }

    /// Replaces the all-zero initial reverse messages; only valid before the
    /// first pass.
    pub fn set_initial_reverse(&mut self, r_minus: Vec<DVector<T>>) -> Result<()> {
        if self.half_iter != 0 {
            return Err(Error::InvalidArgument(
                "reverse messages can only be seeded before the first pass".into(),
            ));
        }
        if r_minus.len() != self.chain.dims.len()
            || r_minus
                .iter()
                .zip(&self.chain.dims)
                .any(|(r, &d)| r.len() != d)
        {
            return Err(Error::InvalidArgument(
                "initial reverse messages do not match the network".into(),
            ));
        }
        self.state.r_minus = r_minus;
        Ok(())
    }

    pub fn chain(&self) -> &InferenceChain<'a, T> {
        &self.chain
    }

    pub fn options(&self) -> &RunOptions<T> {
        &self.opts
    }

    fn damping(&self) -> T {
        if self.state.iteration == 0 {
            T::one()
        } else {
            self.opts.damping
        }
    }

    fn blend(&self, cand: DVector<T>, old: &DVector<T>) -> DVector<T> {
        let rho = self.damping();
        if rho == T::one() {
            cand
        } else {
            cand * rho + old * (T::one() - rho)
        }
    }

    fn blend_gamma(&self, cand: T, old: T) -> T {
        let rho = self.damping();
        if rho == T::one() {
            cand
        } else {
            (rho * cand.ln() + (T::one() - rho) * old.ln()).exp()
        }
    }

    /// Divergence used for the update: fixed, or clamped raw.
    fn alpha_for(&self, m: usize, raw: T, plus: bool) -> T {
        match &self.opts.mode {
            Mode::Adaptive => self.opts.bounds.clamp_alpha(raw),
            Mode::Fixed(g) => {
                let (gp, gm) = g[m];
                if plus {
                    gm / (gp + gm)
                } else {
                    gp / (gp + gm)
                }
            }
        }
    }

    fn nmse_row(&self, est: &[DVector<T>]) -> Vec<f64> {
        match &self.truth {
            Some(truth) => est
                .iter()
                .zip(truth)
                .map(|(e, z)| nmse_db(e, z).unwrap_or(f64::NAN))
                .collect(),
            None => Vec::new(),
        }
    }

    /// Forward update of position `m` from a fresh estimate.
    fn push_forward(&mut self, m: usize, zhat: DVector<T>, raw_alpha: T) -> Result<()> {
        let alpha = self.alpha_for(m, raw_alpha, true);
        let gamma_in = self.state.gamma_minus[m];
        let r = extrinsic(&zhat, alpha, &self.state.r_minus[m]);
        if !all_finite(&zhat) || !all_finite(&r) {
            return Err(Error::Diverged {
                half_iter: self.half_iter,
                layer: m,
            });
        }
        let (eta, cand) = update_gamma(gamma_in, alpha, &self.opts.bounds);
        self.state.r_plus[m] = self.blend(r, &self.state.r_plus[m]);
        if let Mode::Adaptive = self.opts.mode {
            self.state.gamma_plus[m] = self.blend_gamma(cand, self.state.gamma_plus[m]);
        }
        self.state.eta_plus[m] = eta;
        self.state.alpha_plus[m] = alpha;
        self.state.zhat_plus[m] = zhat;
        Ok(())
    }

    fn push_reverse(&mut self, m: usize, zhat: DVector<T>, raw_alpha: T) -> Result<()> {
        let alpha = self.alpha_for(m, raw_alpha, false);
        let gamma_in = self.state.gamma_plus[m];
        let r = extrinsic(&zhat, alpha, &self.state.r_plus[m]);
        if !all_finite(&zhat) || !all_finite(&r) {
            return Err(Error::Diverged {
                half_iter: self.half_iter,
                layer: m,
            });
        }
        let (eta, cand) = update_gamma(gamma_in, alpha, &self.opts.bounds);
        self.state.r_minus[m] = self.blend(r, &self.state.r_minus[m]);
        if let Mode::Adaptive = self.opts.mode {
            self.state.gamma_minus[m] = self.blend_gamma(cand, self.state.gamma_minus[m]);
        }
        self.state.eta_minus[m] = eta;
        self.state.alpha_minus[m] = alpha;
        self.state.zhat_minus[m] = zhat;
        Ok(())
    }

    /// Prior stage then stages `1..M` in order.
    pub fn forward_pass(&mut self) -> Result<HalfIterRecord> {
        let (zhat, a) = denoise::prox_input(
            &self.state.r_minus[0],
            self.state.gamma_minus[0],
            self.chain.prior_precision,
        )?;
        self.push_forward(0, zhat, a)?;
        let mut kinks = 0;
        for j in 1..self.chain.positions() {
            let theta = PrecisionPair::new(self.state.gamma_plus[j - 1], self.state.gamma_minus[j]);
            let res = self.chain.stage(j).denoise(
                &self.state.r_plus[j - 1],
                &self.state.r_minus[j],
                theta,
            )?;
            kinks += res.kink_hits;
            self.push_forward(j, res.zhat_cur, res.alpha_plus)?;
        }
        let record = HalfIterRecord {
            half_iter: self.half_iter,
            nmse_db: self.nmse_row(&self.state.zhat_plus),
            gamma: self.state.gamma_plus.iter().map(|g| g.as_f64()).collect(),
            alpha: self.state.alpha_plus.iter().map(|a| a.as_f64()).collect(),
            kink_hits: kinks,
        };
        self.half_iter += 1;
        Ok(record)
    }

    /// Output stage then stages `M-1..1` in reverse order.
    pub fn reverse_pass(&mut self) -> Result<HalfIterRecord> {
        let last = self.chain.positions() - 1;
        let (zhat, a) = denoise::prox_output_linear(
            self.chain.output,
            &self.state.r_plus[last],
            &self.y,
            self.state.gamma_plus[last],
        )?;
        self.push_reverse(last, zhat, a)?;
        let mut kinks = 0;
        for j in (1..=last).rev() {
            let theta = PrecisionPair::new(self.state.gamma_plus[j - 1], self.state.gamma_minus[j]);
            let res = self.chain.stage(j).denoise(
                &self.state.r_plus[j - 1],
                &self.state.r_minus[j],
                theta,
            )?;
            kinks += res.kink_hits;
            self.push_reverse(j - 1, res.zhat_prev, res.alpha_minus)?;
        }
        let record = HalfIterRecord {
            half_iter: self.half_iter,
            nmse_db: self.nmse_row(&self.state.zhat_minus),
            gamma: self.state.gamma_minus.iter().map(|g| g.as_f64()).collect(),
            alpha: self.state.alpha_minus.iter().map(|a| a.as_f64()).collect(),
            kink_hits: kinks,
        };
        self.half_iter += 1;
        self.state.iteration += 1;
        Ok(record)
    }

    /// Largest relative gap `|zhat_plus - zhat_minus| / |zhat_plus|` over positions.
    pub fn primal_gap(&self) -> f64 {
        self.state
            .zhat_plus
            .iter()
            .zip(&self.state.zhat_minus)
            .map(|(p, m)| relative_change(p, m))
            .fold(0.0, f64::max)
    }

    pub fn into_state(self) -> BeliefState<T> {
        self.state
    }
}

/// Runs full iterations until the forward estimates stop moving and agree with
/// the reverse estimates, or `max_iters` is reached.
pub fn run<T: Real>(
    net: &FactoredNetwork<T>,
    y: &DVector<T>,
    truth: Option<&Trajectory<T>>,
    opts: RunOptions<T>,
) -> Result<RunResult<T>> {
    let max_iters = opts.max_iters;
    let tol = opts.tol.as_f64();
    let mut session = Session::new(net, y, truth, opts)?;
    let mut records = Vec::with_capacity(2 * max_iters);
    let mut converged = false;
    for _ in 0..max_iters {
        let previous = session.state().zhat_plus.clone();
        records.push(session.forward_pass()?);
        let change = session
            .state()
            .zhat_plus
            .iter()
            .zip(&previous)
            .map(|(now, before)| relative_change(now, before))
            .fold(0.0, f64::max);
        records.push(session.reverse_pass()?);
        if session.state().iteration > 1 && change <= tol && session.primal_gap() <= tol {
            converged = true;
            break;
        }
    }
    let state = session.into_state();
    Ok(RunResult {
        records,
        iterations: state.iteration,
        state,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GaussianPrior, LinearLayer, Network, Precision};
    use crate::oracle;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(rng: &mut ChaCha8Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    fn gaussian_net(dims: &[usize], seed: u64) -> Network<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for w in dims.windows(2) {
            let scale = 1.0 / (w[0] as f64).sqrt();
            let weights = DMatrix::from_fn(w[1], w[0], |_, _| scale * normal(&mut rng));
            let bias = DVector::from_fn(w[1], |_, _| 0.1 * normal(&mut rng));
            layers.push(Layer::Linear(LinearLayer::new(
                weights,
                bias,
                Precision::Finite(4.0),
            )));
            layers.push(Layer::Nonlinear {
                activation: Activation::Identity,
                dim: w[1],
            });
        }
        Network::new(dims[0], GaussianPrior { precision: 1.0 }, layers).unwrap()
    }

    #[test]
    fn precision_recursion() {
        let b = Bounds::<f64>::default();
        let (eta, g) = update_gamma(1.0, 0.25, &b);
        assert!((eta - 4.0).abs() < 1e-15 && (g - 3.0).abs() < 1e-15);
        let (eta, g) = update_gamma(1.0, 0.5, &b);
        assert!((eta - 2.0).abs() < 1e-15 && (g - 1.0).abs() < 1e-15);
        let (_, g) = update_gamma(1.0, 1.0 - 1e-12, &b);
        assert_eq!(g, b.gamma_min);
    }

    #[test]
    fn extrinsic_step() {
        let r = extrinsic(
            &DVector::from_element(1, 1.5f64),
            0.75,
            &DVector::from_element(1, 2.0),
        );
        assert!(r[0].abs() < 1e-15);
    }

    #[test]
    fn nmse_conventions() {
        let z = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        assert_eq!(nmse_db(&z, &z).unwrap(), f64::NEG_INFINITY);
        assert!(nmse_db(&DVector::zeros(3), &z).unwrap().abs() < 1e-12);
        assert!(nmse_db(&(&z * 2.0), &z).unwrap().abs() < 1e-12);
        assert!(matches!(
            nmse_db(&z, &DVector::zeros(3)),
            Err(Error::ZeroReference)
        ));
    }

    #[test]
    fn gaussian_network_reaches_joint_map() {
        let net = gaussian_net(&[8, 12, 10], 5);
        let fac = FactoredNetwork::new(net.clone()).unwrap();
        let traj = crate::model::forward_sample(
            &net,
            &DVector::from_fn(8, |i, _| (i as f64 * 0.7).sin()),
            9,
        )
        .unwrap();
        let y = traj.output().clone();
        let res = run(&fac, &y, None, RunOptions::default()).unwrap();
        assert!(res.converged, "stopped after {} iterations", res.iterations);
        assert!(res.iterations <= 50);
        let map = oracle::gaussian_map(&net, &y).unwrap();
        for (m, z) in map.iter().enumerate() {
            let err = (&res.state.zhat_plus[m] - z).norm() / z.norm();
            assert!(err < 1e-8, "position {m}: {err}");
        }
    }

    #[test]
    fn trace_lengths_and_reproducibility() {
        let net = crate::model::build_random_network::<f64>(
            &crate::model::SyntheticConfig {
                output_dim: 60,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        let fac = FactoredNetwork::new(net).unwrap();
        let traj = crate::model::forward_sample(
            fac.network(),
            &DVector::from_fn(20, |i, _| (i as f64).cos()),
            4,
        )
        .unwrap();
        let opts = RunOptions {
            max_iters: 7,
            ..Default::default()
        };
        let a = run(&fac, traj.output(), Some(&traj), opts.clone()).unwrap();
        let b = run(&fac, traj.output(), Some(&traj), opts).unwrap();
        assert_eq!(a.records.len(), 2 * a.iterations);
        assert_eq!(a.records, b.records);
        assert_eq!(a.state, b.state);
        assert_eq!(a.records[0].nmse_db.len(), 5);
    }

    #[test]
    fn rejects_bad_options() {
        let fac = FactoredNetwork::new(gaussian_net(&[3, 4], 1)).unwrap();
        let y = DVector::zeros(4);
        let bad = RunOptions {
            damping: 0.0,
            ..Default::default()
        };
        assert!(run(&fac, &y, None, bad).is_err());
        assert!(run(&fac, &DVector::zeros(2), None, RunOptions::default()).is_err());
    }
}
