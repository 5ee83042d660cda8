//! Fixed-precision message passing as a splitting method: dual extraction, a
//! Lagrangian-based reference stepper and fixed-point (KKT) verification.

use nalgebra::{DMatrix, DVector};

use crate::denoise::{self, PrecisionPair};
use crate::error::{Error, Result};
use crate::mlvamp::{
    self, relative_change, BeliefState, InferenceChain, Mode, RunOptions, RunResult, Session,
};
use crate::model::{Activation, FactoredNetwork, Layer, LinearLayer, Precision};
use crate::scalar::Real;

/// Dual variables per message position.
#[derive(Clone, Debug, PartialEq)]
pub struct DualState<T: Real> {
    pub s_plus: Vec<DVector<T>>,
    pub s_minus: Vec<DVector<T>>,
    /// `eta = gamma_plus + gamma_minus` per position.
    pub eta: Vec<T>,
}

/// Fixed divergences `(alpha_plus, alpha_minus, eta)` for one position.
pub fn fixed_alphas<T: Real>(gamma_plus: T, gamma_minus: T) -> (T, T, T) {
    let eta = gamma_plus + gamma_minus;
    (gamma_minus / eta, gamma_plus / eta, eta)
}

/// Run options for fixed-precision mode: undamped, `iters` full iterations.
pub fn fixed_options<T: Real>(gammas: &[(T, T)], iters: usize) -> RunOptions<T> {
    RunOptions {
        max_iters: iters,
        damping: T::one(),
        mode: Mode::Fixed(gammas.to_vec()),
        ..RunOptions::default()
    }
}

/// Duals of a fixed-mode state after a full iteration `k`: `s_plus` belongs to
/// iteration `k` and `s_minus` to iteration `k + 1`.
pub fn duals_from_state<T: Real>(state: &BeliefState<T>, gammas: &[(T, T)]) -> DualState<T> {
    let mut out = DualState {
        s_plus: Vec::with_capacity(gammas.len()),
        s_minus: Vec::with_capacity(gammas.len()),
        eta: Vec::with_capacity(gammas.len()),
    };
    for (m, &(gp, gm)) in gammas.iter().enumerate() {
        let (ap, am, eta) = fixed_alphas(gp, gm);
        out.s_plus
            .push((&state.r_plus[m] - &state.zhat_plus[m]) * am);
        out.s_minus
            .push((&state.zhat_minus[m] - &state.r_minus[m]) * ap);
        out.eta.push(eta);
    }
    out
}

/// Fixed-precision run with dual extraction at the last iteration.
pub fn run_fixed<T: Real>(
    net: &FactoredNetwork<T>,
    y: &DVector<T>,
    gammas: &[(T, T)],
    iters: usize,
) -> Result<(RunResult<T>, DualState<T>)> {
    let res = mlvamp::run(net, y, None, fixed_options(gammas, iters))?;
    let duals = duals_from_state(&res.state, gammas);
    Ok((res, duals))
}

/// Estimates and duals after one full iteration `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdmmIterate<T: Real> {
    pub zhat_plus: Vec<DVector<T>>,
    pub zhat_minus: Vec<DVector<T>>,
    /// Duals of iteration `k` after the forward pass.
    pub s_plus: Vec<DVector<T>>,
    /// Duals of iteration `k + 1` after the reverse pass.
    pub s_minus: Vec<DVector<T>>,
}

/// Exactly `iters` fixed-mode iterations of the message-passing driver, with the
/// duals read off after every iteration.
pub fn fixed_trace<T: Real>(
    net: &FactoredNetwork<T>,
    y: &DVector<T>,
    gammas: &[(T, T)],
    iters: usize,
) -> Result<Vec<AdmmIterate<T>>> {
    let mut session = Session::new(net, y, None, fixed_options(gammas, iters))?;
    let mut out = Vec::with_capacity(iters);
    for _ in 0..iters {
        session.forward_pass()?;
        session.reverse_pass()?;
        let duals = duals_from_state(session.state(), gammas);
        out.push(AdmmIterate {
            zhat_plus: session.state().zhat_plus.clone(),
            zhat_minus: session.state().zhat_minus.clone(),
            s_plus: duals.s_plus,
            s_minus: duals.s_minus,
        });
    }
    Ok(out)
}

/// Iterate of the reference stepper: forward estimates of iteration `k`, reverse
/// estimates of `k - 1` and duals `s_minus` of iteration `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceState<T: Real> {
    pub zhat_plus: Vec<DVector<T>>,
    pub zhat_minus: Vec<DVector<T>>,
    pub s_plus: Vec<DVector<T>>,
    pub s_minus: Vec<DVector<T>>,
}

impl<T: Real> ReferenceState<T> {
    /// All-zero start, equivalent to zero initial reverse messages.
    pub fn zeros(dims: &[usize]) -> Self {
        let z = || dims.iter().map(|&d| DVector::zeros(d)).collect::<Vec<_>>();
        Self {
            zhat_plus: z(),
            zhat_minus: z(),
            s_plus: z(),
            s_minus: z(),
        }
    }
}

/// One full iteration written as per-stage Lagrangian minimizations followed by
/// dual ascent steps.
///
/// Completing the square turns the linear dual term and the proximal penalty of
/// each stage into a single quadratic with a shifted center, after which the
/// stage problem is the same MAP problem the denoisers solve.
pub fn admm_step_reference<T: Real>(
    state: &ReferenceState<T>,
    net: &FactoredNetwork<T>,
    y: &DVector<T>,
    gammas: &[(T, T)],
) -> Result<ReferenceState<T>> {
    let chain = InferenceChain::new(net)?;
    let m_count = chain.positions();
    if gammas.len() != m_count {
        return Err(Error::DimensionMismatch {
            layer: 0,
            expected: m_count,
            found: gammas.len(),
        });
    }
    let eta: Vec<T> = gammas.iter().map(|&(p, m)| p + m).collect();
    // Center of the penalty on z_m^- seen from the stage that follows it.
    let center_prev = |zp: &DVector<T>, s: &DVector<T>, m: usize| zp + s * (eta[m] / gammas[m].0);
    // Center of the penalty on z_m^+ seen from the stage that produces it.
    let center_cur = |zm: &DVector<T>, s: &DVector<T>, m: usize| zm - s * (eta[m] / gammas[m].1);

    let mut next = state.clone();
    // Forward: stage m minimizes over (z_{m-1}^-, z_m^+) and keeps z_m^+.
    for m in 0..m_count {
        let cur = center_cur(&state.zhat_minus[m], &state.s_minus[m], m);
        let zhat = if m == 0 {
            let tau = chain.prior_precision;
            &cur * (gammas[0].1 / (tau + gammas[0].1))
        } else {
            let prev = center_prev(&next.zhat_plus[m - 1], &next.s_plus[m - 1], m - 1);
            let theta = PrecisionPair::new(gammas[m - 1].0, gammas[m].1);
            stage_minimizer(&chain, m, &prev, &cur, theta)?.1
        };
        let alpha_plus = gammas[m].1 / eta[m];
        next.s_plus[m] = &state.s_minus[m] + (&zhat - &state.zhat_minus[m]) * alpha_plus;
        next.zhat_plus[m] = zhat;
    }
    // Reverse: the output stage, then stage m keeps z_{m-1}^-.
    let last = m_count - 1;
    for m in (0..m_count).rev() {
        let prev = center_prev(&next.zhat_plus[m], &next.s_plus[m], m);
        let zhat = if m == last {
            let (z, _) = denoise::prox_output_linear(chain.output, &prev, y, gammas[m].0)?;
            z
        } else {
            let cur = center_cur(&next.zhat_minus[m + 1], &next.s_minus[m + 1], m + 1);
            let theta = PrecisionPair::new(gammas[m].0, gammas[m + 1].1);
            stage_minimizer(&chain, m + 1, &prev, &cur, theta)?.0
        };
        let alpha_minus = gammas[m].0 / eta[m];
        next.s_minus[m] = &next.s_plus[m] + (&next.zhat_plus[m] - &zhat) * alpha_minus;
        next.zhat_minus[m] = zhat;
    }
    Ok(next)
}

fn stage_minimizer<T: Real>(
    chain: &InferenceChain<'_, T>,
    j: usize,
    prev: &DVector<T>,
    cur: &DVector<T>,
    theta: PrecisionPair<T>,
) -> Result<(DVector<T>, DVector<T>)> {
    let res = chain.stage(j).denoise(prev, cur, theta)?;
    Ok((res.zhat_prev, res.zhat_cur))
}

const FEASIBILITY_TOL: f64 = 1e-9;

fn indicator<T: Real>(residual: &DVector<T>, scale: &DVector<T>) -> T {
    let bound = FEASIBILITY_TOL * (1.0 + scale.amax().as_f64());
    if residual.amax().as_f64() <= bound {
        T::zero()
    } else {
        T::infinity()
    }
}

fn linear_layer<T: Real>(net: &FactoredNetwork<T>, l: usize) -> &LinearLayer<T> {
    net.network()
        .layer(l)
        .as_linear()
        .expect("odd layers are linear")
}

/// Split objective: prior on `z_0^+`, each stage likelihood of `z_j^+` given
/// `z_{j-1}^-` and the observation likelihood of `z_{M-1}^-`, without
/// normalizing constants. Deterministic relations count as 0 or `+inf`.
pub fn split_objective<T: Real>(
    net: &FactoredNetwork<T>,
    z_plus: &[DVector<T>],
    z_minus: &[DVector<T>],
    y: &DVector<T>,
) -> Result<T> {
    let network = net.network();
    let depth = network.depth();
    let m_count = depth - 1;
    if z_plus.len() != m_count || z_minus.len() != m_count {
        return Err(Error::DimensionMismatch {
            layer: 0,
            expected: m_count,
            found: z_plus.len().min(z_minus.len()),
        });
    }
    let half = T::lit(0.5);
    let mut total = half * network.prior().precision * z_plus[0].norm_squared();
    for j in 1..m_count {
        let (zp, zc) = (&z_minus[j - 1], &z_plus[j]);
        total += match network.layer(j) {
            Layer::Linear(lin) => {
                let e = zc - lin.apply(zp);
                match lin.noise_precision {
                    Precision::Finite(nu) => half * nu * e.norm_squared(),
                    Precision::Infinite => indicator(&e, zc),
                }
            }
            Layer::Nonlinear { activation, .. } => {
                indicator(&(zc - zp.map(|v| activation.apply(v))), zc)
            }
        };
    }
    let out = linear_layer(net, depth - 1);
    let e = y - out.apply(&z_minus[m_count - 1]);
    total += match out.noise_precision {
        Precision::Finite(nu) => half * nu * e.norm_squared(),
        Precision::Infinite => indicator(&e, y),
    };
    Ok(total)
}

/// Augmented Lagrangian: split objective plus `eta_m s_m^T (z_m^+ - z_m^-)` and
/// `eta_m / 2 |z_m^+ - z_m^-|^2` over positions.
pub fn lagrangian<T: Real>(
    net: &FactoredNetwork<T>,
    z_plus: &[DVector<T>],
    z_minus: &[DVector<T>],
    s: &[DVector<T>],
    eta: &[T],
    y: &DVector<T>,
) -> Result<T> {
    let mut total = split_objective(net, z_plus, z_minus, y)?;
    for m in 0..z_plus.len() {
        let d = &z_plus[m] - &z_minus[m];
        total += eta[m] * s[m].dot(&d) + T::lit(0.5) * eta[m] * d.norm_squared();
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KktTolerances {
    pub gap: f64,
    pub stationarity: f64,
}

impl Default for KktTolerances {
    fn default() -> Self {
        Self {
            gap: 1e-8,
            stationarity: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KktReport {
    /// `|zhat_plus - zhat_minus| / |zhat_plus|` per position.
    pub primal_gap: Vec<f64>,
    /// `|s_plus - s_minus| / max(1, |s_plus|)` per position.
    pub dual_gap: Vec<f64>,
    /// Stationarity residual of each stage Lagrangian: prior, inner stages, output.
    pub stationarity: Vec<f64>,
    pub passed: bool,
}

impl KktReport {
    pub fn max_primal_gap(&self) -> f64 {
        self.primal_gap.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_dual_gap(&self) -> f64 {
        self.dual_gap.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_stationarity(&self) -> f64 {
        self.stationarity.iter().copied().fold(0.0, f64::max)
    }
}

/// Checks that a fixed-mode state is a critical point of the augmented
/// Lagrangian: split copies agree, duals agree, and every stage Lagrangian is
/// stationary at `(zhat_minus_{j-1}, zhat_plus_j)`.
///
/// ReLU components are tested against the subdifferential of the active branch;
/// components on the kink pass when either one-sided condition holds.
pub fn check_fixed_point<T: Real>(
    net: &FactoredNetwork<T>,
    state: &BeliefState<T>,
    duals: &DualState<T>,
    gammas: &[(T, T)],
    y: &DVector<T>,
    tol: KktTolerances,
) -> Result<KktReport> {
    let network = net.network();
    let depth = network.depth();
    let m_count = depth - 1;
    if gammas.len() != m_count || duals.s_plus.len() != m_count {
        return Err(Error::DimensionMismatch {
            layer: 0,
            expected: m_count,
            found: gammas.len(),
        });
    }
    let zp = &state.zhat_plus;
    let zm = &state.zhat_minus;
    let primal_gap: Vec<f64> = (0..m_count)
        .map(|m| relative_change(&zp[m], &zm[m]))
        .collect();
    let dual_gap: Vec<f64> = (0..m_count)
        .map(|m| {
            let num = (&duals.s_plus[m] - &duals.s_minus[m]).norm().as_f64();
            num / duals.s_plus[m].norm().as_f64().max(1.0)
        })
        .collect();

    let eta = &duals.eta;
    // Gradient of the dual and penalty terms with respect to z_{m}^- (the input of
    // the following stage) and z_m^+ (the output of the producing stage).
    let grad_minus =
        |m: usize| -> DVector<T> { &duals.s_plus[m] * (-eta[m]) + (&zm[m] - &zp[m]) * gammas[m].0 };
    let grad_plus =
        |m: usize| -> DVector<T> { &duals.s_minus[m] * eta[m] + (&zp[m] - &zm[m]) * gammas[m].1 };

    let mut stationarity = Vec::with_capacity(m_count + 1);
    let tau = network.prior().precision;
    stationarity.push((&zp[0] * tau + grad_plus(0)).norm().as_f64());
    for j in 1..m_count {
        let a = grad_minus(j - 1);
        let b = grad_plus(j);
        let (x, z) = (&zm[j - 1], &zp[j]);
        let r = match network.layer(j) {
            Layer::Linear(lin) => linear_residual(lin, x, z, &a, &b),
            Layer::Nonlinear { activation, .. } => activation_residual(*activation, x, z, &a, &b),
        };
        stationarity.push(r);
    }
    let out = linear_layer(net, depth - 1);
    let g = grad_minus(m_count - 1);
    let x = &zm[m_count - 1];
    let r = match out.noise_precision {
        Precision::Finite(nu) => (out.weights.tr_mul(&(y - out.apply(x))) * (-nu) + g)
            .norm()
            .as_f64(),
        Precision::Infinite => {
            constrained_residual(&out.weights, &g, &DVector::zeros(0))
                + (y - out.apply(x)).norm().as_f64()
        }
    };
    stationarity.push(r);

    let passed = primal_gap.iter().all(|&v| v <= tol.gap)
        && dual_gap.iter().all(|&v| v <= tol.gap)
        && stationarity.iter().all(|&v| v <= tol.stationarity);
    Ok(KktReport {
        primal_gap,
        dual_gap,
        stationarity,
        passed,
    })
}

/// Norm of `a + W^T b` projected onto the feasible directions of `z_c = W z_p`.
fn constrained_residual<T: Real>(w: &DMatrix<T>, a: &DVector<T>, b: &DVector<T>) -> f64 {
    if b.is_empty() {
        // Only z_p is free and must keep W z_p fixed: project a onto ker W.
        let svd = w.clone().svd(false, true);
        let v_t = svd.v_t.expect("requested right factor");
        let smax = svd.singular_values.amax();
        let cutoff = T::lit(w.nrows().max(w.ncols()) as f64) * T::default_epsilon() * smax;
        let mut in_range = DVector::zeros(a.len());
        for (i, s) in svd.singular_values.iter().enumerate() {
            if *s > cutoff {
                let row = v_t.row(i).transpose();
                in_range += &row * row.dot(a);
            }
        }
        (a - in_range).norm().as_f64()
    } else {
        (a + w.tr_mul(b)).norm().as_f64()
    }
}

fn linear_residual<T: Real>(
    lin: &LinearLayer<T>,
    x: &DVector<T>,
    z: &DVector<T>,
    a: &DVector<T>,
    b: &DVector<T>,
) -> f64 {
    let e = z - lin.apply(x);
    match lin.noise_precision {
        Precision::Finite(nu) => {
            let gx = lin.weights.tr_mul(&e) * (-nu) + a;
            let gz = &e * nu + b;
            (gx.norm_squared() + gz.norm_squared()).as_f64().sqrt()
        }
        Precision::Infinite => constrained_residual(&lin.weights, a, b) + e.norm().as_f64(),
    }
}

fn activation_residual<T: Real>(
    act: Activation,
    x: &DVector<T>,
    z: &DVector<T>,
    a: &DVector<T>,
    b: &DVector<T>,
) -> f64 {
    let mut sum = 0.0;
    let mut infeasible = 0.0;
    for i in 0..x.len() {
        let (ai, bi) = (a[i].as_f64(), b[i].as_f64());
        let xi = x[i].as_f64();
        infeasible += (z[i].as_f64() - act.apply(xi)).powi(2);
        let r = match act {
            Activation::Identity => ai + bi,
            Activation::Relu => {
                if xi > 0.0 {
                    ai + bi
                } else if xi < 0.0 {
                    ai
                } else {
                    // Local minimum on the kink needs a <= 0 <= a + b.
                    let cone = ai.max(0.0) + (-(ai + bi)).max(0.0);
                    cone.min(ai.abs()).min((ai + bi).abs())
                }
            }
        };
        sum += r * r;
    }
    sum.sqrt() + infeasible.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GaussianPrior, Network};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(rng: &mut ChaCha8Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    fn toy(middle: Activation, seed: u64) -> (FactoredNetwork<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [6usize, 9, 7];
        let mut layers = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            let weights =
                DMatrix::from_fn(w[1], w[0], |_, _| normal(&mut rng) / (w[0] as f64).sqrt());
            let bias = DVector::from_fn(w[1], |_, _| 0.2 * normal(&mut rng));
            let nu = if i == 0 {
                Precision::Infinite
            } else {
                Precision::Finite(5.0)
            };
            let bias = if i == 0 { bias } else { DVector::zeros(w[1]) };
            layers.push(Layer::Linear(LinearLayer::new(weights, bias, nu)));
            let act = if i == 0 { middle } else { Activation::Identity };
            layers.push(Layer::Nonlinear {
                activation: act,
                dim: w[1],
            });
        }
        let net = Network::new(dims[0], GaussianPrior { precision: 1.0 }, layers).unwrap();
        let y = DVector::from_fn(dims[2], |_, _| normal(&mut rng));
        (FactoredNetwork::new(net).unwrap(), y)
    }

    #[test]
    fn fixed_alpha_values() {
        assert_eq!(fixed_alphas(1.0, 1.0), (0.5, 0.5, 2.0));
        assert_eq!(fixed_alphas(3.0, 1.0), (0.25, 0.75, 4.0));
    }

    #[test]
    fn zero_data_stays_at_zero() {
        let (fac, _) = toy(Activation::Relu, 1);
        let gammas = vec![(1.0, 2.0); 3];
        let mut state = ReferenceState::zeros(&[6, 9, 9]);
        let zero_y = DVector::zeros(7);
        // The first linear layer carries a bias, so only the bias-free part is exercised
        // through the observation: zero output noise target and zero messages.
        let net = {
            let mut layers = fac.network().layers().to_vec();
            if let Layer::Linear(l) = &mut layers[0] {
                l.bias.fill(0.0);
            }
            FactoredNetwork::new(Network::new(6, GaussianPrior { precision: 1.0 }, layers).unwrap())
                .unwrap()
        };
        for _ in 0..3 {
            state = admm_step_reference(&state, &net, &zero_y, &gammas).unwrap();
        }
        assert!(state
            .zhat_plus
            .iter()
            .chain(&state.zhat_minus)
            .all(|v| v.amax() == 0.0));
    }

    #[test]
    fn reference_matches_driver_step_by_step() {
        for act in [Activation::Identity, Activation::Relu] {
            let (fac, y) = toy(act, 7);
            let gammas = vec![(0.8, 1.3), (2.0, 0.7), (1.1, 1.9)];
            let trace = fixed_trace(&fac, &y, &gammas, 10).unwrap();
            let mut st = ReferenceState::zeros(&[6, 9, 9]);
            for it in &trace {
                let before = st.clone();
                st = admm_step_reference(&st, &fac, &y, &gammas).unwrap();
                for m in 0..3 {
                    assert!((&st.zhat_plus[m] - &it.zhat_plus[m]).amax() < 1e-10);
                    assert!((&st.zhat_minus[m] - &it.zhat_minus[m]).amax() < 1e-10);
                    assert!((&st.s_plus[m] - &it.s_plus[m]).amax() < 1e-10);
                    assert!((&st.s_minus[m] - &it.s_minus[m]).amax() < 1e-10);
                    let ap = gammas[m].1 / (gammas[m].0 + gammas[m].1);
                    let direct =
                        &before.s_minus[m] + (&st.zhat_plus[m] - &before.zhat_minus[m]) * ap;
                    assert!((direct - &st.s_plus[m]).amax() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn lagrangian_structure() {
        let (fac, y) = toy(Activation::Identity, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z0 = DVector::from_fn(6, |_, _| normal(&mut rng));
        let z: Vec<DVector<f64>> = fac.network().propagate(&z0).unwrap()[..3].to_vec();
        let s: Vec<DVector<f64>> = z
            .iter()
            .map(|v| DVector::from_fn(v.len(), |_, _| normal(&mut rng)))
            .collect();
        let eta = [1.0, 2.0, 3.0];
        let f = split_objective(&fac, &z, &z, &y).unwrap();
        let direct = crate::oracle::direct_objective(fac.network(), &z0, &y);
        assert!((f - direct).abs() < 1e-12 * direct.max(1.0));
        assert_eq!(lagrangian(&fac, &z, &z, &s, &eta, &y).unwrap(), f);

        // Moving only the last reverse copy keeps every relation feasible.
        let mut zm = z.clone();
        zm[2] += DVector::from_fn(9, |_, _| normal(&mut rng));
        let zero: Vec<DVector<f64>> = z.iter().map(|v| DVector::zeros(v.len())).collect();
        let base = lagrangian(&fac, &z, &zm, &zero, &eta, &y).unwrap();
        let l1 = lagrangian(&fac, &z, &zm, &s, &eta, &y).unwrap();
        let s3: Vec<DVector<f64>> = s.iter().map(|v| v * 3.0).collect();
        let l3 = lagrangian(&fac, &z, &zm, &s3, &eta, &y).unwrap();
        assert!(base.is_finite() && l1 != base);
        assert!(((l3 - base) - 3.0 * (l1 - base)).abs() < 1e-9 * l1.abs().max(1.0));

        let bumped = {
            let mut v = z.clone();
            v[1][0] += 1.0;
            v
        };
        assert_eq!(
            split_objective(&fac, &bumped, &z, &y).unwrap(),
            f64::INFINITY
        );
    }
}
