//! Brute-force reference solvers used to check the closed forms.
//!
//! Everything here is dense, slow and deliberately independent of the
//! singular-basis machinery.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{Activation, Layer, Network, Precision};

const GRID_STEP: f64 = 1e-4;

/// Global minimizer of a 1-D function on `[lo, hi]`: a uniform grid with step
/// `1e-4`, then a golden-section refinement around every grid local minimum.
pub fn grid_minimize(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let n = ((hi - lo) / GRID_STEP).ceil().max(2.0) as usize;
    let xs: Vec<f64> = (0..=n)
        .map(|i| lo + (hi - lo) * i as f64 / n as f64)
        .collect();
    let fs: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
    let mut best = (fs[0], xs[0]);
    for i in 0..=n {
        let left = if i == 0 { f64::INFINITY } else { fs[i - 1] };
        let right = if i == n { f64::INFINITY } else { fs[i + 1] };
        if fs[i] <= left && fs[i] <= right {
            let a = xs[i.saturating_sub(1)];
            let b = xs[(i + 1).min(n)];
            let x = golden_section(&f, a, b);
            for cand in [x, xs[i]] {
                let v = f(cand);
                if v < best.0 {
                    best = (v, cand);
                }
            }
        }
    }
    best.1
}

fn golden_section(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..80 {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Grid-search input estimate for the ReLU pair problem.
pub fn relu_pair_grid(r_prev: f64, r_cur: f64, gamma_prev: f64, gamma_cur: f64) -> f64 {
    let energy = |z: f64| {
        let zc = Activation::Relu.apply(z);
        0.5 * gamma_prev * (z - r_prev).powi(2) + 0.5 * gamma_cur * (zc - r_cur).powi(2)
    };
    let lo = r_prev.min(r_cur).min(0.0) - 1.0;
    let hi = r_prev.max(r_cur).max(0.0) + 1.0;
    grid_minimize(energy, lo, hi)
}

/// Cramer's rule for a 2x2 system.
pub fn solve_2x2(m: [[f64; 2]; 2], rhs: [f64; 2]) -> (f64, f64) {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    (
        (rhs[0] * m[1][1] - m[0][1] * rhs[1]) / det,
        (m[0][0] * rhs[1] - m[1][0] * rhs[0]) / det,
    )
}

/// Dense normal-equations minimizer of
/// `gp/2 |zp - rp|^2 + gc/2 |zc - rc|^2 + nu/2 |zc - W zp - b|^2`;
/// `nu = None` imposes `zc = W zp + b` exactly.
pub fn linear_pair_dense(
    w: &DMatrix<f64>,
    b: &DVector<f64>,
    nu: Option<f64>,
    r_prev: &DVector<f64>,
    r_cur: &DVector<f64>,
    gamma_prev: f64,
    gamma_cur: f64,
) -> (DVector<f64>, DVector<f64>) {
    let (rows, cols) = w.shape();
    match nu {
        Some(nu) => {
            let n = rows + cols;
            let mut h = DMatrix::zeros(n, n);
            let wtw = w.tr_mul(w);
            h.view_mut((0, 0), (cols, cols))
                .copy_from(&(DMatrix::identity(cols, cols) * gamma_prev + wtw * nu));
            h.view_mut((0, cols), (cols, rows))
                .copy_from(&(w.transpose() * -nu));
            h.view_mut((cols, 0), (rows, cols)).copy_from(&(w * -nu));
            h.view_mut((cols, cols), (rows, rows))
                .copy_from(&(DMatrix::identity(rows, rows) * (gamma_cur + nu)));
            let mut rhs = DVector::zeros(n);
            rhs.rows_mut(0, cols)
                .copy_from(&(r_prev * gamma_prev - w.tr_mul(b) * nu));
            rhs.rows_mut(cols, rows)
                .copy_from(&(r_cur * gamma_cur + b * nu));
            let z = h
                .lu()
                .solve(&rhs)
                .expect("normal equations are positive definite");
            (
                z.rows(0, cols).into_owned(),
                z.rows(cols, rows).into_owned(),
            )
        }
        None => {
            let h = DMatrix::identity(cols, cols) * gamma_prev + w.tr_mul(w) * gamma_cur;
            let rhs = r_prev * gamma_prev + w.tr_mul(&(r_cur - b)) * gamma_cur;
            let zp = h
                .lu()
                .solve(&rhs)
                .expect("normal equations are positive definite");
            let zc = w * &zp + b;
            (zp, zc)
        }
    }
}

/// Dense minimizer of `gp/2 |z - r|^2 + nu/2 |y - W z - b|^2`.
pub fn output_dense(
    w: &DMatrix<f64>,
    b: &DVector<f64>,
    nu: f64,
    r_prev: &DVector<f64>,
    y: &DVector<f64>,
    gamma_prev: f64,
) -> DVector<f64> {
    let cols = w.ncols();
    let h = DMatrix::identity(cols, cols) * gamma_prev + w.tr_mul(w) * nu;
    let rhs = r_prev * gamma_prev + w.tr_mul(&(y - b)) * nu;
    h.lu()
        .solve(&rhs)
        .expect("normal equations are positive definite")
}

/// Joint MAP of every hidden signal of a network whose nonlinear layers are all
/// the identity and whose linear layers all have finite noise precision.
///
/// Returns `z_0, ..., z_{L-2}`, the signals an inference run estimates.
pub fn gaussian_map(network: &Network<f64>, y: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
    let depth = network.depth();
    let dims = network.dims();
    // Free blocks: z_0 and the output of every linear layer except the last.
    let blocks: Vec<usize> = (0..depth - 1).step_by(2).map(|l| dims[l]).collect();
    let offsets: Vec<usize> = blocks
        .iter()
        .scan(0, |acc, &d| {
            let o = *acc;
            *acc += d;
            Some(o)
        })
        .collect();
    let n: usize = blocks.iter().sum();
    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    let tau = network.prior().precision;
    for i in 0..blocks[0] {
        h[(i, i)] += tau;
    }
    for (j, l) in (1..=depth).step_by(2).enumerate() {
        let lin = network.layer(l).as_linear().expect("odd layers are linear");
        if network.layer(l + 1).activation() != Some(Activation::Identity) {
            return Err(Error::Unsupported(
                "joint Gaussian oracle needs identity activations".into(),
            ));
        }
        let nu = match lin.noise_precision {
            Precision::Finite(v) => v,
            Precision::Infinite => {
                return Err(Error::Unsupported(
                    "joint Gaussian oracle needs finite noise".into(),
                ))
            }
        };
        // Residual e = out - W in - b, with out either the next block or y.
        let (ri, di) = (offsets[j], blocks[j]);
        let w = &lin.weights;
        let wtw = w.tr_mul(w) * nu;
        let mut hv = h.view_mut((ri, ri), (di, di));
        hv += wtw;
        if l + 1 < depth {
            let (ro, dout) = (offsets[j + 1], blocks[j + 1]);
            for i in 0..dout {
                h[(ro + i, ro + i)] += nu;
            }
            let cross = w * -nu;
            let mut hv = h.view_mut((ro, ri), (dout, di));
            hv += &cross;
            let mut hv = h.view_mut((ri, ro), (di, dout));
            hv += cross.transpose();
            let mut gv = g.rows_mut(ri, di);
            gv -= w.tr_mul(&lin.bias) * nu;
            let mut gv = g.rows_mut(ro, dout);
            gv += &lin.bias * nu;
        } else {
            let mut gv = g.rows_mut(ri, di);
            gv += w.tr_mul(&(y - &lin.bias)) * nu;
        }
    }
    let z = h
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("joint Hessian is not positive definite".into()))?
        .solve(&g);
    let mut out = Vec::with_capacity(depth - 1);
    for (j, (&o, &d)) in offsets.iter().zip(&blocks).enumerate() {
        let block = z.rows(o, d).into_owned();
        if j > 0 {
            out.push(block.clone());
        }
        out.push(block);
    }
    Ok(out)
}

/// Mean central-difference slope `(1/n) sum_i d f_i / d x_i`.
pub fn fd_divergence(f: impl Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>, h: f64) -> f64 {
    let mut sum = 0.0;
    let mut xp = x.clone();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let up = f(&xp)[i];
        xp[i] = x[i] - h;
        let down = f(&xp)[i];
        xp[i] = x[i];
        sum += (up - down) / (2.0 * h);
    }
    sum / x.len() as f64
}

/// Central-difference gradient of a scalar function.
pub fn fd_gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let mut xp = x.clone();
    DVector::from_fn(x.len(), |i, _| {
        xp[i] = x[i] + h;
        let up = f(&xp);
        xp[i] = x[i] - h;
        let down = f(&xp);
        xp[i] = x[i];
        (up - down) / (2.0 * h)
    })
}

/// Negative log posterior of an input under a network whose only noisy layer is
/// the last linear one, evaluated by plain forward propagation.
pub fn direct_objective(network: &Network<f64>, z0: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let signals = network.propagate(z0).expect("input matches the network");
    let depth = network.depth();
    let out = &signals[depth - 1];
    let misfit = match network
        .layer(depth - 1)
        .as_linear()
        .map(|l| l.noise_precision)
    {
        Some(Precision::Finite(nu)) => 0.5 * nu * (y - out).norm_squared(),
        _ => 0.0,
    };
    0.5 * network.prior().precision * z0.norm_squared() + misfit
}

/// Minimizer of the composed objective for identity activations with noiseless
/// hidden layers: a single ridge regression on the collapsed affine map.
pub fn composed_gaussian_map(network: &Network<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let n0 = network.input_dim();
    let mut a = DMatrix::<f64>::identity(n0, n0);
    let mut b = DVector::<f64>::zeros(n0);
    let mut nu = None;
    for layer in network.layers() {
        match layer {
            Layer::Linear(lin) => {
                a = &lin.weights * a;
                b = &lin.weights * b + &lin.bias;
                nu = lin.noise_precision.finite();
            }
            Layer::Nonlinear {
                activation: Activation::Identity,
                ..
            } => {}
            Layer::Nonlinear { .. } => {
                return Err(Error::Unsupported(
                    "composed oracle needs identity activations".into(),
                ));
            }
        }
    }
    let nu =
        nu.ok_or_else(|| Error::Unsupported("composed oracle needs finite output noise".into()))?;
    let tau = network.prior().precision;
    let lhs = a.tr_mul(&a) * nu + DMatrix::identity(n0, n0) * tau;
    let rhs = a.tr_mul(&(y - b)) * nu;
    lhs.cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or(Error::Decomposition { layer: 0 })
}
