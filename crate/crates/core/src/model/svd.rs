use nalgebra::{DMatrix, DVector, SVD};

use super::network::{Layer, LinearLayer, Network, Precision, Trajectory, Transformed};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Singular-basis form `W = V_out Σ V_in` of a linear layer.
///
/// Only the leading `k = min(rows, cols)` columns of `V_out` and rows of `V_in`
/// are stored. Components outside that block carry a zero singular value and
/// are handled through orthogonal-complement projections, so no square factor
/// is ever formed unless asked for.
#[derive(Clone, Debug)]
pub struct LinearSvd<T: Real> {
    left: DMatrix<T>,
    right: DMatrix<T>,
    sbar: DVector<T>,
    rank: usize,
    bias: DVector<T>,
    bbar_lead: DVector<T>,
    noise_precision: Precision<T>,
}

impl<T: Real> LinearSvd<T> {
    /// Builds the form from known factors: `left` is `rows x k` with orthonormal
    /// columns, `right` is `k x cols` with orthonormal rows and `singular` holds
    /// `k` nonnegative values sorted in descending order.
    pub fn from_factors(
        left: DMatrix<T>,
        singular: DVector<T>,
        right: DMatrix<T>,
        bias: DVector<T>,
        noise_precision: Precision<T>,
    ) -> Result<Self> {
        let rows = left.nrows();
        let cols = right.ncols();
        let k = rows.min(cols);
        if left.ncols() != k || right.nrows() != k || singular.len() != k {
            return Err(Error::InvalidArgument(format!(
                "factor shapes {}x{}, {}, {}x{} do not form a thin decomposition",
                left.nrows(),
                left.ncols(),
                singular.len(),
                right.nrows(),
                right.ncols()
            )));
        }
        if bias.len() != rows {
            return Err(Error::DimensionMismatch {
                layer: 0,
                expected: rows,
                found: bias.len(),
            });
        }
        if singular.iter().any(|s| *s < T::zero())
            || singular.as_slice().windows(2).any(|w| w[1] > w[0])
        {
            return Err(Error::InvalidArgument(
                "singular values must be nonnegative and sorted in descending order".into(),
            ));
        }
        let smax = singular.iter().copied().fold(T::zero(), T::max);
        let tol = T::lit(rows.max(cols) as f64) * T::default_epsilon() * smax;
        let rank = singular.iter().take_while(|s| **s > tol).count();
        let mut sbar = DVector::zeros(rows);
        for n in 0..rank {
            sbar[n] = singular[n];
        }
        let bbar_lead = left.tr_mul(&bias);
        Ok(Self {
            left,
            right,
            sbar,
            rank,
            bias,
            bbar_lead,
            noise_precision,
        })
    }

    pub fn rows(&self) -> usize {
        self.left.nrows()
    }

    pub fn cols(&self) -> usize {
        self.right.ncols()
    }

    /// Size `k = min(rows, cols)` of the stored block.
    pub fn thin_dim(&self) -> usize {
        self.left.ncols()
    }

    /// Zero-padded singular values, one per output coordinate.
    pub fn sbar(&self) -> &DVector<T> {
        &self.sbar
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn noise_precision(&self) -> Precision<T> {
        self.noise_precision
    }

    pub fn bias(&self) -> &DVector<T> {
        &self.bias
    }

    /// Leading `k` entries of the transformed bias `V_out^T b`.
    pub fn bbar_lead(&self) -> &DVector<T> {
        &self.bbar_lead
    }

    /// Leading columns of `V_out`.
    pub fn left(&self) -> &DMatrix<T> {
        &self.left
    }

    /// Leading rows of `V_in`.
    pub fn right(&self) -> &DMatrix<T> {
        &self.right
    }

    /// Singular value of the paired component `n < k` (zero beyond the rank).
    #[inline]
    pub fn singular(&self, n: usize) -> T {
        if n < self.sbar.len() {
            self.sbar[n]
        } else {
            T::zero()
        }
    }

    /// Full orthogonal `V_out` (`rows x rows`).
    pub fn v_out(&self) -> DMatrix<T> {
        complete_columns(&self.left)
    }

    /// Full orthogonal `V_in` (`cols x cols`).
    pub fn v_in(&self) -> DMatrix<T> {
        complete_columns(&self.right.transpose()).transpose()
    }

    /// Full transformed bias `V_out^T b`.
    pub fn bbar(&self) -> DVector<T> {
        self.v_out().tr_mul(&self.bias)
    }

    pub fn weights(&self) -> DMatrix<T> {
        let mut scaled = self.left.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= self.singular(j);
        }
        scaled * &self.right
    }

    /// `V_in x`, leading block only.
    pub fn to_input_basis(&self, x: &DVector<T>) -> DVector<T> {
        &self.right * x
    }

    /// `V_out^T x`, leading block only.
    pub fn to_output_basis(&self, x: &DVector<T>) -> DVector<T> {
        self.left.tr_mul(x)
    }
}

/// Extends orthonormal columns to a square orthogonal matrix whose leading
/// columns are the given ones.
pub fn complete_columns<T: Real>(cols: &DMatrix<T>) -> DMatrix<T> {
    let n = cols.nrows();
    let k = cols.ncols();
    if k == n {
        return cols.clone();
    }
    let qr = cols.clone().qr();
    let mut q_t = DMatrix::<T>::identity(n, n);
    qr.q_tr_mul(&mut q_t);
    let mut full = q_t.transpose();
    full.columns_mut(0, k).copy_from(cols);
    full
}

/// Singular-basis form of a linear layer, singular values sorted descending with
/// ties kept in their original order.
pub fn decompose_linear<T: Real>(layer: &LinearLayer<T>) -> Result<LinearSvd<T>> {
    decompose_indexed(layer, 0)
}

fn decompose_indexed<T: Real>(layer: &LinearLayer<T>, index: usize) -> Result<LinearSvd<T>> {
    let rows = layer.rows();
    let cols = layer.cols();
    let k = rows.min(cols);
    let svd = SVD::try_new(layer.weights.clone(), true, true, T::default_epsilon(), 0)
        .ok_or(Error::Decomposition { layer: index })?;
    let u = svd.u.ok_or(Error::Decomposition { layer: index })?;
    let v_t = svd.v_t.ok_or(Error::Decomposition { layer: index })?;
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap_or(std::cmp::Ordering::Equal));
    let left = DMatrix::from_fn(rows, k, |i, j| u[(i, order[j])]);
    let right = DMatrix::from_fn(k, cols, |i, j| v_t[(order[i], j)]);
    let singular = DVector::from_fn(k, |j, _| s[order[j]].max(T::zero()));
    LinearSvd::from_factors(
        left,
        singular,
        right,
        layer.bias.clone(),
        layer.noise_precision,
    )
}

/// A network together with the singular-basis form of each linear layer.
#[derive(Clone, Debug)]
pub struct FactoredNetwork<T: Real> {
    network: Network<T>,
    factors: Vec<Option<LinearSvd<T>>>,
}

impl<T: Real> FactoredNetwork<T> {
    pub fn new(network: Network<T>) -> Result<Self> {
        let factors = network
            .layers()
            .iter()
            .enumerate()
            .map(|(i, layer)| match layer {
                Layer::Linear(lin) => decompose_indexed(lin, i + 1).map(Some),
                Layer::Nonlinear { .. } => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { network, factors })
    }

    /// Uses precomputed factors where given and decomposes the remaining linear layers.
    pub fn with_factors(network: Network<T>, known: Vec<Option<LinearSvd<T>>>) -> Result<Self> {
        if known.len() != network.depth() {
            return Err(Error::InvalidArgument(format!(
                "expected {} factor slots, got {}",
                network.depth(),
                known.len()
            )));
        }
        let mut factors = Vec::with_capacity(known.len());
        for (i, (layer, given)) in network.layers().iter().zip(known).enumerate() {
            let index = i + 1;
            let f = match (layer, given) {
                (Layer::Linear(lin), Some(svd)) => {
                    if svd.rows() != lin.rows() || svd.cols() != lin.cols() {
                        return Err(Error::DimensionMismatch {
                            layer: index,
                            expected: lin.rows(),
                            found: svd.rows(),
                        });
                    }
                    Some(svd)
                }
                (Layer::Linear(lin), None) => Some(decompose_indexed(lin, index)?),
                (Layer::Nonlinear { .. }, None) => None,
                (Layer::Nonlinear { .. }, Some(_)) => {
                    return Err(Error::InvalidNetwork {
                        layer: index,
                        reason: "factors supplied for a nonlinear layer".into(),
                    })
                }
            };
            factors.push(f);
        }
        Ok(Self { network, factors })
    }

    pub fn network(&self) -> &Network<T> {
        &self.network
    }

    /// Factors of layer `l` (numbered from 1), if it is linear.
    pub fn factor(&self, l: usize) -> Option<&LinearSvd<T>> {
        self.factors.get(l.wrapping_sub(1)).and_then(Option::as_ref)
    }

    pub fn into_network(self) -> Network<T> {
        self.network
    }
}

/// Fills the singular-basis views `p⁰`, `q⁰` of a trajectory.
///
/// Outputs of nonlinear layers (and the input) satisfy `q = z`, `p = V z` with
/// `V` the input factor of the following linear layer; outputs of linear layers
/// satisfy `p = z`, `q = V^T z` with `V` that layer's output factor.
pub fn transform_signals<T: Real>(
    net: &FactoredNetwork<T>,
    trajectory: &Trajectory<T>,
) -> Result<Trajectory<T>> {
    let depth = net.network().depth();
    if trajectory.z.len() != depth + 1 {
        return Err(Error::InvalidArgument(format!(
            "trajectory has {} signals, network needs {}",
            trajectory.z.len(),
            depth + 1
        )));
    }
    let mut p = Vec::with_capacity(depth + 1);
    let mut q = Vec::with_capacity(depth + 1);
    for (l, z) in trajectory.z.iter().enumerate() {
        if l % 2 == 0 {
            q.push(z.clone());
            let next = if l < depth {
                Some(net.factor(l + 1).ok_or(Error::InvalidNetwork {
                    layer: l + 1,
                    reason: "missing factors for linear layer".into(),
                })?)
            } else {
                None
            };
            p.push(match next {
                Some(svd) => svd.v_in() * z,
                None => z.clone(),
            });
        } else {
            let svd = net.factor(l).ok_or(Error::InvalidNetwork {
                layer: l,
                reason: "missing factors for linear layer".into(),
            })?;
            q.push(svd.v_out().tr_mul(z));
            p.push(z.clone());
        }
    }
    Ok(Trajectory {
        z: trajectory.z.clone(),
        transformed: Some(Transformed { p, q }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::network::{forward_sample, Activation, GaussianPrior};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    fn orth_residual(v: &DMatrix<f64>) -> f64 {
        let n = v.nrows();
        (v * v.transpose() - DMatrix::identity(n, n)).abs().max()
    }

    fn layer(w: DMatrix<f64>) -> LinearLayer<f64> {
        let rows = w.nrows();
        LinearLayer::new(w, DVector::zeros(rows), Precision::Infinite)
    }

    #[test]
    fn diagonal_matrix() {
        let w = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0]));
        let svd = decompose_linear(&layer(w)).unwrap();
        assert!((svd.sbar()[0] - 3.0).abs() < 1e-14);
        assert!((svd.sbar()[1] - 1.0).abs() < 1e-14);
        for v in [svd.v_out(), svd.v_in()] {
            for x in v.iter() {
                assert!(x.abs() < 1e-14 || (x.abs() - 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_matrix_has_rank_zero() {
        let svd = decompose_linear(&layer(DMatrix::zeros(2, 3))).unwrap();
        assert_eq!(svd.rank(), 0);
        assert_eq!(svd.sbar().as_slice(), &[0.0, 0.0]);
        assert!(orth_residual(&svd.v_out()) < 1e-12);
        assert!(orth_residual(&svd.v_in()) < 1e-12);
    }

    #[test]
    fn random_reconstruction() {
        let w = gaussian(5, 4, 1);
        let svd = decompose_linear(&layer(w.clone())).unwrap();
        let rec = svd.v_out() * padded_sigma(&svd) * svd.v_in();
        assert!((rec - &w).norm() / w.norm() <= 1e-10);
        assert_eq!(svd.sbar().len(), 5);
        assert_eq!(svd.sbar()[4], 0.0);
    }

    fn padded_sigma(svd: &LinearSvd<f64>) -> DMatrix<f64> {
        let mut sigma = DMatrix::zeros(svd.rows(), svd.cols());
        for n in 0..svd.thin_dim() {
            sigma[(n, n)] = svd.singular(n);
        }
        sigma
    }

    #[test]
    fn ties_keep_column_order() {
        let w = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 2.0, 1.0]));
        let svd = decompose_linear(&layer(w)).unwrap();
        assert_eq!(svd.sbar().as_slice(), &[2.0, 2.0, 1.0]);
    }

    #[test]
    fn large_square_invariants() {
        let w = gaussian(500, 500, 9);
        let svd = decompose_linear(&layer(w.clone())).unwrap();
        assert!(orth_residual(&svd.v_out()) <= 1e-10);
        assert!(orth_residual(&svd.v_in()) <= 1e-10);
        assert!((svd.weights() - &w).norm() / w.norm() <= 1e-10);
    }

    #[test]
    fn rotation_transform() {
        // W = V_out * I with V_out a quarter turn, so q = V_out^T z.
        let rot = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let svd = LinearSvd::from_factors(
            rot.clone(),
            DVector::from_vec(vec![1.0, 1.0]),
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            Precision::Infinite,
        )
        .unwrap();
        let net = Network::new(
            2,
            GaussianPrior { precision: 1.0 },
            vec![
                Layer::Linear(LinearLayer::new(
                    rot,
                    DVector::zeros(2),
                    Precision::Infinite,
                )),
                Layer::Nonlinear {
                    activation: Activation::Identity,
                    dim: 2,
                },
            ],
        )
        .unwrap();
        let fac = FactoredNetwork::with_factors(net, vec![Some(svd), None]).unwrap();
        let traj = Trajectory {
            z: vec![
                DVector::from_vec(vec![0.0f64, 1.0]),
                DVector::from_vec(vec![1.0, 0.0]),
                DVector::from_vec(vec![1.0, 0.0]),
            ],
            transformed: None,
        };
        let t = transform_signals(&fac, &traj).unwrap();
        let q1 = &t.transformed.as_ref().unwrap().q[1];
        assert!((q1[0] - 0.0).abs() < 1e-15 && (q1[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn identity_transform() {
        let net = Network::new(
            2,
            GaussianPrior { precision: 1.0 },
            vec![
                Layer::Linear(LinearLayer::new(
                    DMatrix::identity(2, 2),
                    DVector::zeros(2),
                    Precision::Infinite,
                )),
                Layer::Nonlinear {
                    activation: Activation::Relu,
                    dim: 2,
                },
            ],
        )
        .unwrap();
        let svd = LinearSvd::from_factors(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![1.0, 1.0]),
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            Precision::Infinite,
        )
        .unwrap();
        let fac = FactoredNetwork::with_factors(net, vec![Some(svd), None]).unwrap();
        let traj = forward_sample(fac.network(), &DVector::from_vec(vec![0.3, -0.7]), 0).unwrap();
        let t = transform_signals(&fac, &traj).unwrap();
        let tr = t.transformed.unwrap();
        for l in 0..3 {
            assert_eq!(tr.p[l], traj.z[l]);
            assert_eq!(tr.q[l], traj.z[l]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn reconstruction_and_orthogonality(rows in 1usize..40, cols in 1usize..40, seed in 0u64..1000) {
            let w = gaussian(rows, cols, seed);
            let svd = decompose_linear(&layer(w.clone())).unwrap();
            prop_assert!(orth_residual(&svd.v_out()) <= 1e-10);
            prop_assert!(orth_residual(&svd.v_in()) <= 1e-10);
            let rec = svd.v_out() * padded_sigma(&svd) * svd.v_in();
            prop_assert!((rec - &w).norm() / w.norm() <= 1e-10);
            for n in svd.rank()..rows {
                prop_assert_eq!(svd.sbar()[n], 0.0);
            }
            prop_assert!(svd.sbar().iter().all(|s| *s >= 0.0));
        }

        #[test]
        fn transformed_views_are_consistent(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dims = [3usize, 5, 4];
            let w1 = DMatrix::from_fn(dims[1], dims[0], |_, _| StandardNormal.sample(&mut rng));
            let w2 = DMatrix::from_fn(dims[2], dims[1], |_, _| StandardNormal.sample(&mut rng));
            let b1 = DVector::from_fn(dims[1], |_, _| StandardNormal.sample(&mut rng));
            let net = Network::new(
                dims[0],
                GaussianPrior { precision: 1.0 },
                vec![
                    Layer::Linear(LinearLayer::new(w1, b1, Precision::Infinite)),
                    Layer::Nonlinear { activation: Activation::Relu, dim: dims[1] },
                    Layer::Linear(LinearLayer::new(w2, DVector::zeros(dims[2]), Precision::Finite(10.0))),
                    Layer::Nonlinear { activation: Activation::Identity, dim: dims[2] },
                ],
            ).unwrap();
            let fac = FactoredNetwork::new(net).unwrap();
            let z0: DVector<f64> = DVector::from_fn(dims[0], |_, _| StandardNormal.sample(&mut rng));
            let traj = transform_signals(&fac, &forward_sample(fac.network(), &z0, seed).unwrap()).unwrap();
            let tr = traj.transformed.as_ref().unwrap();
            for l in [1usize, 3] {
                let v = fac.factor(l).unwrap().v_out();
                let back = &v * &tr.q[l];
                prop_assert!((back - &tr.p[l]).norm() <= 1e-10 * tr.p[l].norm().max(1.0));
            }
            for l in [0usize, 2] {
                let v = fac.factor(l + 1).unwrap().v_in();
                prop_assert!((&v * &traj.z[l] - &tr.p[l]).norm() <= 1e-10 * tr.p[l].norm().max(1.0));
                prop_assert_eq!(&tr.q[l], &traj.z[l]);
            }
        }
    }
}
