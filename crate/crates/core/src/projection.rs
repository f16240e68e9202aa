//! Dense small-matrix linear algebra: covariance, top-2 eigendecomposition,
//! PCA projection of gradient matrices, and the subspace split used by the
//! adaptive attack.
//!
//! Conventions fixed here and relied on by every downstream module:
//! sample covariance with divisor `n - 1`, gradients centered by the column
//! mean before projecting, eigenvector signs canonicalized so the entry of
//! largest magnitude is positive.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

/// Power-iteration convergence tolerance.
const EIGEN_TOL: f64 = 1e-12;
/// Power-iteration iteration cap.
const EIGEN_MAX_ITERS: usize = 10_000;

/// One round's raw input: `n` client gradients of dimension `d`, with the
/// opaque client identifiers aligned to rows.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMatrix {
    data: Array2<f64>,
    client_ids: Vec<u64>,
}

impl GradientMatrix {
    /// Build a gradient matrix, enforcing `n >= 1`, `d >= 2`, finite
    /// entries and unique client ids.
    pub fn new(data: Array2<f64>, client_ids: Vec<u64>) -> Result<Self> {
        let (n, d) = data.dim();
        if n < 1 {
            return Err(Error::InvalidInput("gradient matrix needs n >= 1 rows".into()));
        }
        if d < 2 {
            return Err(Error::InvalidInput("gradient matrix needs d >= 2 columns".into()));
        }
        if client_ids.len() != n {
            return Err(Error::InvalidInput(format!(
                "client id count {} does not match row count {n}",
                client_ids.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("gradient matrix contains non-finite entries".into()));
        }
        let mut sorted = client_ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != n {
            return Err(Error::InvalidInput("client ids must be unique".into()));
        }
        Ok(Self { data, client_ids })
    }

    /// Rows indexed 0..n-1 with client ids equal to the row index.
    pub fn from_rows(rows: &[Array1<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::InvalidInput("gradient matrix needs n >= 1 rows".into()));
        }
        let d = rows[0].len();
        let mut data = Array2::zeros((n, d));
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(Error::InvalidInput("ragged gradient rows".into()));
            }
            data.row_mut(i).assign(r);
        }
        Self::new(data, (0..n as u64).collect())
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn client_ids(&self) -> &[u64] {
        &self.client_ids
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }

    /// Copy out the given rows (ascending order of `indices` preserved).
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidInput("cannot select zero rows".into()));
        }
        let mut data = Array2::zeros((indices.len(), self.dim()));
        let mut ids = Vec::with_capacity(indices.len());
        for (k, &i) in indices.iter().enumerate() {
            if i >= self.rows() {
                return Err(Error::InvalidInput(format!("row index {i} out of range")));
            }
            data.row_mut(k).assign(&self.data.row(i));
            ids.push(self.client_ids[i]);
        }
        Self::new(data, ids)
    }
}

/// Output of the top-2 PCA projection.
#[derive(Debug, Clone)]
pub struct ProjectionResult {
    /// d×2 matrix with orthonormal columns (principal directions).
    pub basis: Array2<f64>,
    /// Top two covariance eigenvalues, descending.
    pub eigenvalues: [f64; 2],
    /// n×2 projected gradients.
    pub projected: Array2<f64>,
    /// Column mean used for centering.
    pub mean: Array1<f64>,
}

impl ProjectionResult {
    /// Projected rows as plain 2D points.
    pub fn points(&self) -> Vec<[f64; 2]> {
        self.projected
            .rows()
            .into_iter()
            .map(|r| [r[0], r[1]])
            .collect()
    }

    /// Project an arbitrary high-dimensional vector with this result's
    /// centering and basis.
    pub fn project_vector(&self, v: &ArrayView1<'_, f64>) -> [f64; 2] {
        let centered = v - &self.mean;
        let p = centered.dot(&self.basis);
        [p[0], p[1]]
    }
}

/// Flip the sign of each column so that its entry of largest absolute
/// value is positive; ties broken by lowest index.
fn canonicalize_sign(basis: &mut Array2<f64>) {
    for mut col in basis.columns_mut() {
        let mut best = 0usize;
        let mut best_abs = f64::NEG_INFINITY;
        for (i, &v) in col.iter().enumerate() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.mapv_inplace(|v| -v);
        }
    }
}

/// Deterministic start vector for power iteration.
fn start_vector(dim: usize, round: usize) -> Array1<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(0x5eed_0000 + round as u64);
    let mut v: Array1<f64> = Array1::from_iter((0..dim).map(|_| rng.random::<f64>() - 0.5));
    let norm = v.dot(&v).sqrt();
    if norm > 0.0 {
        v /= norm;
    } else {
        v[0] = 1.0;
    }
    v
}

/// Largest eigenpair of a symmetric PSD matrix by power iteration.
/// Returns `None` when the matrix is numerically zero along every probed
/// direction (eigenvalue ~ 0).
fn dominant_eigenpair(m: &Array2<f64>, scale: f64, round: usize) -> Option<(f64, Array1<f64>)> {
    let dim = m.nrows();
    let tiny = scale * 1e-14;
    let mut v = start_vector(dim, round);
    for _ in 0..EIGEN_MAX_ITERS {
        let w = m.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm <= tiny {
            return None;
        }
        let w = w / norm;
        let diff = (&w - &v).mapv(f64::abs).sum();
        let flip = (&w + &v).mapv(f64::abs).sum();
        let converged = diff.min(flip) < EIGEN_TOL;
        v = w;
        if converged {
            break;
        }
    }
    let lambda = v.dot(&m.dot(&v));
    if lambda <= tiny {
        return None;
    }
    Some((lambda, v))
}

/// Deterministic unit vector orthogonal to `u`: pick the standard basis
/// vector with the smallest overlap and Gram-Schmidt it.
fn orthogonal_complement_vector(u: &Array1<f64>) -> Array1<f64> {
    let mut best = 0usize;
    let mut best_abs = f64::INFINITY;
    for (i, &v) in u.iter().enumerate() {
        if v.abs() < best_abs {
            best_abs = v.abs();
            best = i;
        }
    }
    let mut e = Array1::zeros(u.len());
    e[best] = 1.0;
    let mut w: Array1<f64> = &e - &(u * u[best]);
    let norm = w.dot(&w).sqrt();
    w /= norm;
    w
}

/// Top-2 eigenpairs of the sample covariance of `centered` (n×d, divisor
/// n−1). Uses the d×d covariance when d <= n, otherwise the n×n Gram
/// matrix. Eigenvalues are clamped at zero and sorted descending.
fn top_two_eigenpairs(centered: &Array2<f64>, denom: f64) -> Result<([f64; 2], Array2<f64>)> {
    let (n, d) = centered.dim();
    let use_gram = n < d;
    let m = if use_gram {
        centered.dot(&centered.t()) / denom
    } else {
        centered.t().dot(centered) / denom
    };
    let scale = m.diag().sum().max(f64::MIN_POSITIVE);
    if m.diag().sum() <= 0.0 {
        return Err(Error::DegenerateCovariance);
    }

    let mut deflated = m.clone();
    let mut eigenvalues = [0.0f64; 2];
    let mut feature_vecs: Vec<Array1<f64>> = Vec::with_capacity(2);

    for k in 0..2 {
        let pair = dominant_eigenpair(&deflated, scale, k);
        match pair {
            Some((lambda, v)) => {
                eigenvalues[k] = lambda.max(0.0);
                let fv = if use_gram {
                    let mapped = centered.t().dot(&v);
                    let norm = mapped.dot(&mapped).sqrt();
                    if norm <= scale.sqrt() * 1e-12 {
                        // Rank-deficient data: the Gram eigenvector maps to
                        // nothing in feature space; fall back to a
                        // deterministic complement of the first direction.
                        eigenvalues[k] = 0.0;
                        orthogonal_complement_vector(&feature_vecs[0])
                    } else {
                        mapped / norm
                    }
                } else {
                    v.clone()
                };
                // Re-orthogonalize against the first direction; harmless
                // when already orthogonal.
                let fv = if let Some(prev) = feature_vecs.first() {
                    let mut w: Array1<f64> = &fv - &(prev * prev.dot(&fv));
                    let norm = w.dot(&w).sqrt();
                    if norm <= 1e-12 {
                        w = orthogonal_complement_vector(prev);
                    } else {
                        w /= norm;
                    }
                    w
                } else {
                    fv
                };
                feature_vecs.push(fv);
                if k == 0 {
                    let v_col = v.clone().insert_axis(Axis(1));
                    deflated = &deflated - &(v_col.dot(&v_col.t()) * lambda);
                }
            }
            None => {
                if k == 0 {
                    return Err(Error::DegenerateCovariance);
                }
                eigenvalues[k] = 0.0;
                feature_vecs.push(orthogonal_complement_vector(&feature_vecs[0]));
            }
        }
    }

    if eigenvalues[1] > eigenvalues[0] {
        eigenvalues.swap(0, 1);
        feature_vecs.swap(0, 1);
    }

    let mut basis = Array2::zeros((d, 2));
    basis.column_mut(0).assign(&feature_vecs[0]);
    basis.column_mut(1).assign(&feature_vecs[1]);
    canonicalize_sign(&mut basis);
    Ok((eigenvalues, basis))
}

/// Project all gradients onto the top-2 principal directions of their
/// sample covariance.
///
/// Fails with [`Error::DegenerateCovariance`] when all gradients are
/// identical; the caller maps every point to the 2D origin and proceeds.
pub fn project_gradients(grads: &GradientMatrix) -> Result<ProjectionResult> {
    let n = grads.rows();
    if n < 2 {
        return Err(Error::InvalidInput("projection needs n >= 2 gradients".into()));
    }
    let mean = grads
        .data()
        .mean_axis(Axis(0))
        .expect("n >= 2 rows");
    let centered = grads.data() - &mean.clone().insert_axis(Axis(0));
    let denom = (n - 1) as f64;
    let (eigenvalues, basis) = top_two_eigenpairs(&centered, denom)?;
    let projected = centered.dot(&basis);
    Ok(ProjectionResult {
        basis,
        eigenvalues,
        projected,
        mean,
    })
}

/// Fraction of total variance captured by the two principal directions:
/// `(λ1 + λ2) / trace(cov)`, in `[0, 1]`.
pub fn variance_captured(result: &ProjectionResult, grads: &GradientMatrix) -> Result<f64> {
    let n = grads.rows();
    if n < 2 {
        return Err(Error::InvalidInput("variance needs n >= 2 gradients".into()));
    }
    let mean = grads.data().mean_axis(Axis(0)).expect("n >= 2 rows");
    let centered = grads.data() - &mean.insert_axis(Axis(0));
    let total: f64 = centered.iter().map(|v| v * v).sum::<f64>() / (n - 1) as f64;
    if total <= 0.0 {
        return Err(Error::InvalidInput("total variance is zero".into()));
    }
    Ok(((result.eigenvalues[0] + result.eigenvalues[1]) / total).clamp(0.0, 1.0))
}

/// Verify that the columns of `basis` are unit-norm and mutually
/// orthogonal within `tol`.
pub fn check_orthonormal(basis: &Array2<f64>, tol: f64) -> Result<()> {
    let gram = basis.t().dot(basis);
    for i in 0..gram.nrows() {
        for j in 0..gram.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            if (gram[[i, j]] - target).abs() > tol {
                return Err(Error::InvalidInput("basis columns are not orthonormal".into()));
            }
        }
    }
    Ok(())
}

/// Split `v` into its component inside the span of `basis` and the
/// orthogonal remainder. `basis` columns must be orthonormal.
pub fn decompose_against_subspace(
    v: &Array1<f64>,
    basis: &Array2<f64>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    if v.len() != basis.nrows() {
        return Err(Error::InvalidInput("vector/basis dimension mismatch".into()));
    }
    check_orthonormal(basis, 1e-8)?;
    let coords = basis.t().dot(v);
    let in_plane = basis.dot(&coords);
    let mut orthogonal = v - &in_plane;
    // Second projection pass scrubs the last bits of in-plane leakage.
    let resid = basis.t().dot(&orthogonal);
    orthogonal = &orthogonal - &basis.dot(&resid);
    let in_plane = v - &orthogonal;
    Ok((in_plane, orthogonal))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn matrix(rows: Vec<Vec<f64>>) -> GradientMatrix {
        let n = rows.len();
        let d = rows[0].len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        GradientMatrix::new(Array2::from_shape_vec((n, d), flat).unwrap(), (0..n as u64).collect())
            .unwrap()
    }

    #[test]
    fn rejects_non_finite_entries() {
        let data = array![[1.0, f64::NAN], [0.0, 1.0]];
        assert!(matches!(
            GradientMatrix::new(data, vec![0, 1]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn rejects_duplicate_client_ids() {
        let data = array![[1.0, 2.0], [3.0, 4.0]];
        assert!(GradientMatrix::new(data, vec![5, 5]).is_err());
    }

    #[test]
    fn identical_gradients_are_degenerate() {
        let g = matrix(vec![vec![0.1, 0.1, 0.1]; 4]);
        assert!(matches!(project_gradients(&g), Err(Error::DegenerateCovariance)));
    }

    #[test]
    fn planar_data_preserves_pairwise_distances() {
        // Four gradients living exactly in a 2D plane of a d=10 space.
        let d = 10;
        let mut b1 = Array1::zeros(d);
        let mut b2 = Array1::zeros(d);
        for j in 0..d {
            b1[j] = ((j + 1) as f64).sin();
            b2[j] = ((j + 1) as f64 * 0.7).cos();
        }
        let n1 = b1.dot(&b1).sqrt();
        b1 /= n1;
        let b2p: Array1<f64> = &b2 - &(&b1 * b1.dot(&b2));
        let n2 = b2p.dot(&b2p).sqrt();
        let b2 = b2p / n2;

        let coords = [[0.0, 0.0], [1.0, 0.0], [0.5, 2.0], [-1.0, 1.0]];
        let rows: Vec<Array1<f64>> = coords
            .iter()
            .map(|c| &b1 * c[0] + &b2 * c[1])
            .collect();
        let g = GradientMatrix::from_rows(&rows).unwrap();
        let result = project_gradients(&g).unwrap();
        let pts = result.points();
        for i in 0..4 {
            for j in (i + 1)..4 {
                let orig = ((coords[i][0] - coords[j][0]).powi(2)
                    + (coords[i][1] - coords[j][1]).powi(2))
                .sqrt();
                let proj = ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2))
                    .sqrt();
                assert_abs_diff_eq!(orig, proj, epsilon = 1e-9);
            }
        }
        // Rank-2 data: the plane carries all the variance.
        assert_abs_diff_eq!(variance_captured(&result, &g).unwrap(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn basis_is_orthonormal_and_projection_matches_definition() {
        let g = matrix(vec![
            vec![1.0, 0.2, -0.5, 0.0],
            vec![0.3, 1.1, 0.2, -0.2],
            vec![-0.4, 0.5, 0.9, 0.1],
            vec![0.8, -0.3, 0.4, 0.7],
            vec![0.1, 0.9, -0.2, 0.3],
        ]);
        let r = project_gradients(&g).unwrap();
        check_orthonormal(&r.basis, 1e-10).unwrap();
        assert!(r.eigenvalues[0] >= r.eigenvalues[1]);
        assert!(r.eigenvalues[1] >= 0.0);
        for i in 0..g.rows() {
            let expect = r.project_vector(&g.row(i));
            assert_abs_diff_eq!(expect[0], r.projected[[i, 0]], epsilon = 1e-10);
            assert_abs_diff_eq!(expect[1], r.projected[[i, 1]], epsilon = 1e-10);
        }
    }

    #[test]
    fn variance_dominant_direction_lower_bound() {
        // One dominant direction: captured fraction is at least λ1/trace.
        let mut rows = Vec::new();
        for i in 0..8 {
            let t = i as f64 - 3.5;
            rows.push(vec![5.0 * t, 0.01 * (i as f64).sin(), 0.02 * (i as f64).cos(), 0.01 * t]);
        }
        let g = matrix(rows);
        let r = project_gradients(&g).unwrap();
        let mean = g.data().mean_axis(Axis(0)).unwrap();
        let centered = g.data() - &mean.insert_axis(Axis(0));
        let trace: f64 = centered.iter().map(|v| v * v).sum::<f64>() / (g.rows() - 1) as f64;
        let cap = variance_captured(&r, &g).unwrap();
        assert!(cap >= r.eigenvalues[0] / trace - 1e-12);
    }

    #[test]
    fn decompose_recovers_basis_column() {
        let g = matrix(vec![
            vec![1.0, 0.0, 0.0, 0.5, 0.1, 0.0],
            vec![0.0, 1.0, 0.3, 0.0, 0.0, 0.2],
            vec![0.2, 0.1, 1.0, 0.0, 0.4, 0.0],
            vec![0.0, 0.3, 0.0, 1.0, 0.0, 0.1],
        ]);
        let r = project_gradients(&g).unwrap();
        let v = r.basis.column(0).to_owned();
        let (in_plane, orth) = decompose_against_subspace(&v, &r.basis).unwrap();
        assert_abs_diff_eq!((&in_plane - &v).mapv(f64::abs).sum(), 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(orth.mapv(f64::abs).sum(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn decompose_splits_random_vector() {
        let g = matrix(vec![
            vec![1.0, 0.0, 0.1, 0.5, 0.1, 0.0],
            vec![0.0, 1.0, 0.3, 0.0, 0.0, 0.2],
            vec![0.2, 0.1, 1.0, 0.0, 0.4, 0.0],
            vec![0.0, 0.3, 0.0, 1.0, 0.0, 0.1],
            vec![0.7, 0.2, 0.0, 0.3, 1.0, 0.0],
        ]);
        let r = project_gradients(&g).unwrap();
        let v = array![0.3, -1.2, 0.8, 0.05, -0.4, 1.7];
        let (in_plane, orth) = decompose_against_subspace(&v, &r.basis).unwrap();
        let recomposed = &in_plane + &orth;
        assert_abs_diff_eq!((recomposed - &v).mapv(f64::abs).sum(), 0.0, epsilon = 1e-12);
        assert!(in_plane.dot(&orth).abs() <= 1e-10);
        let vnorm = v.dot(&v).sqrt();
        let leak = r.basis.t().dot(&orth);
        assert!(leak.dot(&leak).sqrt() <= 1e-10 * vnorm);
    }

    #[test]
    fn decompose_rejects_skewed_basis() {
        let mut basis = Array2::zeros((4, 2));
        basis[[0, 0]] = 1.0;
        basis[[0, 1]] = 1.0; // not orthogonal
        basis[[1, 1]] = 1.0;
        let v = Array1::ones(4);
        assert!(decompose_against_subspace(&v, &basis).is_err());
    }

    #[test]
    fn translation_leaves_projected_distances_unchanged() {
        let base = vec![
            vec![1.0, 0.2, -0.5, 0.0],
            vec![0.3, 1.1, 0.2, -0.2],
            vec![-0.4, 0.5, 0.9, 0.1],
            vec![0.8, -0.3, 0.4, 0.7],
        ];
        let shifted: Vec<Vec<f64>> = base
            .iter()
            .map(|r| r.iter().zip([10.0, -3.0, 0.5, 7.0]).map(|(v, s)| v + s).collect())
            .collect();
        let p1 = project_gradients(&matrix(base)).unwrap().points();
        let p2 = project_gradients(&matrix(shifted)).unwrap().points();
        for i in 0..4 {
            for j in (i + 1)..4 {
                let d1 = ((p1[i][0] - p1[j][0]).powi(2) + (p1[i][1] - p1[j][1]).powi(2)).sqrt();
                let d2 = ((p2[i][0] - p2[j][0]).powi(2) + (p2[i][1] - p2[j][1]).powi(2)).sqrt();
                assert_abs_diff_eq!(d1, d2, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn rank_one_data_gets_zero_second_eigenvalue() {
        // All rows along one direction; λ2 must be 0 and the basis still
        // orthonormal.
        let dir = vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0, 0.2, -0.7];
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|i| dir.iter().map(|v| v * (i as f64 - 2.0)).collect())
            .collect();
        let g = matrix(rows);
        let r = project_gradients(&g).unwrap();
        check_orthonormal(&r.basis, 1e-10).unwrap();
        assert!(r.eigenvalues[1].abs() < 1e-10 * r.eigenvalues[0].max(1.0));
    }
}
