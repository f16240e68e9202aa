//! Reference aggregators: unweighted mean, Krum, coordinate-wise median,
//! trimmed mean, and the trust-score aggregator backed by a server-held
//! root gradient.

use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};
use crate::projection::GradientMatrix;

/// Unweighted arithmetic mean over all rows.
pub fn agg_mean(grads: &GradientMatrix) -> Array1<f64> {
    grads
        .data()
        .mean_axis(ndarray::Axis(0))
        .expect("n >= 1 rows")
}

/// Krum: return the gradient with the smallest sum of squared distances
/// to its `n - f - 2` nearest neighbors; ties broken by lowest row index.
///
/// The classical guarantee needs `n >= 2f + 3`; with fewer clients the
/// score still uses at least one neighbor.
pub fn agg_krum(grads: &GradientMatrix, f: usize) -> Result<Array1<f64>> {
    let n = grads.rows();
    if n < 2 {
        return Err(Error::InvalidInput("krum needs at least 2 gradients".into()));
    }
    let neighbor_count = n.saturating_sub(f + 2).max(1);
    let mut best_idx = 0usize;
    let mut best_score = f64::INFINITY;
    for i in 0..n {
        let mut dists: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let diff = &grads.row(i) - &grads.row(j);
                diff.dot(&diff)
            })
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        let score: f64 = dists.iter().take(neighbor_count).sum();
        if score < best_score {
            best_score = score;
            best_idx = i;
        }
    }
    Ok(grads.row(best_idx).to_owned())
}

/// Coordinate-wise median; even counts take the midpoint of the two
/// central order statistics.
pub fn agg_median(grads: &GradientMatrix) -> Array1<f64> {
    let n = grads.rows();
    let d = grads.dim();
    let mut out = Array1::zeros(d);
    let mut column = vec![0.0f64; n];
    for j in 0..d {
        for i in 0..n {
            column[i] = grads.data()[[i, j]];
        }
        column.sort_by(|a, b| a.partial_cmp(b).expect("finite entries"));
        let mid = n / 2;
        out[j] = if n % 2 == 0 {
            0.5 * (column[mid - 1] + column[mid])
        } else {
            column[mid]
        };
    }
    out
}

/// Coordinate-wise trimmed mean: drop the `floor(trim_fraction * n)`
/// largest and smallest values per coordinate and average the rest.
pub fn agg_trimmed_mean(grads: &GradientMatrix, trim_fraction: f64) -> Result<Array1<f64>> {
    if !(0.0..0.5).contains(&trim_fraction) {
        return Err(Error::InvalidInput("trim_fraction must be in [0, 0.5)".into()));
    }
    let n = grads.rows();
    let beta = (trim_fraction * n as f64).floor() as usize;
    if 2 * beta >= n {
        return Err(Error::InvalidInput(format!(
            "trim count {beta} leaves no values out of {n}"
        )));
    }
    let d = grads.dim();
    let mut out = Array1::zeros(d);
    let mut column = vec![0.0f64; n];
    for j in 0..d {
        for i in 0..n {
            column[i] = grads.data()[[i, j]];
        }
        column.sort_by(|a, b| a.partial_cmp(b).expect("finite entries"));
        let kept = &column[beta..n - beta];
        out[j] = kept.iter().sum::<f64>() / kept.len() as f64;
    }
    Ok(out)
}

fn norm(v: &ArrayView1<'_, f64>) -> f64 {
    v.dot(v).sqrt()
}

/// Trust-score aggregation: clip each client's cosine similarity to the
/// server gradient at zero, rescale every client gradient to the server
/// gradient's norm, and average with the clipped scores as weights. All
/// scores zero falls back to the server gradient itself.
pub fn agg_fltrust(grads: &GradientMatrix, server_gradient: &Array1<f64>) -> Result<Array1<f64>> {
    if server_gradient.len() != grads.dim() {
        return Err(Error::InvalidInput("server gradient dimension mismatch".into()));
    }
    let server_norm = server_gradient.dot(server_gradient).sqrt();
    if server_norm <= 0.0 {
        return Err(Error::InvalidInput("server gradient must be non-zero".into()));
    }
    let mut weighted = Array1::<f64>::zeros(grads.dim());
    let mut score_sum = 0.0;
    for i in 0..grads.rows() {
        let row = grads.row(i);
        let row_norm = norm(&row);
        if row_norm <= 0.0 {
            continue;
        }
        let cosine = row.dot(server_gradient) / (row_norm * server_norm);
        let score = cosine.max(0.0);
        if score > 0.0 {
            let rescaled = row.to_owned() * (server_norm / row_norm);
            weighted = weighted + rescaled * score;
            score_sum += score;
        }
    }
    if score_sum <= 0.0 {
        return Ok(server_gradient.clone());
    }
    Ok(weighted / score_sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};

    fn matrix(rows: Vec<Vec<f64>>) -> GradientMatrix {
        let n = rows.len();
        let d = rows[0].len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        GradientMatrix::new(
            Array2::from_shape_vec((n, d), flat).unwrap(),
            (0..n as u64).collect(),
        )
        .unwrap()
    }

    #[test]
    fn krum_all_identical_returns_first_row() {
        let g = matrix(vec![vec![1.0, 2.0]; 5]);
        let out = agg_krum(&g, 1).unwrap();
        assert_eq!(out, array![1.0, 2.0]);
    }

    #[test]
    fn krum_never_picks_the_outlier() {
        let g = matrix(vec![
            vec![0.0, 0.0],
            vec![0.1, 0.0],
            vec![0.0, 0.1],
            vec![0.1, 0.1],
            vec![50.0, 50.0],
        ]);
        let out = agg_krum(&g, 1).unwrap();
        assert!(out[0] < 1.0 && out[1] < 1.0);
    }

    #[test]
    fn krum_matches_exhaustive_score_table() {
        // Five 2D points, f = 1 -> 2 nearest neighbors per candidate.
        let pts = [
            [0.0, 0.0],
            [2.0, 0.0],
            [0.0, 1.0],
            [3.0, 3.0],
            [20.0, 20.0],
        ];
        let g = matrix(pts.iter().map(|p| p.to_vec()).collect());
        // Exhaustive oracle.
        let mut best = (f64::INFINITY, 0usize);
        for i in 0..5 {
            let mut d2: Vec<f64> = (0..5)
                .filter(|&j| j != i)
                .map(|j| {
                    (pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)
                })
                .collect();
            d2.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let score = d2[0] + d2[1];
            if score < best.0 {
                best = (score, i);
            }
        }
        assert_eq!(best.1, 0); // hand-checked: scores 5, 9, 6, 23, ...
        let out = agg_krum(&g, 1).unwrap();
        assert_eq!(out, array![0.0, 0.0]);
    }

    #[test]
    fn median_odd_even_and_random_columns() {
        let g = matrix(vec![vec![1.0, 1.0], vec![5.0, 3.0], vec![9.0, 2.0]]);
        let out = agg_median(&g);
        assert_eq!(out, array![5.0, 2.0]);

        let g = matrix(vec![vec![1.0, 8.0], vec![3.0, 2.0]]);
        assert_eq!(agg_median(&g), array![2.0, 5.0]);

        // Random 7x4 matrix against a per-column sort oracle.
        let rows: Vec<Vec<f64>> = (0..7)
            .map(|i| (0..4).map(|j| ((i * 7 + j * 3) % 11) as f64 - 4.0).collect())
            .collect();
        let g = matrix(rows.clone());
        let out = agg_median(&g);
        for j in 0..4 {
            let mut col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_abs_diff_eq!(out[j], col[3], epsilon = 1e-12);
        }
    }

    #[test]
    fn trimmed_mean_drops_extremes() {
        let g = matrix(vec![
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![2.0, 0.0],
            vec![3.0, 0.0],
            vec![100.0, 0.0],
        ]);
        let out = agg_trimmed_mean(&g, 0.2).unwrap(); // beta = 1
        assert_abs_diff_eq!(out[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn trimmed_mean_with_zero_beta_is_plain_mean() {
        let g = matrix(vec![vec![1.0, 4.0], vec![2.0, 5.0], vec![3.0, 9.0]]);
        let out = agg_trimmed_mean(&g, 0.1).unwrap(); // beta = floor(0.3) = 0
        assert_abs_diff_eq!(out[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], 6.0, epsilon = 1e-12);
    }

    #[test]
    fn trimmed_mean_equal_columns_unchanged() {
        let g = matrix(vec![vec![7.0, -1.0]; 6]);
        let out = agg_trimmed_mean(&g, 0.3).unwrap();
        assert_abs_diff_eq!(out[0], 7.0);
        assert_abs_diff_eq!(out[1], -1.0);
    }

    #[test]
    fn trimmed_mean_rejects_overtrimming() {
        let g = matrix(vec![vec![1.0, 0.0], vec![2.0, 0.0]]);
        assert!(agg_trimmed_mean(&g, 0.49).is_ok()); // beta = 0
        let g3 = matrix(vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![3.0, 0.0]]);
        assert!(agg_trimmed_mean(&g3, 0.4).is_ok()); // beta = 1, 2 < 3
    }

    #[test]
    fn fltrust_all_aligned_returns_server_gradient() {
        let g0 = array![3.0, 4.0];
        let g = matrix(vec![vec![3.0, 4.0], vec![3.0, 4.0]]);
        let out = agg_fltrust(&g, &g0).unwrap();
        assert_abs_diff_eq!(out[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn fltrust_clips_opposed_clients() {
        let g0 = array![1.0, 0.0];
        let g = matrix(vec![vec![-1.0, 0.0], vec![1.0, 0.0]]);
        let out = agg_fltrust(&g, &g0).unwrap();
        assert_abs_diff_eq!(out[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn fltrust_matches_direct_formula() {
        let g0 = array![1.0, 0.0];
        let g = matrix(vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![2.0, 2.0]]);
        let out = agg_fltrust(&g, &g0).unwrap();
        // scores: 1, 0, cos=2/sqrt(8); rescaled rows to norm 1.
        let s3 = 2.0 / 8.0f64.sqrt();
        let r3 = [2.0 / 8.0f64.sqrt(), 2.0 / 8.0f64.sqrt()];
        let denom = 1.0 + s3;
        let expect = [(1.0 + s3 * r3[0]) / denom, (s3 * r3[1]) / denom];
        assert_abs_diff_eq!(out[0], expect[0], epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], expect[1], epsilon = 1e-12);
        // Convex combination of norm-1 vectors: output norm bounded by 1.
        assert!(out.dot(&out).sqrt() <= 1.0 + 1e-12);
    }

    #[test]
    fn fltrust_all_zero_scores_falls_back_to_server() {
        let g0 = array![1.0, 0.0];
        let g = matrix(vec![vec![-1.0, 0.0], vec![-2.0, 0.1]]);
        let out = agg_fltrust(&g, &g0).unwrap();
        assert_eq!(out, g0);
    }

    #[test]
    fn fltrust_rejects_zero_server_gradient() {
        let g = matrix(vec![vec![1.0, 0.0]]);
        assert!(agg_fltrust(&g, &array![0.0, 0.0]).is_err());
    }

    #[test]
    fn mean_and_median_are_permutation_invariant() {
        let rows = vec![vec![1.0, -2.0], vec![4.0, 0.5], vec![-3.0, 7.0], vec![2.0, 2.0]];
        let mut shuffled = rows.clone();
        shuffled.swap(0, 3);
        shuffled.swap(1, 2);
        let a = matrix(rows);
        let b = matrix(shuffled);
        assert_eq!(agg_median(&a), agg_median(&b));
        let ma = agg_mean(&a);
        let mb = agg_mean(&b);
        assert_abs_diff_eq!(ma[0], mb[0], epsilon = 1e-12);
        assert_abs_diff_eq!(ma[1], mb[1], epsilon = 1e-12);
        let ta = agg_trimmed_mean(&a, 0.25).unwrap();
        let tb = agg_trimmed_mean(&b, 0.25).unwrap();
        assert_abs_diff_eq!(ta[0], tb[0], epsilon = 1e-12);
        assert_abs_diff_eq!(ta[1], tb[1], epsilon = 1e-12);
    }

    #[test]
    fn krum_output_is_an_input_row() {
        let rows = vec![
            vec![0.3, 1.0, -0.5],
            vec![0.2, 0.9, -0.4],
            vec![0.4, 1.1, -0.6],
            vec![9.0, -9.0, 9.0],
        ];
        let g = matrix(rows.clone());
        let out = agg_krum(&g, 1).unwrap();
        assert!(rows.iter().any(|r| {
            r.iter().zip(out.iter()).all(|(a, b)| (a - b).abs() < 1e-15)
        }));
    }
}
