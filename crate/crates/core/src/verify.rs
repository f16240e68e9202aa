//! Self-check suites behind the `verify` CLI subcommand.
//!
//! The oracles here are deliberately independent of the production code
//! paths they check: eigenpairs come from a cyclic Jacobi sweep instead
//! of power iteration, and the clustering oracle builds the partition
//! from the transitive closure of the core-reachability matrix instead
//! of queue expansion. The clustering suites accept the implementation
//! under test as a parameter so a faulty build can be detected (and
//! injected in tests).

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::clustering::{dbscan, select_radius, ClusteringResult, Point2};
use crate::error::Result;
use crate::generator::{GeneratorHyper, GeneratorModel};
use crate::projection::{project_gradients, variance_captured, GradientMatrix};

/// Outcome of one verification suite.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    pub detail: String,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

// ---------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------

/// Full eigendecomposition of a symmetric matrix by cyclic Jacobi
/// rotations. Returns eigenvalues (descending) and the matching
/// eigenvectors as columns.
pub fn jacobi_eigen(matrix: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = matrix.nrows();
    assert_eq!(n, matrix.ncols(), "jacobi needs a square matrix");
    let mut a = matrix.clone();
    let mut v: Array2<f64> = Array2::eye(n);

    for _sweep in 0..200 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[[p, q]] * a[[p, q]];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].partial_cmp(&a[[i, i]]).expect("finite"));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[[i, i]]).collect();
    let mut vectors = Array2::zeros((n, n));
    for (col, &i) in order.iter().enumerate() {
        vectors.column_mut(col).assign(&v.column(i));
    }
    (eigenvalues, vectors)
}

/// Brute-force density clustering: core flags from the distance matrix,
/// clusters from the transitive closure of core reachability, border
/// points attached to the lowest-index core that reaches them.
pub fn brute_force_dbscan(points: &[Point2], epsilon: f64, min_samples: usize) -> Vec<Option<usize>> {
    let m = points.len();
    let dist = |a: Point2, b: Point2| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();

    let mut within = vec![vec![false; m]; m];
    for i in 0..m {
        for j in 0..m {
            within[i][j] = dist(points[i], points[j]) <= epsilon;
        }
    }
    let core: Vec<bool> = (0..m)
        .map(|i| within[i].iter().filter(|&&w| w).count() >= min_samples)
        .collect();

    // Transitive closure of direct reachability between core points.
    let mut connected = vec![vec![false; m]; m];
    for i in 0..m {
        for j in 0..m {
            connected[i][j] = core[i] && core[j] && within[i][j];
        }
    }
    for k in 0..m {
        if !core[k] {
            continue;
        }
        for i in 0..m {
            if !connected[i][k] {
                continue;
            }
            for j in 0..m {
                if connected[k][j] {
                    connected[i][j] = true;
                }
            }
        }
    }

    let mut labels: Vec<Option<usize>> = vec![None; m];
    let mut next = 0usize;
    for i in 0..m {
        if core[i] && labels[i].is_none() {
            let id = next;
            next += 1;
            labels[i] = Some(id);
            for j in (i + 1)..m {
                if connected[i][j] {
                    labels[j] = Some(id);
                }
            }
        }
    }
    for i in 0..m {
        if core[i] {
            continue;
        }
        for j in 0..m {
            if core[j] && within[i][j] {
                labels[i] = labels[j];
                break;
            }
        }
    }
    labels
}

// ---------------------------------------------------------------------
// Suites
// ---------------------------------------------------------------------

fn random_gradient_matrix(rng: &mut impl Rng, max_n: usize, max_d: usize) -> GradientMatrix {
    let n = rng.random_range(3..=max_n);
    let d = rng.random_range(3..=max_d);
    let data = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
    GradientMatrix::new(data, (0..n as u64).collect()).expect("finite random data")
}

/// Compare top-2 eigenpairs and the variance identity against the Jacobi
/// oracle on random matrices.
pub fn projection_suite(instances: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut failures = 0usize;
    let mut detail = String::new();
    for case in 0..instances {
        let grads = random_gradient_matrix(&mut rng, 20, 12);
        let result = match project_gradients(&grads) {
            Ok(r) => r,
            Err(e) => {
                failures += 1;
                detail = format!("case {case}: projection failed: {e}");
                continue;
            }
        };
        let n = grads.rows();
        let mean = grads.data().mean_axis(Axis(0)).expect("rows");
        let centered = grads.data() - &mean.insert_axis(Axis(0));
        let cov = centered.t().dot(&centered) / (n - 1) as f64;
        let (oracle_vals, oracle_vecs) = jacobi_eigen(&cov);

        let mut ok = true;
        for k in 0..2 {
            if (result.eigenvalues[k] - oracle_vals[k]).abs() > 1e-8 * oracle_vals[0].max(1.0) {
                ok = false;
            }
        }
        // Eigenvector comparison up to sign; skip near-degenerate pairs
        // where the 2D eigenbasis is not unique.
        let gap = (oracle_vals[0] - oracle_vals[1]).abs()
            .min((oracle_vals[1] - oracle_vals.get(2).copied().unwrap_or(f64::NEG_INFINITY)).abs());
        if gap > 1e-6 * oracle_vals[0].max(1.0) {
            for k in 0..2 {
                let ours = result.basis.column(k);
                let oracle = oracle_vecs.column(k);
                let dot = ours.dot(&oracle).abs();
                if (dot - 1.0).abs() > 1e-8 {
                    ok = false;
                }
            }
        }
        // Variance identity: projected column variance equals the
        // eigenvalue.
        for k in 0..2 {
            let col = result.projected.column(k);
            let mu = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1) as f64;
            if (var - result.eigenvalues[k]).abs() > 1e-8 * result.eigenvalues[0].max(1.0) {
                ok = false;
            }
        }
        // Captured fraction within [0,1] and consistent with the oracle.
        match variance_captured(&result, &grads) {
            Ok(cap) => {
                let trace: f64 = oracle_vals.iter().sum();
                let oracle_cap = (oracle_vals[0] + oracle_vals[1]) / trace;
                if (cap - oracle_cap).abs() > 1e-8 {
                    ok = false;
                }
            }
            Err(_) => ok = false,
        }
        if !ok {
            failures += 1;
            detail = format!("case {case}: eigenpair mismatch vs jacobi oracle");
        }
    }
    SuiteReport {
        name: "projection-oracle".into(),
        cases: instances,
        failures,
        detail,
    }
}

fn random_cluster_instance(rng: &mut impl Rng) -> (Vec<Point2>, f64, usize) {
    let blobs = rng.random_range(1..=4usize);
    let mut points = Vec::new();
    for _ in 0..blobs {
        let cx = rng.random_range(-10.0..10.0);
        let cy = rng.random_range(-10.0..10.0);
        let spread = rng.random_range(0.05..0.8);
        let count = rng.random_range(2..=12usize);
        for _ in 0..count {
            points.push([
                cx + spread * rng.sample::<f64, _>(StandardNormal),
                cy + spread * rng.sample::<f64, _>(StandardNormal),
            ]);
        }
    }
    for _ in 0..rng.random_range(0..6usize) {
        points.push([rng.random_range(-15.0..15.0), rng.random_range(-15.0..15.0)]);
    }
    points.truncate(50);
    let epsilon = rng.random_range(0.1..1.5);
    let min_samples = rng.random_range(2..=8usize);
    (points, epsilon, min_samples)
}

/// Partition equality between a clustering implementation and the
/// brute-force reachability oracle on random instances.
pub fn dbscan_suite_with<F>(cluster_fn: F, instances: usize, seed: u64) -> SuiteReport
where
    F: Fn(&[Point2], f64, usize) -> Result<ClusteringResult>,
{
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut failures = 0usize;
    let mut detail = String::new();
    for case in 0..instances {
        let (points, epsilon, min_samples) = random_cluster_instance(&mut rng);
        let ours = match cluster_fn(&points, epsilon, min_samples) {
            Ok(c) => c,
            Err(e) => {
                failures += 1;
                detail = format!("case {case}: clustering failed: {e}");
                continue;
            }
        };
        let oracle = brute_force_dbscan(&points, epsilon, min_samples);
        if ours.labels != oracle {
            failures += 1;
            detail = format!(
                "case {case}: partition mismatch (m={}, eps={epsilon:.3}, min={min_samples})",
                points.len()
            );
        }
    }
    SuiteReport {
        name: "clustering-oracle".into(),
        cases: instances,
        failures,
        detail,
    }
}

/// The production DBSCAN against the oracle.
pub fn dbscan_suite(instances: usize, seed: u64) -> SuiteReport {
    dbscan_suite_with(dbscan, instances, seed)
}

/// Radius selection: rank arithmetic against a direct sort oracle plus
/// the min/max bounds.
pub fn radius_suite(instances: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut failures = 0usize;
    let mut detail = String::new();
    for case in 0..instances {
        let k = rng.random_range(2..=10usize);
        let points: Vec<Point2> = (0..k)
            .map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)])
            .collect();
        let r = rng.random_range(0.01..0.99);
        let sel = match select_radius(&points, r) {
            Ok(s) => s,
            Err(e) => {
                failures += 1;
                detail = format!("case {case}: selection failed: {e}");
                continue;
            }
        };
        let mut oracle: Vec<f64> = Vec::new();
        for i in 0..k {
            for j in (i + 1)..k {
                oracle.push(
                    ((points[i][0] - points[j][0]).powi(2) + (points[i][1] - points[j][1]).powi(2))
                        .sqrt(),
                );
            }
        }
        oracle.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        let rank = ((r * oracle.len() as f64).ceil() as usize).clamp(1, oracle.len());
        let expected = oracle[rank - 1];
        let mut ok = (sel.epsilon - expected).abs() <= 1e-12;
        ok &= sel.epsilon >= oracle[0] - 1e-12 && sel.epsilon <= oracle[oracle.len() - 1] + 1e-12;
        let d_root = ((points[sel.root_pair.0][0] - points[sel.root_pair.1][0]).powi(2)
            + (points[sel.root_pair.0][1] - points[sel.root_pair.1][1]).powi(2))
        .sqrt();
        ok &= (d_root - sel.epsilon).abs() <= 1e-12;
        if !ok {
            failures += 1;
            detail = format!("case {case}: rank/bound mismatch");
        }
    }
    SuiteReport {
        name: "radius-selection".into(),
        cases: instances,
        failures,
        detail,
    }
}

/// Backprop gradients against central finite differences on random tiny
/// models.
pub fn generator_gradient_suite(models: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut failures = 0usize;
    let mut detail = String::new();
    for case in 0..models {
        let mut model = GeneratorModel::new(3, 4, &mut rng).expect("dims valid");
        model.anchor(
            [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            rng.random_range(0.2..1.5),
            3.0,
        );
        let noise = model.sample_noise(6, &mut rng);
        let labels: Vec<bool> = (0..6).map(|_| rng.random::<bool>()).collect();
        let center = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
        let epsilon = rng.random_range(0.3..1.2);
        let hyper = GeneratorHyper {
            tau: 0.25 * epsilon,
            ..GeneratorHyper::default()
        };
        let (_, grads) = match model.loss_and_gradients(&noise, &labels, center, epsilon, &hyper) {
            Ok(v) => v,
            Err(e) => {
                failures += 1;
                detail = format!("case {case}: loss failed: {e}");
                continue;
            }
        };
        let analytic = grads.flatten();
        let params = model.flatten_params();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for idx in 0..params.len() {
            let mut plus = params.clone();
            plus[idx] += h;
            let mut minus = params.clone();
            minus[idx] -= h;
            let mut m_plus = model.clone();
            m_plus.set_params(&plus).expect("same shape");
            let mut m_minus = model.clone();
            m_minus.set_params(&minus).expect("same shape");
            let (rep_p, _) = m_plus
                .loss_and_gradients(&noise, &labels, center, epsilon, &hyper)
                .expect("loss evaluates");
            let (rep_m, _) = m_minus
                .loss_and_gradients(&noise, &labels, center, epsilon, &hyper)
                .expect("loss evaluates");
            let fd = (rep_p.total - rep_m.total) / (2.0 * h);
            let denom = fd.abs().max(analytic[idx].abs()).max(1e-6);
            let rel = (fd - analytic[idx]).abs() / denom;
            worst = worst.max(rel);
        }
        if worst > 1e-4 {
            failures += 1;
            detail = format!("case {case}: worst relative gradient error {worst:.2e}");
        }
    }
    SuiteReport {
        name: "generator-gradients".into(),
        cases: models,
        failures,
        detail,
    }
}

/// Single-step descent: halving the step size at most `max_halvings`
/// times must produce a non-increasing loss on random instances.
pub fn descent_suite(instances: usize, max_halvings: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut failures = 0usize;
    let mut detail = String::new();
    for case in 0..instances {
        let mut model = GeneratorModel::new(4, 6, &mut rng).expect("dims valid");
        model.anchor([0.0, 0.0], rng.random_range(0.3..1.5), 3.0);
        let noise = model.sample_noise(8, &mut rng);
        let labels: Vec<bool> = (0..8).map(|_| rng.random::<bool>()).collect();
        let epsilon = rng.random_range(0.3..1.2);
        let hyper_base = GeneratorHyper {
            tau: 0.25 * epsilon,
            ..GeneratorHyper::default()
        };
        let mut lr = 0.1;
        let mut descended = false;
        for _ in 0..=max_halvings {
            let hyper = GeneratorHyper { lr, ..hyper_base };
            let mut trial = model.clone();
            let before = trial
                .train_step(&noise, &labels, [0.0, 0.0], epsilon, &hyper)
                .expect("train step");
            let (after, _) = trial
                .loss_and_gradients(&noise, &labels, [0.0, 0.0], epsilon, &hyper)
                .expect("loss evaluates");
            if after.total <= before.total + 1e-12 {
                descended = true;
                break;
            }
            lr *= 0.5;
        }
        if !descended {
            failures += 1;
            detail = format!("case {case}: no descent within {max_halvings} halvings");
        }
    }
    SuiteReport {
        name: "generator-descent".into(),
        cases: instances,
        failures,
        detail,
    }
}

/// Every suite at CLI scale.
pub fn run_all(seed: u64) -> Vec<SuiteReport> {
    vec![
        projection_suite(100, seed ^ 0x01),
        dbscan_suite(200, seed ^ 0x02),
        radius_suite(100, seed ^ 0x03),
        generator_gradient_suite(10, seed ^ 0x04),
        descent_suite(25, 20, seed ^ 0x05),
    ]
}
