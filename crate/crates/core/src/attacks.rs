//! Model-poisoning attack constructors, the attacker-side filter
//! simulator, and the per-client dynamic poisoning scheduler.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::clustering::{dbscan, select_radius};
use crate::error::{Error, Result};
use crate::filtering::filter_round_one;
use crate::projection::{check_orthonormal, decompose_against_subspace, project_gradients, GradientMatrix};

/// Reverse and rescale a benign gradient.
pub fn attack_sign_flip(benign: &Array1<f64>, scale: f64) -> Array1<f64> {
    benign * (-scale)
}

/// Rescale the client's own gradient; negative factors give the scaled
/// directional variant used as the recommendation-poisoning stand-in.
pub fn attack_scale(benign: &Array1<f64>, factor: f64) -> Array1<f64> {
    benign * factor
}

/// Sample a crafted gradient from the per-coordinate Gaussian estimated
/// over the visible benign set, with the standard deviation inflated by
/// `std_scale`.
pub fn attack_gaussian(
    benign_set: &Array2<f64>,
    std_scale: f64,
    rng: &mut impl Rng,
) -> Result<Array1<f64>> {
    let (mu, sigma) = column_stats(benign_set)?;
    Ok(Array1::from_shape_fn(mu.len(), |j| {
        let z: f64 = rng.sample(StandardNormal);
        mu[j] + std_scale * sigma[j] * z
    }))
}

/// Shift the benign mean against its own spread: `mu - z * sigma`
/// coordinate-wise (population standard deviation).
pub fn attack_lie(benign_set: &Array2<f64>, z: f64) -> Result<Array1<f64>> {
    let (mu, sigma) = column_stats(benign_set)?;
    Ok(&mu - &(sigma * z))
}

fn column_stats(benign_set: &Array2<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
    let m = benign_set.nrows();
    if m < 2 {
        return Err(Error::InvalidInput("need at least 2 benign gradients".into()));
    }
    let mu = benign_set.mean_axis(Axis(0)).expect("m >= 2");
    let mut var = Array1::<f64>::zeros(benign_set.ncols());
    for row in benign_set.rows() {
        let diff = &row - &mu;
        var = var + diff.mapv(|v| v * v);
    }
    var /= m as f64;
    Ok((mu, var.mapv(f64::sqrt)))
}

/// Push the benign mean as far as possible along `direction` while the
/// crafted gradient's largest distance to any benign gradient stays below
/// the largest benign pairwise distance. The scale is found by doubling
/// to bracket and then `search_iters` bisection halvings.
pub fn attack_min_max(
    benign_set: &Array2<f64>,
    direction: &Array1<f64>,
    search_iters: usize,
) -> Result<Array1<f64>> {
    let m = benign_set.nrows();
    if m < 2 {
        return Err(Error::InvalidInput("need at least 2 benign gradients".into()));
    }
    if direction.len() != benign_set.ncols() {
        return Err(Error::InvalidInput("direction dimension mismatch".into()));
    }
    let dir_norm = direction.dot(direction).sqrt();
    if dir_norm <= 0.0 {
        return Err(Error::InvalidInput("direction must be non-zero".into()));
    }
    let direction = direction / dir_norm;
    let mu = benign_set.mean_axis(Axis(0)).expect("m >= 2");

    let mut max_pairwise: f64 = 0.0;
    for i in 0..m {
        for j in (i + 1)..m {
            let diff = &benign_set.row(i) - &benign_set.row(j);
            max_pairwise = max_pairwise.max(diff.dot(&diff).sqrt());
        }
    }
    let feasible = |scale: f64| -> bool {
        let candidate = &mu + &(&direction * scale);
        (0..m).all(|i| {
            let diff = &candidate - &benign_set.row(i);
            diff.dot(&diff).sqrt() <= max_pairwise
        })
    };

    if !feasible(0.0) {
        // The mean always satisfies the bound for finite inputs; reaching
        // this means the inputs were degenerate.
        return Err(Error::SearchFailed);
    }
    let mut hi = max_pairwise.max(1.0);
    let mut doublings = 0;
    while feasible(hi) && doublings < 60 {
        hi *= 2.0;
        doublings += 1;
    }
    if feasible(hi) {
        return Ok(&mu + &(&direction * hi));
    }
    let mut lo = 0.0f64;
    for _ in 0..search_iters.max(30) {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(&mu + &(&direction * lo))
}

/// An adaptive crafted gradient split into its components: the reference
/// plus an in-plane shift (visible in projection, kept small) and an
/// orthogonal-complement payload (invisible in projection).
#[derive(Debug, Clone)]
pub struct AdaptiveCraft {
    pub gradient: Array1<f64>,
    pub in_plane: Array1<f64>,
    pub orthogonal: Array1<f64>,
}

/// Craft `g_ref + in_plane + orthogonal` where the in-plane part is a
/// random direction inside the span of `basis` scaled to `inplane_mag`
/// and the orthogonal part is a random complement direction scaled to
/// `ortho_mag` with `basis^T * orthogonal` vanishing to within 1e-8
/// relative.
pub fn attack_adaptive_subspace(
    benign_ref: &Array1<f64>,
    basis: &Array2<f64>,
    inplane_mag: f64,
    ortho_mag: f64,
    rng: &mut impl Rng,
) -> Result<AdaptiveCraft> {
    check_orthonormal(basis, 1e-8)?;
    let d = benign_ref.len();
    if basis.nrows() != d {
        return Err(Error::InvalidInput("basis dimension mismatch".into()));
    }

    let angle: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let plane_coords = [angle.cos(), angle.sin()];
    let in_plane = (&basis.column(0) * plane_coords[0] + &basis.column(1) * plane_coords[1])
        * inplane_mag;

    let orthogonal = if ortho_mag > 0.0 {
        let raw = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
        let (_, mut orth) = decompose_against_subspace(&raw, basis)?;
        let norm = orth.dot(&orth).sqrt();
        if norm <= 1e-12 {
            // d = 2: the complement is trivial, no payload possible.
            Array1::zeros(d)
        } else {
            orth /= norm;
            orth * ortho_mag
        }
    } else {
        Array1::zeros(d)
    };

    Ok(AdaptiveCraft {
        gradient: benign_ref + &in_plane + &orthogonal,
        in_plane,
        orthogonal,
    })
}

/// Attacker-side estimate of the server's clustering radius: project the
/// visible gradients and rank the pairwise distances of the reference
/// rows exactly as the server would.
pub fn estimate_epsilon(
    visible: &GradientMatrix,
    reference_rows: &BTreeSet<usize>,
    r: f64,
) -> Result<f64> {
    let projection = project_gradients(visible)?;
    let points = projection.points();
    let known: Vec<_> = reference_rows.iter().map(|&i| points[i]).collect();
    Ok(select_radius(&known, r)?.epsilon)
}

/// Run the round-one projection / radius / clustering / filtering stack
/// on an arbitrary gradient matrix and return the retained row set. This
/// is the attacker's local simulator and doubles as a white-box probe in
/// tests.
pub fn simulate_round_one_filter(
    grads: &GradientMatrix,
    known_rows: &BTreeSet<usize>,
    r: f64,
    gamma: f64,
    min_samples: usize,
) -> Result<BTreeSet<usize>> {
    let projection = project_gradients(grads)?;
    let points = projection.points();
    let known_list: Vec<usize> = known_rows.iter().copied().collect();
    let known_points: Vec<_> = known_list.iter().map(|&i| points[i]).collect();
    let selection = select_radius(&known_points, r)?;
    let root_pair = (
        known_list[selection.root_pair.0],
        known_list[selection.root_pair.1],
    );
    let clustering = dbscan(&points, selection.epsilon, min_samples)?;
    let outcome = filter_round_one(
        &clustering,
        &points,
        known_rows,
        root_pair,
        gamma,
        selection.epsilon,
    )?;
    Ok(outcome.retained)
}

/// Parameters of the adaptive subspace attacker.
#[derive(Debug, Clone, Copy)]
pub struct AdaptiveParams {
    /// In-plane shift as a fraction of the estimated radius (stealth
    /// requires <= 1).
    pub inplane_scale: f64,
    /// Initial orthogonal payload as a multiple of the reference norm.
    pub ortho_scale: f64,
    /// Maximum halvings of the payload while the local simulation keeps
    /// rejecting the crafted gradient.
    pub max_halvings: usize,
}

impl Default for AdaptiveParams {
    fn default() -> Self {
        Self {
            inplane_scale: 0.5,
            ortho_scale: 10.0,
            max_halvings: 20,
        }
    }
}

/// Full adaptive attack: estimate the projection and radius from the
/// visible truthful gradients, pick a reference inside the benign mass,
/// then shrink the orthogonal payload until the crafted gradient passes
/// a locally simulated round-one filter.
pub fn attack_adaptive(
    visible: &GradientMatrix,
    known_rows: &BTreeSet<usize>,
    n_poisoners: usize,
    params: &AdaptiveParams,
    filter_r: f64,
    filter_gamma: f64,
    filter_min_samples: usize,
    rng: &mut impl Rng,
) -> Result<AdaptiveCraft> {
    let projection = project_gradients(visible)?;
    let points = projection.points();
    let known_list: Vec<usize> = known_rows.iter().copied().collect();
    let known_points: Vec<_> = known_list.iter().map(|&i| points[i]).collect();
    let epsilon_est = select_radius(&known_points, filter_r)?.epsilon;

    // Reference: the visible gradient whose projection is closest to the
    // mean of the known-benign projections.
    let mut anchor = [0.0, 0.0];
    for p in &known_points {
        anchor[0] += p[0];
        anchor[1] += p[1];
    }
    anchor[0] /= known_points.len() as f64;
    anchor[1] /= known_points.len() as f64;
    let reference_row = (0..visible.rows())
        .min_by(|&a, &b| {
            let da = (points[a][0] - anchor[0]).powi(2) + (points[a][1] - anchor[1]).powi(2);
            let db = (points[b][0] - anchor[0]).powi(2) + (points[b][1] - anchor[1]).powi(2);
            da.partial_cmp(&db).expect("finite")
        })
        .expect("n >= 1");
    let g_ref = visible.row(reference_row).to_owned();

    let inplane_mag = (params.inplane_scale * epsilon_est).min(epsilon_est);
    let ref_norm = g_ref.dot(&g_ref).sqrt();
    let mut ortho_mag = params.ortho_scale * (ref_norm + 1e-12);

    // Freeze the perturbation directions so halving only changes the
    // magnitude, then bisect the payload against the local simulator.
    let angle: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let ortho_seed = Array1::from_shape_fn(visible.dim(), |_| rng.sample::<f64, _>(StandardNormal));
    let craft_with = |mag: f64| -> Result<AdaptiveCraft> {
        let in_plane = (&projection.basis.column(0) * angle.cos()
            + &projection.basis.column(1) * angle.sin())
            * inplane_mag;
        let orthogonal = if mag > 0.0 {
            let (_, mut orth) = decompose_against_subspace(&ortho_seed, &projection.basis)?;
            let norm = orth.dot(&orth).sqrt();
            if norm <= 1e-12 {
                Array1::zeros(visible.dim())
            } else {
                orth /= norm;
                orth * mag
            }
        } else {
            Array1::zeros(visible.dim())
        };
        Ok(AdaptiveCraft {
            gradient: &g_ref + &in_plane + &orthogonal,
            in_plane,
            orthogonal,
        })
    };

    for _ in 0..=params.max_halvings {
        let craft = craft_with(ortho_mag)?;
        if passes_local_filter(
            visible,
            known_rows,
            &craft.gradient,
            n_poisoners,
            filter_r,
            filter_gamma,
            filter_min_samples,
        ) {
            return Ok(craft);
        }
        ortho_mag *= 0.5;
    }
    craft_with(0.0)
}

fn passes_local_filter(
    visible: &GradientMatrix,
    known_rows: &BTreeSet<usize>,
    candidate: &Array1<f64>,
    n_poisoners: usize,
    r: f64,
    gamma: f64,
    min_samples: usize,
) -> bool {
    let n_vis = visible.rows();
    let copies = n_poisoners.max(1);
    let mut data = Array2::zeros((n_vis + copies, visible.dim()));
    for i in 0..n_vis {
        data.row_mut(i).assign(&visible.row(i));
    }
    for c in 0..copies {
        data.row_mut(n_vis + c).assign(candidate);
    }
    let ids: Vec<u64> = (0..(n_vis + copies) as u64).collect();
    let Ok(sim) = GradientMatrix::new(data, ids) else {
        return false;
    };
    match simulate_round_one_filter(&sim, known_rows, r, gamma, min_samples) {
        Ok(retained) => (n_vis..n_vis + copies).all(|i| retained.contains(&i)),
        Err(_) => false,
    }
}

/// Per-round poisoning decisions for the malicious clients, capped so the
/// poisoning fraction never exceeds the malicious ratio.
#[derive(Debug, Clone)]
pub struct PoisonSchedule {
    pub malicious_ratio: f64,
    /// Sorted malicious client indices.
    pub malicious_ids: Vec<usize>,
    /// `flags[round]` holds the clients poisoning that round.
    pub flags: Vec<BTreeSet<usize>>,
}

impl PoisonSchedule {
    pub fn poisoners(&self, round: usize) -> &BTreeSet<usize> {
        &self.flags[round]
    }
}

/// Independent fair coin flips per malicious client and round, redrawn
/// whenever a round would exceed `floor(malicious_ratio * n)` poisoners.
pub fn schedule_poisoning(
    n_clients: usize,
    malicious_ids: &BTreeSet<usize>,
    malicious_ratio: f64,
    rounds: usize,
    rng: &mut impl Rng,
) -> Result<PoisonSchedule> {
    if !(0.0..=1.0).contains(&malicious_ratio) {
        return Err(Error::InvalidInput("malicious_ratio must be in [0,1]".into()));
    }
    if malicious_ids.len() > n_clients {
        return Err(Error::InvalidInput("more malicious ids than clients".into()));
    }
    let ids: Vec<usize> = malicious_ids.iter().copied().collect();
    let cap = (malicious_ratio * n_clients as f64 + 1e-9).floor() as usize;
    let mut flags = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let mut round_flags: BTreeSet<usize> = BTreeSet::new();
        if cap > 0 && !ids.is_empty() {
            let mut attempts = 0;
            loop {
                round_flags.clear();
                for &id in &ids {
                    if rng.random::<bool>() {
                        round_flags.insert(id);
                    }
                }
                if round_flags.len() <= cap {
                    break;
                }
                attempts += 1;
                if attempts > 10_000 {
                    // Deterministic truncation guard; unreachable when the
                    // malicious count is itself within the cap.
                    while round_flags.len() > cap {
                        let last = *round_flags.iter().next_back().expect("non-empty");
                        round_flags.remove(&last);
                    }
                    break;
                }
            }
        }
        flags.push(round_flags);
    }
    Ok(PoisonSchedule {
        malicious_ratio,
        malicious_ids: ids,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

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
    fn sign_flip_reverses_and_scales() {
        assert_eq!(attack_sign_flip(&array![1.0, -2.0], 1.0), array![-1.0, 2.0]);
        assert_eq!(attack_sign_flip(&array![0.0, 0.0], 3.0), array![0.0, 0.0]);
        assert_eq!(attack_sign_flip(&array![1.0, 0.0], 10.0), array![-10.0, 0.0]);
    }

    #[test]
    fn lie_constant_columns_return_the_constant() {
        let set = array![[2.0, -1.0], [2.0, -1.0], [2.0, -1.0]];
        let out = attack_lie(&set, 1.5).unwrap();
        assert_abs_diff_eq!(out[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn lie_matches_direct_evaluation() {
        // Column {0, 2}: mu = 1, population sigma = 1, z = 1 -> 0.
        let set = array![[0.0, 4.0], [2.0, 4.0]];
        let out = attack_lie(&set, 1.0).unwrap();
        assert_abs_diff_eq!(out[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn lie_larger_z_moves_strictly_down() {
        let set = array![[0.0, 1.0], [2.0, 3.0], [1.0, 5.0]];
        let a = attack_lie(&set, 1.0).unwrap();
        let b = attack_lie(&set, 2.0).unwrap();
        for j in 0..2 {
            assert!(b[j] < a[j]);
        }
    }

    #[test]
    fn min_max_coincident_benign_returns_mean() {
        let set = array![[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]];
        let dir = array![0.0, 1.0];
        let out = attack_min_max(&set, &dir, 40).unwrap();
        assert_abs_diff_eq!(out[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(out[1], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn min_max_matches_closed_form() {
        // Benign at (0,0) and (2,0), direction (0,1): crafted (1, s) needs
        // sqrt(1 + s^2) <= 2, so s* = sqrt(3).
        let set = array![[0.0, 0.0], [2.0, 0.0]];
        let dir = array![0.0, 1.0];
        let out = attack_min_max(&set, &dir, 60).unwrap();
        assert_abs_diff_eq!(out[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(out[1], 3.0f64.sqrt(), epsilon = 1e-6);
    }

    #[test]
    fn min_max_output_stays_feasible_on_random_sets() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        for _ in 0..20 {
            let set = Array2::from_shape_fn((6, 4), |_| rng.sample::<f64, _>(StandardNormal));
            let dir = Array1::from_shape_fn(4, |_| rng.sample::<f64, _>(StandardNormal));
            let out = attack_min_max(&set, &dir, 40).unwrap();
            let mut max_pair: f64 = 0.0;
            for i in 0..6 {
                for j in (i + 1)..6 {
                    let diff = &set.row(i) - &set.row(j);
                    max_pair = max_pair.max(diff.dot(&diff).sqrt());
                }
            }
            for i in 0..6 {
                let diff = &out - &set.row(i);
                assert!(diff.dot(&diff).sqrt() <= max_pair + 1e-6);
            }
            assert!(out.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn adaptive_pure_inplane_shift_moves_projection_by_magnitude() {
        let g = matrix(vec![
            vec![1.0, 0.1, 0.0, 0.3, 0.0],
            vec![0.9, 0.0, 0.2, 0.3, 0.1],
            vec![1.1, 0.2, 0.1, 0.2, 0.0],
            vec![1.0, 0.1, 0.1, 0.4, 0.1],
        ]);
        let proj = project_gradients(&g).unwrap();
        let g_ref = g.row(0).to_owned();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let craft =
            attack_adaptive_subspace(&g_ref, &proj.basis, 0.25, 0.0, &mut rng).unwrap();
        let p_ref = proj.project_vector(&g_ref.view());
        let p_adv = proj.project_vector(&craft.gradient.view());
        let shift =
            ((p_adv[0] - p_ref[0]).powi(2) + (p_adv[1] - p_ref[1]).powi(2)).sqrt();
        assert_abs_diff_eq!(shift, 0.25, epsilon = 1e-10);
        assert_abs_diff_eq!(craft.orthogonal.dot(&craft.orthogonal).sqrt(), 0.0);
    }

    #[test]
    fn adaptive_pure_orthogonal_payload_is_invisible_in_projection() {
        let g = matrix(vec![
            vec![1.0, 0.1, 0.0, 0.3, 0.0, 0.5],
            vec![0.9, 0.0, 0.2, 0.3, 0.1, 0.4],
            vec![1.1, 0.2, 0.1, 0.2, 0.0, 0.6],
            vec![1.0, 0.1, 0.1, 0.4, 0.1, 0.5],
            vec![0.8, 0.3, 0.0, 0.3, 0.2, 0.4],
        ]);
        let proj = project_gradients(&g).unwrap();
        let g_ref = g.row(1).to_owned();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let ortho_mag = 7.5;
        let craft =
            attack_adaptive_subspace(&g_ref, &proj.basis, 0.0, ortho_mag, &mut rng).unwrap();
        let p_ref = proj.project_vector(&g_ref.view());
        let p_adv = proj.project_vector(&craft.gradient.view());
        let shift =
            ((p_adv[0] - p_ref[0]).powi(2) + (p_adv[1] - p_ref[1]).powi(2)).sqrt();
        assert!(shift <= 1e-8);
        // High-dimensional distance carries the payload.
        let diff = &craft.gradient - &g_ref;
        assert_abs_diff_eq!(diff.dot(&diff).sqrt(), ortho_mag, epsilon = 1e-8);
        // Stealth identity.
        let leak = proj.basis.t().dot(&craft.orthogonal);
        assert!(leak.dot(&leak).sqrt() <= 1e-8 * ortho_mag);
    }

    #[test]
    fn schedule_zero_ratio_never_poisons() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let ids: BTreeSet<usize> = [1, 2, 3].into_iter().collect();
        let sched = schedule_poisoning(10, &ids, 0.0, 50, &mut rng).unwrap();
        assert!(sched.flags.iter().all(|f| f.is_empty()));
    }

    #[test]
    fn schedule_full_ratio_is_unconstrained_coin_flips() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let ids: BTreeSet<usize> = (0..8).collect();
        let sched = schedule_poisoning(8, &ids, 1.0, 200, &mut rng).unwrap();
        let total: usize = sched.flags.iter().map(|f| f.len()).sum();
        let mean = total as f64 / (200.0 * 8.0);
        assert!((0.4..0.6).contains(&mean));
    }

    #[test]
    fn schedule_respects_cap_and_long_run_mean() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let ids: BTreeSet<usize> = (0..12).collect();
        let sched = schedule_poisoning(20, &ids, 0.6, 1000, &mut rng).unwrap();
        let mut total = 0usize;
        for f in &sched.flags {
            assert!(f.len() <= 12);
            total += f.len();
        }
        let mean_fraction = total as f64 / (1000.0 * 20.0);
        assert!((0.25..=0.6).contains(&mean_fraction), "mean {mean_fraction}");
    }

    #[test]
    fn schedule_is_reproducible_from_seed() {
        let ids: BTreeSet<usize> = [0, 3, 7].into_iter().collect();
        let a = schedule_poisoning(9, &ids, 0.5, 64, &mut ChaCha20Rng::seed_from_u64(9)).unwrap();
        let b = schedule_poisoning(9, &ids, 0.5, 64, &mut ChaCha20Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.flags, b.flags);
    }
}
