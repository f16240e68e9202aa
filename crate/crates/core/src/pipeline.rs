//! One full aggregation round: project, select the radius, cluster,
//! filter, re-project the survivors, pad the benign boundary with
//! pseudo-gradients, re-cluster, and average the surviving
//! high-dimensional gradients.
//!
//! Every failure after input validation degrades to the known-benign
//! fallback instead of aborting: the server must emit an update each
//! round.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::clustering::{dbscan, select_radius, Point2};
use crate::error::{Error, Result};
use crate::filtering::{apply_density_constraint, filter_round_one, identify_benign_cluster};
use crate::generator::{GeneratorHyper, GeneratorLossReport, GeneratorModel};
use crate::projection::{project_gradients, GradientMatrix, ProjectionResult};
use crate::seeding::{derive_rng, tag};

/// Tunables of the aggregation rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnCAggParams {
    /// DBSCAN core threshold.
    pub min_samples: usize,
    /// Radius rank coefficient in (0,1).
    pub r: f64,
    /// Density-constraint multiplier.
    pub gamma: f64,
    /// Pseudo-gradients per round.
    pub n_gen: usize,
    /// Spread-loss dispersion target as a multiple of the radius.
    pub tau_scale: f64,
    /// Remaining generator hyper-parameters (`tau` is overwritten per
    /// round with `tau_scale * epsilon`).
    pub generator: GeneratorHyper,
}

impl Default for EnCAggParams {
    fn default() -> Self {
        Self {
            min_samples: 5,
            r: 0.2,
            gamma: 3.0,
            n_gen: 100,
            tau_scale: 0.25,
            generator: GeneratorHyper::default(),
        }
    }
}

/// Where the round's pseudo-gradients come from.
pub enum PseudoSource<'a> {
    /// Anchor, sample and train the persistent generator.
    Generator(&'a mut GeneratorModel),
    /// Inject fixed 2D points (test double); no training happens.
    Fixed(Vec<Point2>),
    /// No pseudo-gradients at all (ablation).
    Disabled,
}

/// Per-round audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round_index: usize,
    /// Survivors of the first filtering pass.
    pub retained_round1: BTreeSet<usize>,
    /// Client indices whose gradients entered the final average.
    pub final_benign: BTreeSet<usize>,
    pub benign_label_r1: Option<usize>,
    pub benign_label_r2: Option<usize>,
    pub epsilon: f64,
    /// True when the round aggregated the known-benign set instead of a
    /// clustered selection.
    pub fallback_used: bool,
    /// Why the fallback fired, when it did.
    pub fallback_reason: Option<String>,
    /// Pseudo-gradients that landed inside the round-2 benign cluster.
    pub pseudo_in_benign: usize,
    pub generator_losses: Option<GeneratorLossReport>,
    /// Filled in by the harness when ground truth is available.
    pub filter_precision: Option<f64>,
    pub filter_recall: Option<f64>,
    pub aggregated_norm: f64,
}

impl RoundRecord {
    fn fallback(known_benign: &BTreeSet<usize>, epsilon: f64, reason: String) -> Self {
        Self {
            round_index: 0,
            retained_round1: BTreeSet::new(),
            final_benign: known_benign.clone(),
            benign_label_r1: None,
            benign_label_r2: None,
            epsilon,
            fallback_used: true,
            fallback_reason: Some(reason),
            pseudo_in_benign: 0,
            generator_losses: None,
            filter_precision: None,
            filter_recall: None,
            aggregated_norm: 0.0,
        }
    }
}

/// Unweighted average over the selected high-dimensional gradients.
pub fn aggregate_mean(selected: &BTreeSet<usize>, grads: &GradientMatrix) -> Result<Array1<f64>> {
    if selected.is_empty() {
        return Err(Error::EmptySelection);
    }
    let mut sum = Array1::<f64>::zeros(grads.dim());
    for &i in selected {
        if i >= grads.rows() {
            return Err(Error::InvalidInput(format!("selected index {i} out of range")));
        }
        sum = sum + grads.row(i);
    }
    Ok(sum / selected.len() as f64)
}

/// Gradient-descent update of the global model.
pub fn apply_global_update(
    weights: &Array1<f64>,
    aggregated: &Array1<f64>,
    eta: f64,
) -> Result<Array1<f64>> {
    if eta <= 0.0 {
        return Err(Error::InvalidInput("eta must be positive".into()));
    }
    if weights.len() != aggregated.len() {
        return Err(Error::InvalidInput("weight/update dimension mismatch".into()));
    }
    Ok(weights - &(aggregated * eta))
}

/// Either a real projection or the degenerate all-identical case where
/// every point maps to the origin.
enum RoundProjection {
    Full(ProjectionResult),
    Degenerate { rows: usize },
}

impl RoundProjection {
    fn points(&self) -> Vec<Point2> {
        match self {
            RoundProjection::Full(p) => p.points(),
            RoundProjection::Degenerate { rows } => vec![[0.0, 0.0]; *rows],
        }
    }

    fn project_row(&self, row: &ndarray::ArrayView1<'_, f64>) -> Point2 {
        match self {
            RoundProjection::Full(p) => p.project_vector(row),
            RoundProjection::Degenerate { .. } => [0.0, 0.0],
        }
    }
}

fn project_or_origin(grads: &GradientMatrix) -> Result<RoundProjection> {
    match project_gradients(grads) {
        Ok(p) => Ok(RoundProjection::Full(p)),
        Err(Error::DegenerateCovariance) => Ok(RoundProjection::Degenerate { rows: grads.rows() }),
        Err(e) => Err(e),
    }
}

/// Run one aggregation round with the persistent generator.
pub fn run_round(
    grads: &GradientMatrix,
    known_benign: &BTreeSet<usize>,
    params: &EnCAggParams,
    generator: &mut GeneratorModel,
    seed: u64,
) -> Result<(Array1<f64>, RoundRecord)> {
    run_round_with(grads, known_benign, params, PseudoSource::Generator(generator), seed)
}

/// Run one aggregation round with an explicit pseudo-gradient source.
pub fn run_round_with(
    grads: &GradientMatrix,
    known_benign: &BTreeSet<usize>,
    params: &EnCAggParams,
    pseudo: PseudoSource<'_>,
    seed: u64,
) -> Result<(Array1<f64>, RoundRecord)> {
    let n = grads.rows();
    if known_benign.len() < 2 || known_benign.len() > n {
        return Err(Error::InvalidInput(
            "known-benign set must hold between 2 and n clients".into(),
        ));
    }
    if let Some(&bad) = known_benign.iter().find(|&&i| i >= n) {
        return Err(Error::InvalidInput(format!("known-benign index {bad} out of range")));
    }
    if !(params.r > 0.0 && params.r < 1.0) {
        return Err(Error::Config("r must be in (0,1)".into()));
    }
    if params.gamma <= 0.0 {
        return Err(Error::Config("gamma must be positive".into()));
    }

    match round_inner(grads, known_benign, params, pseudo, seed) {
        Ok(done) => Ok(done),
        Err(e) => {
            // Containment: aggregate the known-benign set instead.
            let aggregated = aggregate_mean(known_benign, grads)?;
            let mut record = RoundRecord::fallback(known_benign, 0.0, e.to_string());
            record.aggregated_norm = aggregated.dot(&aggregated).sqrt();
            Ok((aggregated, record))
        }
    }
}

fn round_inner(
    grads: &GradientMatrix,
    known_benign: &BTreeSet<usize>,
    params: &EnCAggParams,
    pseudo: PseudoSource<'_>,
    seed: u64,
) -> Result<(Array1<f64>, RoundRecord)> {
    // 1. Project all gradients.
    let projection = project_or_origin(grads)?;
    let points = projection.points();

    // 2. Radius from known-benign pairwise distances.
    let known_list: Vec<usize> = known_benign.iter().copied().collect();
    let known_points: Vec<Point2> = known_list.iter().map(|&i| points[i]).collect();
    let selection = select_radius(&known_points, params.r)?;
    let epsilon = selection.epsilon;
    let root_pair = (
        known_list[selection.root_pair.0],
        known_list[selection.root_pair.1],
    );

    // 3. First clustering.
    let clustering = dbscan(&points, epsilon, params.min_samples)?;

    // 4. First filtering pass.
    let outcome = filter_round_one(
        &clustering,
        &points,
        known_benign,
        root_pair,
        params.gamma,
        epsilon,
    )?;
    let retained: Vec<usize> = outcome.retained.iter().copied().collect();

    // Too few survivors for a second clustering pass.
    if retained.len() < params.min_samples.max(2) {
        let aggregated = aggregate_mean(known_benign, grads)?;
        let mut record = RoundRecord::fallback(
            known_benign,
            epsilon,
            format!("round-1 retained only {} gradients", retained.len()),
        );
        record.retained_round1 = outcome.retained.clone();
        record.benign_label_r1 = outcome.benign_label;
        record.aggregated_norm = aggregated.dot(&aggregated).sqrt();
        return Ok((aggregated, record));
    }

    // 5. Fresh projection of the retained high-dimensional gradients.
    let retained_matrix = grads.select_rows(&retained)?;
    let reprojection = project_or_origin(&retained_matrix)?;
    let retained_points = reprojection.points();

    // 6. Benign anchor in the new projection: mean over the re-projected
    // round-1 benign members, or over all survivors when that set is
    // empty.
    let anchor_members: Vec<usize> = if outcome.benign_core.is_empty() {
        (0..retained.len()).collect()
    } else {
        retained
            .iter()
            .enumerate()
            .filter(|(_, ci)| outcome.benign_core.contains(ci))
            .map(|(pos, _)| pos)
            .collect()
    };
    let mut anchor = [0.0, 0.0];
    for &pos in &anchor_members {
        anchor[0] += retained_points[pos][0];
        anchor[1] += retained_points[pos][1];
    }
    anchor[0] /= anchor_members.len() as f64;
    anchor[1] /= anchor_members.len() as f64;

    // 7. Pseudo-gradients.
    let mut trained_generator: Option<&mut GeneratorModel> = None;
    let mut source_noise: Option<Array2<f64>> = None;
    let pseudo_points: Vec<Point2> = match pseudo {
        PseudoSource::Generator(model) => {
            model.anchor(anchor, epsilon, params.gamma);
            let mut rng = derive_rng(seed, &[tag::ROUND_NOISE]);
            let noise = model.sample_noise(params.n_gen.max(1), &mut rng);
            let batch = model.generate(&noise)?;
            source_noise = Some(noise);
            trained_generator = Some(model);
            batch.points
        }
        PseudoSource::Fixed(points) => points,
        PseudoSource::Disabled => Vec::new(),
    };

    // 8. Second clustering over real survivors plus pseudo-gradients.
    let n_real = retained_points.len();
    let mut combined = retained_points.clone();
    combined.extend(pseudo_points.iter().copied());
    let reclustering = dbscan(&combined, epsilon, params.min_samples)?;

    // Root clients always survive round one; find their positions.
    let root_positions = (
        retained.iter().position(|&c| c == root_pair.0),
        retained.iter().position(|&c| c == root_pair.1),
    );
    let (Some(r0), Some(r1)) = root_positions else {
        return Err(Error::InvalidInput("root clients missing from retained set".into()));
    };

    let (benign_label_r2, fallback_r2) =
        identify_benign_cluster(&reclustering, (r0, r1), (combined[r0], combined[r1]))?;

    // Generator labels: did each pseudo-gradient join the benign cluster?
    let labels: Vec<bool> = (0..pseudo_points.len())
        .map(|j| match benign_label_r2 {
            Some(id) => reclustering.labels[n_real + j] == Some(id),
            None => false,
        })
        .collect();
    let pseudo_in_benign = labels.iter().filter(|&&b| b).count();

    // 9/10. Final benign set: real members of the round-2 benign cluster,
    // re-screened by the density constraint against the re-projected
    // known-benign gradients; fall back to the known set when no cluster
    // was identified or nothing survives.
    let known_reprojected: Vec<Point2> = known_list
        .iter()
        .map(|&i| reprojection.project_row(&grads.row(i)))
        .collect();

    let final_result: Option<BTreeSet<usize>> = benign_label_r2.map(|id| {
        let real_members: BTreeSet<usize> = reclustering.clusters[id]
            .iter()
            .copied()
            .filter(|&p| p < n_real)
            .collect();
        // Density screen in the re-projected plane: member positions vs
        // the re-projected known points.
        let mut screen_points = combined.clone();
        let known_offset = screen_points.len();
        screen_points.extend(known_reprojected.iter().copied());
        let known_positions: BTreeSet<usize> =
            (known_offset..known_offset + known_reprojected.len()).collect();
        let kept = apply_density_constraint(
            &real_members,
            &screen_points,
            &known_positions,
            params.gamma,
            epsilon,
        );
        kept.into_iter().map(|pos| retained[pos]).collect()
    });

    let (aggregated, final_benign, fallback_used, fallback_reason) = match final_result {
        Some(set) if !set.is_empty() => {
            let agg = aggregate_mean(&set, grads)?;
            (agg, set, false, None)
        }
        Some(_) => {
            let agg = aggregate_mean(known_benign, grads)?;
            (
                agg,
                known_benign.clone(),
                true,
                Some("round-2 benign cluster empty after density screen".to_string()),
            )
        }
        None => {
            debug_assert!(fallback_r2);
            let agg = aggregate_mean(known_benign, grads)?;
            (
                agg,
                known_benign.clone(),
                true,
                Some("round-2 roots in noise with at most one cluster".to_string()),
            )
        }
    };

    // 11. One generator step on this round's labels.
    let generator_losses = match (trained_generator, source_noise) {
        (Some(model), Some(noise)) => {
            let hyper = GeneratorHyper {
                tau: (params.tau_scale * epsilon).max(1e-12),
                ..params.generator
            };
            Some(model.train_step(&noise, &labels, anchor, epsilon, &hyper)?)
        }
        _ => None,
    };

    let record = RoundRecord {
        round_index: 0,
        retained_round1: outcome.retained,
        final_benign,
        benign_label_r1: outcome.benign_label,
        benign_label_r2,
        epsilon,
        fallback_used,
        fallback_reason,
        pseudo_in_benign,
        generator_losses,
        filter_precision: None,
        filter_recall: None,
        aggregated_norm: aggregated.dot(&aggregated).sqrt(),
    };
    Ok((aggregated, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;
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

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    /// Tight benign cloud in d dimensions with client 0..n-1.
    fn benign_cloud(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                (0..d)
                    .map(|j| if j == 0 { 1.0 } else { 0.1 } + 0.05 * (rng.random::<f64>() - 0.5))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn aggregate_mean_examples() {
        let g = matrix(vec![vec![1.0, 1.0, 1.0], vec![3.0, 3.0, 3.0]]);
        let out = aggregate_mean(&set(&[0, 1]), &g).unwrap();
        assert_eq!(out, array![2.0, 2.0, 2.0]);
        let solo = aggregate_mean(&set(&[1]), &g).unwrap();
        assert_eq!(solo, array![3.0, 3.0, 3.0]);
        assert!(matches!(
            aggregate_mean(&BTreeSet::new(), &g),
            Err(Error::EmptySelection)
        ));
    }

    #[test]
    fn aggregate_mean_matches_direct_sum() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let rows: Vec<Vec<f64>> = (0..7)
            .map(|_| (0..5).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect())
            .collect();
        let g = matrix(rows.clone());
        let out = aggregate_mean(&(0..7).collect(), &g).unwrap();
        for j in 0..5 {
            let direct: f64 = rows.iter().map(|r| r[j]).sum::<f64>() / 7.0;
            assert_abs_diff_eq!(out[j], direct, epsilon = 1e-12);
        }
    }

    #[test]
    fn global_update_examples() {
        let w = array![1.0, 1.0];
        let zero = array![0.0, 0.0];
        assert_eq!(apply_global_update(&w, &zero, 0.5).unwrap(), w);
        let g = array![1.0, -1.0];
        let next = apply_global_update(&w, &g, 0.5).unwrap();
        assert_eq!(next, array![0.5, 1.5]);
        assert!(apply_global_update(&w, &g, 0.0).is_err());
    }

    #[test]
    fn fidelity_round_keeps_known_benign_and_averages_retained() {
        let rows = benign_cloud(20, 8, 42);
        let g = matrix(rows);
        let known = set(&[0, 1, 2, 3]);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut generator = GeneratorModel::new(8, 16, &mut rng).unwrap();
        let params = EnCAggParams::default();
        let (aggregated, record) =
            run_round(&g, &known, &params, &mut generator, 7).unwrap();
        assert!(!record.fallback_used, "reason: {:?}", record.fallback_reason);
        for k in &known {
            assert!(record.final_benign.contains(k));
        }
        let expect = aggregate_mean(&record.final_benign, &g).unwrap();
        for j in 0..8 {
            assert_abs_diff_eq!(aggregated[j], expect[j], epsilon = 1e-12);
        }
    }

    #[test]
    fn far_scaled_attackers_never_enter_final_benign() {
        // 12 of 20 malicious at 10x benign norm in a far direction, over
        // 50 seeded trials.
        for trial in 0..50u64 {
            let mut rows = benign_cloud(8, 8, 100 + trial);
            let mut rng = ChaCha20Rng::seed_from_u64(500 + trial);
            for _ in 0..12 {
                let mut mal = vec![0.0; 8];
                // last-coordinate direction, 10x typical norm, tight blob
                mal[7] = 10.0;
                for v in mal.iter_mut() {
                    *v += 0.001 * (rng.random::<f64>() - 0.5);
                }
                rows.push(mal);
            }
            let g = matrix(rows);
            let known = set(&[0, 1, 2, 3]);
            let mut generator = GeneratorModel::new(8, 16, &mut rng).unwrap();
            let (_, record) =
                run_round(&g, &known, &EnCAggParams::default(), &mut generator, trial).unwrap();
            for mal_idx in 8..20 {
                assert!(
                    !record.final_benign.contains(&mal_idx),
                    "trial {trial} admitted malicious {mal_idx}"
                );
            }
        }
    }

    #[test]
    fn pseudo_gradients_never_reach_aggregation() {
        let rows = benign_cloud(15, 6, 9);
        let g = matrix(rows);
        let known = set(&[0, 1, 2]);
        // Inject fixed pseudo points right on top of the benign cluster;
        // final_benign must still only list real client indices.
        let pseudo = vec![[0.0, 0.0]; 30];
        let (_, record) = run_round_with(
            &g,
            &known,
            &EnCAggParams { min_samples: 4, ..Default::default() },
            PseudoSource::Fixed(pseudo),
            3,
        )
        .unwrap();
        assert!(record.final_benign.iter().all(|&i| i < 15));
        assert!(record.pseudo_in_benign > 0);
    }

    #[test]
    fn identical_gradients_degenerate_to_single_cluster_round() {
        let g = matrix(vec![vec![0.5, -0.25, 1.0]; 12]);
        let known = set(&[0, 1]);
        let (aggregated, record) = run_round_with(
            &g,
            &known,
            &EnCAggParams::default(),
            PseudoSource::Disabled,
            11,
        )
        .unwrap();
        assert!(!record.fallback_used);
        assert_eq!(record.final_benign.len(), 12);
        assert_abs_diff_eq!(aggregated[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn fallback_aggregates_known_benign_exactly() {
        // Force the degenerate branch with too few survivors: scattered
        // singletons and min_samples high.
        let mut rows = Vec::new();
        for i in 0..8 {
            rows.push(vec![i as f64 * 100.0, -(i as f64) * 50.0, 1.0]);
        }
        let g = matrix(rows);
        let known = set(&[0, 1]);
        let params = EnCAggParams {
            min_samples: 20,
            ..Default::default()
        };
        let (aggregated, record) =
            run_round_with(&g, &known, &params, PseudoSource::Disabled, 5).unwrap();
        assert!(record.fallback_used);
        let expect = aggregate_mean(&known, &g).unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(aggregated[j], expect[j], epsilon = 1e-15);
        }
        assert_eq!(record.final_benign, known);
    }

    #[test]
    fn round_is_deterministic_for_fixed_seed() {
        let mut rows = benign_cloud(16, 10, 77);
        for i in 0..4 {
            rows.push(vec![5.0 + i as f64 * 0.001; 10]);
        }
        let g = matrix(rows);
        let known = set(&[0, 1, 2, 3]);
        let run = |seed: u64| {
            let mut rng = ChaCha20Rng::seed_from_u64(123);
            let mut generator = GeneratorModel::new(8, 16, &mut rng).unwrap();
            let (agg, mut rec) =
                run_round(&g, &known, &EnCAggParams::default(), &mut generator, seed).unwrap();
            rec.round_index = 0;
            (agg, rec)
        };
        let (a1, r1) = run(99);
        let (a2, r2) = run(99);
        assert_eq!(a1, a2);
        assert_eq!(r1, r2);
        let (a3, _) = run(100);
        // Different seed shifts generator noise; aggregation may or may
        // not move, but the call must still succeed.
        assert_eq!(a3.len(), a1.len());
    }

    #[test]
    fn rejects_undersized_known_set() {
        let g = matrix(benign_cloud(5, 4, 3));
        assert!(run_round_with(
            &g,
            &set(&[0]),
            &EnCAggParams::default(),
            PseudoSource::Disabled,
            1
        )
        .is_err());
    }
}
