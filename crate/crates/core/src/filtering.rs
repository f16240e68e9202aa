//! Round-one gradient filtering: identify the benign cluster through the
//! root clients, tighten it with the density constraint against known
//! benign gradients, and keep noise points for the re-clustering pass.

use std::collections::BTreeSet;

use crate::clustering::{distance, ClusteringResult, Point2};
use crate::error::{Error, Result};

/// Outcome of the first filtering pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    /// Identified benign cluster id, or `None` when no cluster could be
    /// singled out and the noise-labeled set is screened instead.
    pub benign_label: Option<usize>,
    /// Members of the benign selection that also satisfy the density
    /// constraint.
    pub benign_core: BTreeSet<usize>,
    /// Deduplicated union of `benign_core` and the noise set.
    pub retained: BTreeSet<usize>,
    /// True when neither the root label nor a nearest cluster resolved a
    /// benign cluster.
    pub fallback_center_used: bool,
    /// Global mean of all projected gradients, recorded in the fallback
    /// branch; not otherwise acted upon.
    pub fallback_center: Option<Point2>,
}

/// Resolve the benign cluster from the root clients' labels.
///
/// Order of precedence: the roots' shared cluster label; otherwise, with
/// more than one cluster, the cluster whose center has the smallest
/// average distance to the two root points (ties to the lower id);
/// otherwise no cluster (`fallback` set). When exactly one root carries a
/// label, that label wins — the pair was constructed to sit one radius
/// apart, so the labeled root's cluster is the only candidate.
pub fn identify_benign_cluster(
    clustering: &ClusteringResult,
    root_pair: (usize, usize),
    root_points: (Point2, Point2),
) -> Result<(Option<usize>, bool)> {
    let n = clustering.labels.len();
    if root_pair.0 >= n || root_pair.1 >= n {
        return Err(Error::InvalidInput("root index out of range".into()));
    }
    let l0 = clustering.labels[root_pair.0];
    let l1 = clustering.labels[root_pair.1];
    match (l0, l1) {
        (Some(a), Some(b)) if a == b => Ok((Some(a), false)),
        (Some(a), Some(b)) => Err(Error::InconsistentLabels(a, b)),
        (Some(a), None) | (None, Some(a)) => Ok((Some(a), false)),
        (None, None) => {
            if clustering.cluster_count() > 1 {
                let mut best = 0usize;
                let mut best_dist = f64::INFINITY;
                for (id, center) in clustering.centers.iter().enumerate() {
                    let avg = 0.5
                        * (distance(*center, root_points.0) + distance(*center, root_points.1));
                    if avg < best_dist {
                        best_dist = avg;
                        best = id;
                    }
                }
                Ok((Some(best), false))
            } else {
                Ok((None, true))
            }
        }
    }
}

/// Keep the candidates whose projected gradient lies within `gamma *
/// epsilon` of at least one known-benign projected gradient.
pub fn apply_density_constraint(
    candidates: &BTreeSet<usize>,
    projected: &[Point2],
    known_benign: &BTreeSet<usize>,
    gamma: f64,
    epsilon: f64,
) -> BTreeSet<usize> {
    let bound = gamma * epsilon;
    candidates
        .iter()
        .copied()
        .filter(|&i| {
            known_benign
                .iter()
                .any(|&k| distance(projected[i], projected[k]) <= bound)
        })
        .collect()
}

/// Full first-round filter: pick the benign cluster (or the noise-labeled
/// set in the fallback branch), tighten it with the density constraint,
/// and union with the noise set.
pub fn filter_round_one(
    clustering: &ClusteringResult,
    projected: &[Point2],
    known_benign: &BTreeSet<usize>,
    root_pair: (usize, usize),
    gamma: f64,
    epsilon: f64,
) -> Result<FilterOutcome> {
    if clustering.labels.len() != projected.len() {
        return Err(Error::InvalidInput("clustering/projection size mismatch".into()));
    }
    let root_points = (projected[root_pair.0], projected[root_pair.1]);
    let (benign_label, fallback) = identify_benign_cluster(clustering, root_pair, root_points)?;

    let candidates: BTreeSet<usize> = match benign_label {
        Some(id) => clustering.clusters[id].iter().copied().collect(),
        None => clustering.noise.iter().copied().collect(),
    };
    let benign_core =
        apply_density_constraint(&candidates, projected, known_benign, gamma, epsilon);

    let mut retained = benign_core.clone();
    retained.extend(clustering.noise.iter().copied());

    let fallback_center = fallback.then(|| {
        let mut c = [0.0, 0.0];
        for p in projected {
            c[0] += p[0];
            c[1] += p[1];
        }
        let n = projected.len().max(1) as f64;
        [c[0] / n, c[1] / n]
    });

    Ok(FilterOutcome {
        benign_label,
        benign_core,
        retained,
        fallback_center_used: fallback,
        fallback_center,
    })
}
