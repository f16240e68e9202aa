//! Adaptive clustering-radius selection from known-benign reference
//! gradients and deterministic DBSCAN over 2D points.
//!
//! Determinism rules, fixed once and shared with the brute-force oracle in
//! [`crate::verify`]:
//! * neighborhoods are closed balls (`distance <= epsilon`), the point
//!   itself counts toward `min_samples`;
//! * cluster ids are assigned in order of the lowest-index core point of
//!   each cluster;
//! * a border point joins the cluster of the lowest-index core point that
//!   reaches it.

use crate::error::{Error, Result};

/// A projected gradient.
pub type Point2 = [f64; 2];

pub fn distance(a: Point2, b: Point2) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Result of picking the clustering radius from known-benign pairwise
/// distances.
#[derive(Debug, Clone)]
pub struct RadiusSelection {
    /// The selected clustering radius.
    pub epsilon: f64,
    /// Indices (into the input slice) of the pair attaining `epsilon`;
    /// these become the round's root clients.
    pub root_pair: (usize, usize),
    /// All C(k,2) pairwise distances in ascending order.
    pub sorted_distances: Vec<f64>,
}

/// Pick the `ceil(r * C(k,2))`-th smallest pairwise distance among the
/// known-benign projected gradients as the clustering radius, and return
/// the pair attaining it.
pub fn select_radius(projected_known: &[Point2], r: f64) -> Result<RadiusSelection> {
    let k = projected_known.len();
    if k < 2 {
        return Err(Error::InvalidInput("radius selection needs k >= 2 points".into()));
    }
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::InvalidInput("r must be in (0,1)".into()));
    }
    if projected_known.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::InvalidInput("non-finite point coordinates".into()));
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in (i + 1)..k {
            pairs.push((distance(projected_known[i], projected_known[j]), i, j));
        }
    }
    pairs.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("finite distances")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let count = pairs.len();
    let rank = (r * count as f64).ceil() as usize;
    let rank = rank.clamp(1, count);
    let (epsilon, i, j) = pairs[rank - 1];
    Ok(RadiusSelection {
        epsilon,
        root_pair: (i, j),
        sorted_distances: pairs.into_iter().map(|p| p.0).collect(),
    })
}

/// Density clustering output: per-point labels (`None` = noise), cluster
/// membership lists, per-cluster centers and the noise index set.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringResult {
    pub labels: Vec<Option<usize>>,
    pub clusters: Vec<Vec<usize>>,
    pub centers: Vec<Point2>,
    pub noise: Vec<usize>,
}

impl ClusteringResult {
    pub fn cluster_count(&self) -> usize {
        self.clusters.len()
    }
}

/// DBSCAN over 2D points with the determinism rules documented at module
/// level.
pub fn dbscan(points: &[Point2], epsilon: f64, min_samples: usize) -> Result<ClusteringResult> {
    let m = points.len();
    if m == 0 {
        return Err(Error::InvalidInput("dbscan needs at least one point".into()));
    }
    if min_samples < 1 {
        return Err(Error::InvalidInput("min_samples must be >= 1".into()));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidInput("epsilon must be finite and >= 0".into()));
    }
    if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::InvalidInput("non-finite point coordinates".into()));
    }

    // Closed-ball neighborhoods, self included.
    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); m];
    for i in 0..m {
        for j in 0..m {
            if distance(points[i], points[j]) <= epsilon {
                neighbors[i].push(j);
            }
        }
    }
    let core: Vec<bool> = neighbors.iter().map(|n| n.len() >= min_samples).collect();

    let mut labels: Vec<Option<usize>> = vec![None; m];
    let mut next_cluster = 0usize;

    // Grow clusters over core points only; ascending scan order makes the
    // cluster ids deterministic.
    for start in 0..m {
        if !core[start] || labels[start].is_some() {
            continue;
        }
        let id = next_cluster;
        next_cluster += 1;
        let mut queue = vec![start];
        labels[start] = Some(id);
        while let Some(p) = queue.pop() {
            for &q in &neighbors[p] {
                if core[q] && labels[q].is_none() {
                    labels[q] = Some(id);
                    queue.push(q);
                }
            }
        }
    }

    // Border points attach to the lowest-index core point reaching them.
    for p in 0..m {
        if core[p] {
            continue;
        }
        for &q in &neighbors[p] {
            if core[q] {
                labels[p] = labels[q];
                break;
            }
        }
    }

    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); next_cluster];
    let mut noise = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        match l {
            Some(id) => clusters[*id].push(i),
            None => noise.push(i),
        }
    }
    let centers = compute_centers(&clusters, points);
    Ok(ClusteringResult {
        labels,
        clusters,
        centers,
        noise,
    })
}

/// Arithmetic mean of each cluster's points.
pub fn cluster_centers(result: &ClusteringResult, points: &[Point2]) -> Vec<Point2> {
    compute_centers(&result.clusters, points)
}

fn compute_centers(clusters: &[Vec<usize>], points: &[Point2]) -> Vec<Point2> {
    clusters
        .iter()
        .map(|members| {
            let mut c = [0.0, 0.0];
            for &i in members {
                c[0] += points[i][0];
                c[1] += points[i][1];
            }
            let len = members.len().max(1) as f64;
            [c[0] / len, c[1] / len]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn two_points_use_their_single_distance() {
        let pts = [[0.0, 0.0], [3.0, 4.0]];
        let sel = select_radius(&pts, 0.7).unwrap();
        assert_abs_diff_eq!(sel.epsilon, 5.0);
        assert_eq!(sel.root_pair, (0, 1));
    }

    #[test]
    fn radius_rank_selects_expected_order_statistic() {
        // Collinear points at 0, 1, 4, 6: pairwise distances are exactly
        // {1, 2, 3, 4, 5, 6}.
        let pts = [[0.0, 0.0], [1.0, 0.0], [4.0, 0.0], [6.0, 0.0]];
        let sel = select_radius(&pts, 0.5).unwrap();
        assert_eq!(sel.sorted_distances, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        // ceil(0.5 * 6) = 3rd smallest.
        assert_abs_diff_eq!(sel.epsilon, 3.0);
        assert_eq!(sel.root_pair, (1, 2));
    }

    #[test]
    fn default_r_on_five_points_takes_second_smallest() {
        let pts = [[0.0, 0.0], [0.5, 0.0], [2.0, 0.0], [5.0, 0.0], [9.0, 0.0]];
        // C(5,2) = 10, ceil(0.2 * 10) = 2.
        let sel = select_radius(&pts, 0.2).unwrap();
        assert_abs_diff_eq!(sel.epsilon, sel.sorted_distances[1]);
    }

    #[test]
    fn radius_stays_within_distance_range() {
        let pts = [[0.0, 1.0], [2.0, -1.0], [-3.0, 0.5], [1.0, 4.0], [0.3, 0.3]];
        for r in [0.05, 0.2, 0.5, 0.95] {
            let sel = select_radius(&pts, r).unwrap();
            let min = sel.sorted_distances.first().copied().unwrap();
            let max = sel.sorted_distances.last().copied().unwrap();
            assert!(sel.epsilon >= min && sel.epsilon <= max);
        }
    }

    #[test]
    fn rejects_r_outside_open_interval() {
        let pts = [[0.0, 0.0], [1.0, 0.0]];
        assert!(select_radius(&pts, 0.0).is_err());
        assert!(select_radius(&pts, 1.0).is_err());
        assert!(select_radius(&pts, 1.5).is_err());
    }

    #[test]
    fn single_point_is_noise_under_large_min_samples() {
        let res = dbscan(&[[1.0, 1.0]], 0.5, 5).unwrap();
        assert_eq!(res.labels, vec![None]);
        assert_eq!(res.noise, vec![0]);
        assert_eq!(res.cluster_count(), 0);
    }

    #[test]
    fn identical_points_form_one_cluster() {
        let pts = vec![[2.0, -1.0]; 6];
        let res = dbscan(&pts, 0.0, 5).unwrap();
        assert_eq!(res.cluster_count(), 1);
        assert_eq!(res.clusters[0].len(), 6);
        assert_abs_diff_eq!(res.centers[0][0], 2.0);
        assert_abs_diff_eq!(res.centers[0][1], -1.0);
        assert!(res.noise.is_empty());
    }

    #[test]
    fn two_blobs_and_an_outlier() {
        let mut pts: Vec<Point2> = Vec::new();
        // Blob A around origin, spread < eps.
        for i in 0..6 {
            pts.push([0.1 * i as f64, 0.05 * i as f64]);
        }
        // Blob B far away.
        for i in 0..6 {
            pts.push([20.0 + 0.1 * i as f64, 20.0 - 0.05 * i as f64]);
        }
        // Isolated point.
        pts.push([100.0, -50.0]);
        let res = dbscan(&pts, 1.0, 5).unwrap();
        assert_eq!(res.cluster_count(), 2);
        assert_eq!(res.clusters[0], (0..6).collect::<Vec<_>>());
        assert_eq!(res.clusters[1], (6..12).collect::<Vec<_>>());
        assert_eq!(res.noise, vec![12]);
    }

    #[test]
    fn centers_match_direct_means() {
        let pts = vec![[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0], [1.0, 1.0]];
        let res = dbscan(&pts, 2.5, 3).unwrap();
        assert_eq!(res.cluster_count(), 1);
        let centers = cluster_centers(&res, &pts);
        assert_abs_diff_eq!(centers[0][0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(centers[0][1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn pair_cluster_center_is_midpoint() {
        let pts = vec![[0.0, 0.0], [2.0, 0.0]];
        let res = dbscan(&pts, 2.0, 2).unwrap();
        assert_eq!(res.cluster_count(), 1);
        assert_abs_diff_eq!(res.centers[0][0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(res.centers[0][1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn border_point_joins_lowest_index_core() {
        // Cores at index 0..3 (cluster 0) and 4..7 (cluster 1); point 8 is
        // within eps of cores from both clusters and must take the cluster
        // of the lowest-index core reaching it (index 3, cluster 0).
        let pts = vec![
            [0.0, 0.0],
            [0.2, 0.0],
            [0.4, 0.0],
            [0.6, 0.0],
            [2.0, 0.0],
            [2.2, 0.0],
            [2.4, 0.0],
            [2.6, 0.0],
            [1.32, 0.0],
        ];
        let res = dbscan(&pts, 0.75, 4).unwrap();
        assert_eq!(res.cluster_count(), 2);
        assert_eq!(res.labels[8], Some(0));
        assert_eq!(res.clusters[0], vec![0, 1, 2, 3, 8]);
    }

    #[test]
    fn growing_epsilon_never_creates_noise() {
        let pts = vec![
            [0.0, 0.0],
            [0.4, 0.1],
            [0.9, -0.2],
            [3.0, 3.0],
            [3.3, 2.8],
            [7.0, -2.0],
            [-1.0, 4.0],
        ];
        let mut prev_noise = usize::MAX;
        for eps in [0.2, 0.5, 1.0, 2.0, 5.0, 12.0] {
            let res = dbscan(&pts, eps, 3).unwrap();
            assert!(res.noise.len() <= prev_noise);
            prev_noise = res.noise.len();
        }
    }
}
