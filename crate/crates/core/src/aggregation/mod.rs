//! Server-side aggregation of uploaded adapter vectors.
//!
//! Per round: build a ball tree over the flattened uploads, derive Gaussian
//! aggregation weights from k-NN distances, cut the tree at a fixed depth
//! into clusters, filter outliers per cluster by a median/MAD test, then
//! form the weighted global aggregate and per-cluster trimmed-mean experts.
//! A plain size-weighted average is provided as the comparison baseline.
//!
//! This module sees only flattened parameter vectors and shard sizes; no
//! client features, labels, or classifier state reach any code path here.

pub mod ball_tree;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{euclidean_distance, FlatVector};
use crate::Scalar;

pub use ball_tree::{build_ball_tree, naive_knn, BallTree};

/// Squared bandwidth of the Gaussian weighting in parameter-space distance
/// units. Distinct from any adversarial input budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianBandwidth<F> {
    pub sigma_sq: F,
}

impl<F: Scalar> GaussianBandwidth<F> {
    pub fn new(sigma_sq: F) -> Result<Self> {
        if sigma_sq <= F::zero() {
            return Err(Error::HyperparameterRange {
                name: "sigma_sq",
                value: sigma_sq.to_f64_c(),
                range: "(0, inf)",
            });
        }
        Ok(Self { sigma_sq })
    }
}

/// How the bandwidth is chosen each round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandwidthPolicy<F> {
    /// Median of all per-client k-NN distances of the round. Scale-free.
    AdaptiveMedian,
    /// Fixed squared bandwidth.
    Fixed(F),
}

/// Median of the pooled k-NN distances; falls back to 1 when all distances
/// vanish (weights are uniform in that case anyway).
pub fn adaptive_bandwidth<F: Scalar>(knn_distances: &[Vec<F>]) -> GaussianBandwidth<F> {
    let mut all: Vec<F> = knn_distances.iter().flatten().copied().collect();
    let med = median_mut(&mut all);
    GaussianBandwidth {
        sigma_sq: if med > F::zero() { med } else { F::one() },
    }
}

/// `q_i = sum_m exp(-d_im / sigma^2)`, normalized over all clients.
/// A global shift by the smallest distance guards against underflow of the
/// whole numerator; it cancels in the normalization.
pub fn gaussian_weights<F: Scalar>(
    knn_distances: &[Vec<F>],
    bw: GaussianBandwidth<F>,
) -> Vec<F> {
    let d_min = knn_distances
        .iter()
        .flatten()
        .copied()
        .fold(F::infinity(), F::min);
    let shift = if d_min.is_finite() { d_min } else { F::zero() };
    let raw: Vec<F> = knn_distances
        .iter()
        .map(|dists| {
            dists
                .iter()
                .map(|&d| (-(d - shift) / bw.sigma_sq).exp())
                .sum()
        })
        .collect();
    let total: F = raw.iter().copied().sum();
    raw.into_iter().map(|q| q / total).collect()
}

/// Result of the per-cluster median/MAD outlier test.
#[derive(Debug, Clone)]
pub struct FilterOutcome<F> {
    /// Filtered weights, zero for excluded members (cluster-local order).
    pub q_filtered: Vec<F>,
    /// Cluster-local indices of excluded members.
    pub excluded: Vec<usize>,
    /// Distance of each member to the robust cluster center.
    pub psi: Vec<F>,
    pub median_psi: F,
    pub mad: F,
    /// Elementwise-median cluster center.
    pub center: Vec<F>,
}

/// Median/MAD filter within one cluster: members farther than
/// `median(psi) + kappa * MAD` from the elementwise-median center lose
/// their weight.
pub fn byzantine_filter<F: Scalar>(
    cluster_updates: &[&FlatVector<F>],
    q: &[F],
    kappa: F,
) -> Result<FilterOutcome<F>> {
    let n = cluster_updates.len();
    if n == 0 {
        return Err(Error::EmptyPointSet);
    }
    if q.len() != n {
        return Err(Error::Config(format!("{} weights for {n} cluster members", q.len())));
    }
    let dim = cluster_updates[0].len();
    let mut center = vec![F::zero(); dim];
    let mut column = vec![F::zero(); n];
    for j in 0..dim {
        for (i, u) in cluster_updates.iter().enumerate() {
            column[i] = u.values()[j];
        }
        center[j] = median_mut(&mut column);
    }
    let psi: Vec<F> = cluster_updates
        .iter()
        .map(|u| euclidean_distance(u.values(), &center))
        .collect();
    let median_psi = median_mut(&mut psi.clone());
    let mad = median_mut(&mut psi.iter().map(|&p| (p - median_psi).abs()).collect::<Vec<_>>());
    let threshold = median_psi + kappa * mad;

    let mut q_filtered = Vec::with_capacity(n);
    let mut excluded = Vec::new();
    for (i, &p) in psi.iter().enumerate() {
        if p <= threshold {
            q_filtered.push(q[i]);
        } else {
            q_filtered.push(F::zero());
            excluded.push(i);
        }
    }
    Ok(FilterOutcome {
        q_filtered,
        excluded,
        psi,
        median_psi,
        mad,
        center,
    })
}

/// Weighted global aggregate `sum q_i |D_i| w_i / sum q_i |D_i|`.
pub fn aggregate_global<F: Scalar>(
    updates: &[FlatVector<F>],
    q_filtered: &[F],
    sizes: &[usize],
) -> Result<FlatVector<F>> {
    if updates.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let mut out = updates[0].zeros_like();
    let mut denom = F::zero();
    for ((u, &q), &s) in updates.iter().zip(q_filtered.iter()).zip(sizes.iter()) {
        let w = q * F::from_f64_c(s as f64);
        denom += w;
        out.add_scaled(u, w)?;
    }
    if denom <= F::zero() {
        return Err(Error::AllClientsExcluded);
    }
    out.scale(F::one() / denom);
    Ok(out)
}

/// Coordinate-wise trimmed mean over a cluster's updates: drop the
/// `ceil(trim * n)` largest and smallest values per coordinate, average the
/// rest. Clusters too small to trim fall back to the coordinate median.
pub fn aggregate_expert<F: Scalar>(
    cluster_updates: &[&FlatVector<F>],
    trim_fraction: F,
) -> Result<FlatVector<F>> {
    let n = cluster_updates.len();
    if n == 0 {
        return Err(Error::EmptyPointSet);
    }
    let trim = trim_fraction.to_f64_c();
    if !(0.0..0.5).contains(&trim) {
        return Err(Error::HyperparameterRange {
            name: "trim_fraction",
            value: trim,
            range: "[0, 0.5)",
        });
    }
    let t = (trim * n as f64).ceil() as usize;
    let mut out = cluster_updates[0].zeros_like();
    let dim = out.len();
    let inv_n = F::one() / F::from_f64_c(n as f64);
    let mut column = vec![F::zero(); n];
    for j in 0..dim {
        for (i, u) in cluster_updates.iter().enumerate() {
            column[i] = u.values()[j];
        }
        out.values_mut()[j] = if t == 0 {
            column.iter().copied().sum::<F>() * inv_n
        } else if n <= 2 * t {
            median_mut(&mut column)
        } else {
            column.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            let kept = &column[t..n - t];
            kept.iter().copied().sum::<F>() / F::from_f64_c(kept.len() as f64)
        };
    }
    Ok(out)
}

/// Size-weighted mean with no filtering (the classic baseline rule).
pub fn aggregate_fedavg<F: Scalar>(
    updates: &[FlatVector<F>],
    sizes: &[usize],
) -> Result<FlatVector<F>> {
    let uniform = vec![F::one(); updates.len()];
    aggregate_global(updates, &uniform, sizes)
}

/// Tunables of one aggregation round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregationConfig<F> {
    pub knn_k: usize,
    pub bandwidth: BandwidthPolicy<F>,
    pub tree_depth: usize,
    pub kappa: F,
    pub trim_fraction: F,
    pub leaf_size: usize,
}

impl<F: Scalar> Default for AggregationConfig<F> {
    fn default() -> Self {
        Self {
            knn_k: 5,
            bandwidth: BandwidthPolicy::AdaptiveMedian,
            // Depth 1 keeps clusters large enough that a coordinated minority
            // of fake updates cannot outvote a cluster's coordinate median.
            tree_depth: 1,
            kappa: F::from_f64_c(3.0),
            trim_fraction: F::from_f64_c(0.2),
            leaf_size: 1,
        }
    }
}

/// Per-cluster robust statistics surfaced in the audit record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterStats<F> {
    pub median_psi: F,
    pub mad: F,
    pub center: Vec<F>,
}

/// One round's aggregation audit record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregationReport<F> {
    pub round: usize,
    /// Pre-filter Gaussian weights, summing to 1.
    pub q: Vec<F>,
    /// Post-filter weights; zero marks an excluded client.
    pub q_filtered: Vec<F>,
    /// Cluster id -> sorted member client ids.
    pub clusters: BTreeMap<usize, Vec<usize>>,
    /// Clients that failed the median/MAD test, ascending.
    pub excluded: Vec<usize>,
    /// Distance of each client to its cluster center.
    pub psi: Vec<F>,
    pub cluster_stats: BTreeMap<usize, ClusterStats<F>>,
    /// Squared bandwidth used this round.
    pub sigma_sq: F,
    /// The aggregated global adapter vector.
    pub global: FlatVector<F>,
    /// Cluster id -> trimmed-mean expert vector.
    pub experts: BTreeMap<usize, FlatVector<F>>,
}

impl<F: Scalar> AggregationReport<F> {
    /// Cluster id of a client under this round's cut.
    pub fn cluster_of(&self, client_id: usize) -> Option<usize> {
        self.clusters
            .iter()
            .find(|(_, members)| members.contains(&client_id))
            .map(|(&id, _)| id)
    }
}

/// Runs the full server-side pipeline for one round.
pub fn server_aggregate<F: Scalar>(
    round: usize,
    updates: &[FlatVector<F>],
    sizes: &[usize],
    cfg: &AggregationConfig<F>,
) -> Result<AggregationReport<F>> {
    let n = updates.len();
    if n == 0 {
        return Err(Error::EmptyPointSet);
    }
    if sizes.len() != n {
        return Err(Error::Config(format!("{} sizes for {n} updates", sizes.len())));
    }
    for u in &updates[1..] {
        if !u.layout_matches(&updates[0]) {
            return Err(Error::LayoutMismatch("uploaded vectors differ in layout".into()));
        }
    }

    if n == 1 {
        // Degenerate federation: the single client is the global model.
        let global = updates[0].clone();
        return Ok(AggregationReport {
            round,
            q: vec![F::one()],
            q_filtered: vec![F::one()],
            clusters: BTreeMap::from([(0, vec![0])]),
            excluded: Vec::new(),
            psi: vec![F::zero()],
            cluster_stats: BTreeMap::from([(
                0,
                ClusterStats {
                    median_psi: F::zero(),
                    mad: F::zero(),
                    center: updates[0].values().to_vec(),
                },
            )]),
            sigma_sq: F::one(),
            global: global.clone(),
            experts: BTreeMap::from([(0, global)]),
        });
    }

    let tree = build_ball_tree(updates, cfg.leaf_size)?;
    let k = cfg.knn_k.min(n - 1).max(1);
    let mut knn_distances = Vec::with_capacity(n);
    for i in 0..n {
        let neighbors = tree.knn(i, k)?;
        knn_distances.push(neighbors.into_iter().map(|(_, d)| d).collect::<Vec<F>>());
    }
    let bw = match cfg.bandwidth {
        BandwidthPolicy::AdaptiveMedian => adaptive_bandwidth(&knn_distances),
        BandwidthPolicy::Fixed(s) => GaussianBandwidth::new(s)?,
    };
    let q = gaussian_weights(&knn_distances, bw);

    let clusters = tree.cluster_cut(cfg.tree_depth);
    let mut q_filtered = vec![F::zero(); n];
    let mut psi = vec![F::zero(); n];
    let mut excluded = Vec::new();
    let mut cluster_stats = BTreeMap::new();
    let mut experts = BTreeMap::new();
    for (&cluster_id, members) in &clusters {
        let member_updates: Vec<&FlatVector<F>> = members.iter().map(|&i| &updates[i]).collect();
        let member_q: Vec<F> = members.iter().map(|&i| q[i]).collect();
        let outcome = byzantine_filter(&member_updates, &member_q, cfg.kappa)?;
        for (local, &client) in members.iter().enumerate() {
            q_filtered[client] = outcome.q_filtered[local];
            psi[client] = outcome.psi[local];
        }
        excluded.extend(outcome.excluded.iter().map(|&local| members[local]));
        cluster_stats.insert(
            cluster_id,
            ClusterStats {
                median_psi: outcome.median_psi,
                mad: outcome.mad,
                center: outcome.center,
            },
        );
        experts.insert(cluster_id, aggregate_expert(&member_updates, cfg.trim_fraction)?);
    }
    excluded.sort_unstable();

    let global = aggregate_global(updates, &q_filtered, sizes)?;
    Ok(AggregationReport {
        round,
        q,
        q_filtered,
        clusters,
        excluded,
        psi,
        cluster_stats,
        sigma_sq: bw.sigma_sq,
        global,
        experts,
    })
}

/// In-place median; empty input gives 0. Even counts average the middle two.
fn median_mut<F: Scalar>(values: &mut [F]) -> F {
    let n = values.len();
    if n == 0 {
        return F::zero();
    }
    values.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / F::from_f64_c(2.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayoutEntry;
    use crate::rng::{derive_rng, stream};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn flat(values: Vec<f64>) -> FlatVector<f64> {
        let cols = values.len();
        FlatVector::new(values, vec![LayoutEntry { layer: 0, rows: 1, cols }]).unwrap()
    }

    #[test]
    fn equal_distances_give_uniform_weights() {
        let dists = vec![vec![2.0, 2.0]; 4];
        let q = gaussian_weights(&dists, GaussianBandwidth { sigma_sq: 1.0 });
        for &w in &q {
            assert_abs_diff_eq!(w, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn far_client_weight_vanishes() {
        let dists = vec![vec![0.0], vec![1e6]];
        let q = gaussian_weights(&dists, GaussianBandwidth { sigma_sq: 1.0 });
        assert_abs_diff_eq!(q[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(q[1], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn gaussian_weights_match_scalar_oracle() {
        let dists = vec![vec![0.0], vec![1.0], vec![2.0]];
        let q = gaussian_weights(&dists, GaussianBandwidth { sigma_sq: 1.0 });
        let raw = [1.0, (-1.0f64).exp(), (-2.0f64).exp()];
        let total: f64 = raw.iter().sum();
        assert_abs_diff_eq!(q[0], raw[0] / total, epsilon = 1e-3);
        assert_abs_diff_eq!(q[1], raw[1] / total, epsilon = 1e-3);
        assert_abs_diff_eq!(q[2], raw[2] / total, epsilon = 1e-3);
        assert_abs_diff_eq!(q[0], 0.6652, epsilon = 1e-3);
        assert_abs_diff_eq!(q[1], 0.2447, epsilon = 1e-3);
        assert_abs_diff_eq!(q[2], 0.0900, epsilon = 1e-3);
        assert_abs_diff_eq!(q.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn weights_survive_extreme_distances() {
        // Without the shift every numerator would underflow to zero.
        let dists: Vec<Vec<f64>> = vec![vec![1e8], vec![1e8 + 1.0]];
        let q = gaussian_weights(&dists, GaussianBandwidth { sigma_sq: 1.0 });
        assert!(q.iter().all(|w| w.is_finite()));
        assert_abs_diff_eq!(q.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(q[0] > q[1]);
    }

    #[test]
    fn identical_points_exclude_nobody() {
        let updates: Vec<FlatVector<f64>> = (0..5).map(|_| flat(vec![1.0, 2.0])).collect();
        let refs: Vec<&FlatVector<f64>> = updates.iter().collect();
        let out = byzantine_filter(&refs, &[0.2; 5], 3.0).expect("filter");
        assert!(out.excluded.is_empty());
        assert!(out.psi.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn hand_computed_mad_case_excludes_the_outlier() {
        // 1-D points {-1, 1, -1, 10}: center = 0, psi = {1, 1, 1, 10},
        // median psi = 1, MAD = 0, threshold = 1 -> only the far point fails.
        let updates = [flat(vec![-1.0]), flat(vec![1.0]), flat(vec![-1.0]), flat(vec![10.0])];
        let refs: Vec<&FlatVector<f64>> = updates.iter().collect();
        let out = byzantine_filter(&refs, &[0.25; 4], 3.0).expect("filter");
        assert_eq!(out.psi, vec![1.0, 1.0, 1.0, 10.0]);
        assert_eq!(out.median_psi, 1.0);
        assert_eq!(out.mad, 0.0);
        assert_eq!(out.excluded, vec![3]);
        assert_eq!(out.q_filtered, vec![0.25, 0.25, 0.25, 0.0]);
    }

    #[test]
    fn single_member_cluster_is_kept() {
        let updates = [flat(vec![5.0, -3.0])];
        let refs: Vec<&FlatVector<f64>> = updates.iter().collect();
        let out = byzantine_filter(&refs, &[1.0], 3.0).expect("filter");
        assert!(out.excluded.is_empty());
        assert_eq!(out.psi, vec![0.0]);
    }

    #[test]
    fn filter_soundness_planted_outliers_always_excluded() {
        // m < n/2 plants far beyond the honest diameter must all fail the
        // test, for any kappa up to 10.
        let mut rng = derive_rng(41, &[stream::INIT]);
        for trial in 0..20 {
            let n_honest = 7;
            let m = 3;
            let dim = 12;
            let honest: Vec<FlatVector<f64>> = (0..n_honest)
                .map(|_| flat((0..dim).map(|_| rng.gen::<f64>() * 0.1).collect()))
                .collect();
            let diameter: f64 = 0.1 * (dim as f64).sqrt();
            let planted: Vec<FlatVector<f64>> = (0..m)
                .map(|i| {
                    flat(
                        (0..dim)
                            .map(|j| if j == i { 100.0 * diameter * (trial + 1) as f64 } else { 0.0 })
                            .collect(),
                    )
                })
                .collect();
            let all: Vec<&FlatVector<f64>> = honest.iter().chain(planted.iter()).collect();
            let q = vec![0.1; all.len()];
            for kappa in [3.0, 10.0] {
                let out = byzantine_filter(&all, &q, kappa).expect("filter");
                for p in 0..m {
                    assert!(
                        out.excluded.contains(&(n_honest + p)),
                        "trial {trial} kappa {kappa}: plant {p} kept"
                    );
                }
            }
        }
    }

    #[test]
    fn aggregate_global_cases() {
        let updates = vec![flat(vec![0.0]), flat(vec![4.0])];
        // Equal weights and sizes: plain mean.
        let g = aggregate_global(&updates, &[0.5, 0.5], &[10, 10]).unwrap();
        assert_abs_diff_eq!(g.values()[0], 2.0, epsilon = 1e-12);
        // One live client: exactly that update.
        let g = aggregate_global(&updates, &[1.0, 0.0], &[3, 999]).unwrap();
        assert_eq!(g.values(), &[0.0]);
        // All excluded: aborted round.
        assert!(matches!(
            aggregate_global(&updates, &[0.0, 0.0], &[1, 1]),
            Err(Error::AllClientsExcluded)
        ));
    }

    #[test]
    fn aggregate_global_matches_naive_weighted_sum() {
        let updates = vec![flat(vec![1.0, -2.0]), flat(vec![0.5, 3.0]), flat(vec![-1.0, 0.0])];
        let q = [0.5, 0.3, 0.2];
        let sizes = [10usize, 20, 30];
        let g = aggregate_global(&updates, &q, &sizes).unwrap();
        let denom: f64 = q.iter().zip(sizes).map(|(&qi, s)| qi * s as f64).sum();
        for j in 0..2 {
            let naive: f64 = (0..3)
                .map(|i| q[i] * sizes[i] as f64 * updates[i].values()[j])
                .sum::<f64>()
                / denom;
            assert_abs_diff_eq!(g.values()[j], naive, epsilon = 1e-12);
        }
    }

    #[test]
    fn trimmed_mean_cases() {
        let updates = [flat(vec![0.0]), flat(vec![0.0]), flat(vec![0.0]), flat(vec![100.0])];
        let refs: Vec<&FlatVector<f64>> = updates.iter().collect();
        // trim = 0: plain mean.
        let e = aggregate_expert(&refs, 0.0).unwrap();
        assert_abs_diff_eq!(e.values()[0], 25.0, epsilon = 1e-12);
        // trim = 0.25 drops the extremes; the plant vanishes.
        let e = aggregate_expert(&refs, 0.25).unwrap();
        assert_eq!(e.values(), &[0.0]);
        // Single member: that member.
        let single = [&updates[3]];
        let e = aggregate_expert(&single, 0.25).unwrap();
        assert_eq!(e.values(), &[100.0]);
        assert!(aggregate_expert(&refs, 0.5).is_err());
    }

    #[test]
    fn fedavg_cases() {
        let updates = vec![flat(vec![0.0]), flat(vec![4.0])];
        let g = aggregate_fedavg(&updates, &[1, 1]).unwrap();
        assert_abs_diff_eq!(g.values()[0], 2.0, epsilon = 1e-12);
        // sizes (1, 3) on values (0, 4): (0 + 12) / 4 = 3.
        let g = aggregate_fedavg(&updates, &[1, 3]).unwrap();
        assert_abs_diff_eq!(g.values()[0], 3.0, epsilon = 1e-12);
        let g = aggregate_fedavg(&updates[..1], &[7]).unwrap();
        assert_eq!(g.values(), &[0.0]);
    }

    #[test]
    fn honest_iid_updates_track_fedavg_and_exclude_nobody() {
        // Tight population around one point: each client deviates by the
        // same magnitude along its own coordinate, so every distance to the
        // (exact) median center is equal and the MAD test keeps everyone.
        let mut rng = derive_rng(55, &[stream::INIT]);
        let dim = 24;
        let center: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let updates: Vec<FlatVector<f64>> = (0..12)
            .map(|i| {
                let mut values = center.clone();
                values[i] += 1e-10;
                flat(values)
            })
            .collect();
        let sizes = vec![50usize; 12];
        let report = server_aggregate(3, &updates, &sizes, &AggregationConfig::default()).unwrap();
        assert!(report.excluded.is_empty());
        assert_abs_diff_eq!(report.q.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let fedavg = aggregate_fedavg(&updates, &sizes).unwrap();
        for (a, b) in report.global.values().iter().zip(fedavg.values()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn aggregates_stay_in_the_coordinate_box() {
        let mut rng = derive_rng(77, &[stream::INIT]);
        for round in 0..100 {
            let n = rng.gen_range(2..10);
            let dim = rng.gen_range(1..6);
            let updates: Vec<FlatVector<f64>> = (0..n)
                .map(|_| flat((0..dim).map(|_| rng.gen::<f64>() * 10.0 - 5.0).collect()))
                .collect();
            let sizes: Vec<usize> = (0..n).map(|_| rng.gen_range(1..100)).collect();
            let report =
                server_aggregate(round, &updates, &sizes, &AggregationConfig::default()).unwrap();
            for j in 0..dim {
                let lo = updates.iter().map(|u| u.values()[j]).fold(f64::INFINITY, f64::min);
                let hi = updates
                    .iter()
                    .map(|u| u.values()[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                let v = report.global.values()[j];
                assert!(v >= lo - 1e-9 && v <= hi + 1e-9, "round {round}: {v} outside [{lo}, {hi}]");
                for expert in report.experts.values() {
                    let e = expert.values()[j];
                    assert!(e >= lo - 1e-9 && e <= hi + 1e-9);
                }
            }
        }
    }

    #[test]
    fn single_client_round_is_identity() {
        let updates = vec![flat(vec![1.5, -0.5])];
        let report = server_aggregate(0, &updates, &[10], &AggregationConfig::default()).unwrap();
        assert_eq!(report.global, updates[0]);
        assert_eq!(report.experts[&0], updates[0]);
        assert_eq!(report.q, vec![1.0]);
    }

    #[test]
    fn every_client_lands_in_exactly_one_cluster() {
        let mut rng = derive_rng(91, &[stream::INIT]);
        let updates: Vec<FlatVector<f64>> = (0..15)
            .map(|_| flat((0..8).map(|_| rng.gen::<f64>()).collect()))
            .collect();
        let sizes = vec![10usize; 15];
        let report = server_aggregate(0, &updates, &sizes, &AggregationConfig::default()).unwrap();
        let mut seen: Vec<usize> = report.clusters.values().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..15).collect::<Vec<_>>());
        for id in 0..15 {
            assert!(report.cluster_of(id).is_some());
        }
    }
}
