//! Ball tree over flattened adapter vectors.
//!
//! A binary spatial index whose nodes are hyperspheres enclosing their
//! subtree's points. Construction splits on the dimension of maximum spread
//! at each node, halving the point set at the median, so the tree is
//! balanced regardless of outliers. Nearest-neighbor queries prune subtrees
//! by the triangle-inequality bound `d(q, centroid) - radius` and return
//! exactly what exhaustive search would (ties broken by lower index).

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{euclidean_distance, FlatVector};
use crate::Scalar;

/// Pruning slack covering floating-point error in the bound computation;
/// never affects which indices are returned, only how much is pruned.
const PRUNE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone)]
struct Node<F> {
    centroid: Vec<F>,
    radius: F,
    start: usize,
    end: usize,
    depth: usize,
    children: Option<(usize, usize)>,
}

/// Hierarchical hypersphere index over a fixed point set.
#[derive(Debug, Clone)]
pub struct BallTree<F> {
    points: Vec<Vec<F>>,
    idx: Vec<usize>,
    nodes: Vec<Node<F>>,
    leaf_size: usize,
}

impl<F: Scalar> BallTree<F> {
    /// Builds the tree over raw coordinate rows.
    pub fn build(points: Vec<Vec<F>>, leaf_size: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyPointSet);
        }
        let dim = points[0].len();
        if let Some(bad) = points.iter().find(|p| p.len() != dim) {
            return Err(Error::DimensionMismatch {
                layer: 0,
                expected: dim,
                got: bad.len(),
            });
        }
        let leaf_size = leaf_size.max(1);
        let mut tree = Self {
            idx: (0..points.len()).collect(),
            points,
            nodes: Vec::new(),
            leaf_size,
        };
        let n = tree.points.len();
        tree.build_node(0, n, 0);
        Ok(tree)
    }

    fn build_node(&mut self, start: usize, end: usize, depth: usize) -> usize {
        let members = &self.idx[start..end];
        let dim = self.points[0].len();
        let count = F::from_f64_c((end - start) as f64);
        let mut centroid = vec![F::zero(); dim];
        for &i in members {
            for (c, &v) in centroid.iter_mut().zip(self.points[i].iter()) {
                *c += v;
            }
        }
        for c in &mut centroid {
            *c /= count;
        }
        let radius = members
            .iter()
            .map(|&i| euclidean_distance(&self.points[i], &centroid))
            .fold(F::zero(), F::max);

        let id = self.nodes.len();
        self.nodes.push(Node {
            centroid,
            radius,
            start,
            end,
            depth,
            children: None,
        });

        if end - start > self.leaf_size {
            // Split on the dimension of maximum spread.
            let mut split_dim = 0;
            let mut best_spread = F::neg_infinity();
            for d in 0..dim {
                let mut lo = F::infinity();
                let mut hi = F::neg_infinity();
                for &i in &self.idx[start..end] {
                    lo = lo.min(self.points[i][d]);
                    hi = hi.max(self.points[i][d]);
                }
                if hi - lo > best_spread {
                    best_spread = hi - lo;
                    split_dim = d;
                }
            }
            let points = &self.points;
            self.idx[start..end].sort_unstable_by(|&a, &b| {
                points[a][split_dim]
                    .partial_cmp(&points[b][split_dim])
                    .unwrap_or(Ordering::Equal)
                    .then(a.cmp(&b))
            });
            let mid = start + (end - start).div_ceil(2);
            let left = self.build_node(start, mid, depth + 1);
            let right = self.build_node(mid, end, depth + 1);
            self.nodes[id].children = Some((left, right));
        }
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn height(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// The `k` nearest points to `points[query_index]`, the query point
    /// itself excluded, sorted by `(distance, index)`.
    pub fn knn(&self, query_index: usize, k: usize) -> Result<Vec<(usize, F)>> {
        let n = self.points.len();
        if k == 0 || k > n - 1 {
            return Err(Error::KnnRange { k, n });
        }
        let query = &self.points[query_index];
        let mut heap: BinaryHeap<Candidate<F>> = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, query_index, k, &mut heap);
        let mut out: Vec<(usize, F)> = heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| (c.index, c.distance))
            .collect();
        out.sort_by(|a, b| {
            a.1.partial_cmp(&b.1)
                .unwrap_or(Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        Ok(out)
    }

    fn search(
        &self,
        node_id: usize,
        query: &[F],
        skip: usize,
        k: usize,
        heap: &mut BinaryHeap<Candidate<F>>,
    ) {
        let node = &self.nodes[node_id];
        if heap.len() == k {
            let bound = euclidean_distance(query, &node.centroid) - node.radius;
            let slack = F::from_f64_c(PRUNE_SLACK) * (F::one() + bound.abs());
            let worst = heap.peek().expect("heap full").distance;
            if bound - slack > worst {
                return;
            }
        }
        match node.children {
            None => {
                for &i in &self.idx[node.start..node.end] {
                    if i == skip {
                        continue;
                    }
                    let d = euclidean_distance(query, &self.points[i]);
                    let candidate = Candidate { distance: d, index: i };
                    if heap.len() < k {
                        heap.push(candidate);
                    } else if candidate < *heap.peek().expect("heap full") {
                        heap.pop();
                        heap.push(candidate);
                    }
                }
            }
            Some((left, right)) => {
                let d_left = euclidean_distance(query, &self.nodes[left].centroid)
                    - self.nodes[left].radius;
                let d_right = euclidean_distance(query, &self.nodes[right].centroid)
                    - self.nodes[right].radius;
                if d_left <= d_right {
                    self.search(left, query, skip, k, heap);
                    self.search(right, query, skip, k, heap);
                } else {
                    self.search(right, query, skip, k, heap);
                    self.search(left, query, skip, k, heap);
                }
            }
        }
    }

    /// Clusters induced by cutting the tree at `depth`: the subtrees rooted
    /// at that depth, plus any leaves that sit shallower. Cluster ids follow
    /// pre-order traversal; members are sorted point indices.
    pub fn cluster_cut(&self, depth: usize) -> BTreeMap<usize, Vec<usize>> {
        let mut clusters = BTreeMap::new();
        let mut stack = vec![0usize];
        let mut order = Vec::new();
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if node.depth == depth || node.children.is_none() {
                order.push(id);
            } else if let Some((left, right)) = node.children {
                stack.push(right);
                stack.push(left);
            }
        }
        // Stack-based pre-order already visits left before right; sort by
        // position so ids are stable.
        order.sort_by_key(|&id| self.nodes[id].start);
        for (cluster_id, node_id) in order.into_iter().enumerate() {
            let node = &self.nodes[node_id];
            let mut members: Vec<usize> = self.idx[node.start..node.end].to_vec();
            members.sort_unstable();
            clusters.insert(cluster_id, members);
        }
        clusters
    }

    /// Largest violation of the containment invariant across all nodes:
    /// `max over nodes of (member distance to centroid - radius)`.
    /// Non-positive means every ball encloses its subtree.
    pub fn max_containment_violation(&self) -> F {
        let mut worst = F::neg_infinity();
        for node in &self.nodes {
            for &i in &self.idx[node.start..node.end] {
                let v = euclidean_distance(&self.points[i], &node.centroid) - node.radius;
                worst = worst.max(v);
            }
        }
        worst
    }

    /// Every point index appears in exactly one leaf.
    pub fn leaf_partition_is_exact(&self) -> bool {
        let mut seen = vec![0usize; self.points.len()];
        for node in self.nodes.iter().filter(|n| n.children.is_none()) {
            for &i in &self.idx[node.start..node.end] {
                seen[i] += 1;
            }
        }
        seen.iter().all(|&c| c == 1)
    }
}

/// Builds a tree over flattened adapter vectors.
pub fn build_ball_tree<F: Scalar>(
    points: &[FlatVector<F>],
    leaf_size: usize,
) -> Result<BallTree<F>> {
    BallTree::build(points.iter().map(|p| p.values().to_vec()).collect(), leaf_size)
}

#[derive(Debug, Clone, Copy)]
struct Candidate<F> {
    distance: F,
    index: usize,
}

impl<F: Scalar> PartialEq for Candidate<F> {
    fn eq(&self, other: &Self) -> bool {
        self.distance == other.distance && self.index == other.index
    }
}

impl<F: Scalar> Eq for Candidate<F> {}

impl<F: Scalar> PartialOrd for Candidate<F> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<F: Scalar> Ord for Candidate<F> {
    /// Lexicographic `(distance, index)`; the heap max is the worst kept
    /// candidate under exhaustive-search tie-breaking.
    fn cmp(&self, other: &Self) -> Ordering {
        self.distance
            .partial_cmp(&other.distance)
            .unwrap_or(Ordering::Equal)
            .then(self.index.cmp(&other.index))
    }
}

/// Exhaustive k-NN with the same tie-breaking, for oracle checks.
pub fn naive_knn<F: Scalar>(points: &[Vec<F>], query_index: usize, k: usize) -> Vec<(usize, F)> {
    let mut all: Vec<(usize, F)> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != query_index)
        .map(|(i, p)| (i, euclidean_distance(&points[query_index], p)))
        .collect();
    all.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .unwrap_or(Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    all.truncate(k);
    all
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_rng, stream};
    use rand::Rng;

    fn points_1d(values: &[f64]) -> Vec<Vec<f64>> {
        values.iter().map(|&v| vec![v]).collect()
    }

    #[test]
    fn single_point_is_one_leaf_with_zero_radius() {
        let tree = BallTree::build(points_1d(&[3.0]), 1).expect("tree");
        assert_eq!(tree.nodes.len(), 1);
        assert_eq!(tree.nodes[0].radius, 0.0);
        assert!(tree.nodes[0].children.is_none());
    }

    #[test]
    fn collinear_points_satisfy_containment_everywhere() {
        let tree = BallTree::build(points_1d(&[0.0, 1.0, 2.0, 3.0]), 1).expect("tree");
        assert!(tree.max_containment_violation() <= 1e-9);
        assert!(tree.leaf_partition_is_exact());
    }

    #[test]
    fn random_high_dim_points_satisfy_containment() {
        let mut rng = derive_rng(5, &[stream::INIT]);
        let points: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..64).map(|_| rng.gen::<f64>() * 10.0 - 5.0).collect())
            .collect();
        let tree = BallTree::build(points, 4).expect("tree");
        assert!(tree.max_containment_violation() <= 1e-9);
        assert!(tree.leaf_partition_is_exact());
    }

    #[test]
    fn knn_hand_case() {
        let tree = BallTree::build(points_1d(&[0.0, 1.0, 3.0]), 1).expect("tree");
        let got = tree.knn(0, 1).expect("knn");
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].0, 1);
        assert_eq!(got[0].1, 1.0);
    }

    #[test]
    fn knn_with_k_equals_n_minus_one_returns_all_sorted() {
        let tree = BallTree::build(points_1d(&[5.0, 0.0, 2.0, 9.0]), 1).expect("tree");
        let got = tree.knn(1, 3).expect("knn");
        let indices: Vec<usize> = got.iter().map(|g| g.0).collect();
        assert_eq!(indices, vec![2, 0, 3]);
        let dists: Vec<f64> = got.iter().map(|g| g.1).collect();
        assert_eq!(dists, vec![2.0, 5.0, 9.0]);
    }

    #[test]
    fn knn_rejects_out_of_range_k() {
        let tree = BallTree::build(points_1d(&[0.0, 1.0]), 1).expect("tree");
        assert!(matches!(tree.knn(0, 0), Err(Error::KnnRange { .. })));
        assert!(matches!(tree.knn(0, 2), Err(Error::KnnRange { .. })));
    }

    #[test]
    fn knn_matches_naive_oracle_on_random_queries() {
        let mut rng = derive_rng(9, &[stream::INIT]);
        let mut checked = 0;
        while checked < 500 {
            let n = rng.gen_range(2..40);
            let dim = rng.gen_range(1..16);
            let points: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..dim).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect())
                .collect();
            let tree = BallTree::build(points.clone(), rng.gen_range(1..4)).expect("tree");
            for _ in 0..3 {
                let q = rng.gen_range(0..n);
                let k = rng.gen_range(1..n);
                let got = tree.knn(q, k).expect("knn");
                let want = naive_knn(&points, q, k);
                let got_idx: Vec<usize> = got.iter().map(|g| g.0).collect();
                let want_idx: Vec<usize> = want.iter().map(|w| w.0).collect();
                assert_eq!(got_idx, want_idx, "index sets must match exactly");
                for (g, w) in got.iter().zip(want.iter()) {
                    assert!((g.1 - w.1).abs() <= 1e-9);
                }
                checked += 1;
            }
        }
    }

    #[test]
    fn knn_breaks_distance_ties_by_lower_index() {
        // Points 1 and 2 are equidistant from point 0.
        let points = points_1d(&[0.0, 1.0, -1.0, 5.0]);
        let tree = BallTree::build(points.clone(), 1).expect("tree");
        let got = tree.knn(0, 1).expect("knn");
        assert_eq!(got[0].0, 1);
        let got = tree.knn(0, 2).expect("knn");
        assert_eq!(got.iter().map(|g| g.0).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn cut_at_depth_zero_is_one_cluster() {
        let tree = BallTree::build(points_1d(&[0.0, 1.0, 2.0, 3.0]), 1).expect("tree");
        let clusters = tree.cluster_cut(0);
        assert_eq!(clusters.len(), 1);
        assert_eq!(clusters[&0], vec![0, 1, 2, 3]);
    }

    #[test]
    fn cut_below_leaves_yields_leaf_groups() {
        let tree = BallTree::build(points_1d(&[0.0, 1.0, 2.0, 3.0]), 1).expect("tree");
        let clusters = tree.cluster_cut(tree.height() + 3);
        assert_eq!(clusters.len(), 4);
        let mut all: Vec<usize> = clusters.values().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn well_separated_blobs_split_at_depth_one() {
        let tree = BallTree::build(points_1d(&[0.0, 0.1, 0.2, 10.0, 10.1]), 1).expect("tree");
        let clusters = tree.cluster_cut(1);
        assert_eq!(clusters.len(), 2);
        assert_eq!(clusters[&0], vec![0, 1, 2]);
        assert_eq!(clusters[&1], vec![3, 4]);
    }

    #[test]
    fn every_point_in_exactly_one_cluster_at_any_depth() {
        let mut rng = derive_rng(31, &[stream::INIT]);
        let points: Vec<Vec<f64>> = (0..37)
            .map(|_| (0..8).map(|_| rng.gen::<f64>()).collect())
            .collect();
        let tree = BallTree::build(points, 2).expect("tree");
        for depth in 0..=tree.height() + 1 {
            let clusters = tree.cluster_cut(depth);
            assert!(clusters.len() <= 1 << depth, "E <= 2^d");
            let mut all: Vec<usize> = clusters.values().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..37).collect::<Vec<_>>());
        }
    }
}
