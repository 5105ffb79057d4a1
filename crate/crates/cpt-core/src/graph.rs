//! Nearest-neighbour graphs over point clouds and the edge tensors built
//! from them.
//!
//! Graphs are recomputed from whatever feature space a layer currently sees,
//! so locality is feature locality, not just spatial locality. Construction
//! is not differentiated through; gradients flow through the gather that the
//! graph parameterizes, not through neighbour selection.
//!
//! Two builders produce byte-identical results: a quadratic scan that serves
//! as the reference, and a kd-tree that prunes by per-axis distance. Both
//! order candidates by `(distance^2, index)`, so ties resolve to the lowest
//! point index no matter which builder ran.

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::tape::{GatherIndex, Var};
use crate::tensor::Tensor;
use std::rc::Rc;

// ── Graph type ──────────────────────────────────────────────────────────────

/// k-nearest-neighbour graph for a batch of clouds. `neighbors` is a flat
/// `[batch, n, k]` table of point indices within each cloud, ordered from
/// nearest to farthest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnGraph {
    pub batch: usize,
    pub n: usize,
    pub k: usize,
    pub neighbors: Vec<usize>,
}

impl KnnGraph {
    /// Neighbour list of point `i` in cloud `b`, nearest first.
    pub fn neighbors_of(&self, b: usize, i: usize) -> &[usize] {
        let base = (b * self.n + i) * self.k;
        &self.neighbors[base..base + self.k]
    }

    /// Gather plan pulling each point's neighbour rows from a `[batch, n, f]`
    /// feature tensor.
    pub fn gather_index(&self) -> Rc<GatherIndex> {
        Rc::new(
            GatherIndex::new(self.batch, self.n, self.k, self.n, self.neighbors.clone())
                .expect("graph indices are in range by construction"),
        )
    }
}

fn check_knn_args<S: Elem>(
    feats: &Tensor<S>,
    k: usize,
    metric_channels: Option<usize>,
) -> Result<(usize, usize, usize, usize)> {
    if feats.ndim() != 3 {
        return Err(Error::Graph(format!(
            "features must be [batch, channels, n], got {:?}",
            feats.shape()
        )));
    }
    let (b, c, n) = (feats.shape()[0], feats.shape()[1], feats.shape()[2]);
    let m = metric_channels.unwrap_or(c);
    if m == 0 || m > c {
        return Err(Error::Graph(format!(
            "metric channels {m} out of range for {c} feature channels"
        )));
    }
    if k == 0 {
        return Err(Error::Graph("k must be at least 1".into()));
    }
    if k >= n {
        return Err(Error::Graph(format!(
            "k = {k} needs at least k + 1 points per cloud, got {n}; clamp k to at most n - 1"
        )));
    }
    // Non-finite metric features would poison every distance comparison, so
    // refuse them up front; a diverged run then reports divergence instead of
    // panicking inside a sort.
    for bi in 0..b {
        let metric = &feats.data()[bi * c * n..bi * c * n + m * n];
        if metric.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "knn" });
        }
    }
    Ok((b, c, n, m))
}

/// Squared distance between columns `i` and `j` over the first `m` channels.
/// Both graph builders call this, so their candidate orderings agree bit for
/// bit.
#[inline]
fn dist2<S: Elem>(data: &[S], c_stride: usize, m: usize, i: usize, j: usize) -> S {
    let mut acc = S::zero();
    let mut off = 0;
    for _ in 0..m {
        let d = data[off + i] - data[off + j];
        acc = acc + d * d;
        off += c_stride;
    }
    acc
}

/// Reference builder: for every point, scan all others and keep the k
/// closest by `(distance^2, index)`. Quadratic in cloud size.
pub fn knn_graph<S: Elem>(
    feats: &Tensor<S>,
    k: usize,
    metric_channels: Option<usize>,
) -> Result<KnnGraph> {
    let (b, c, n, m) = check_knn_args(feats, k, metric_channels)?;
    let data = feats.data();
    let mut neighbors = Vec::with_capacity(b * n * k);
    let mut cand: Vec<(S, usize)> = Vec::with_capacity(n - 1);
    for bi in 0..b {
        let cloud = &data[bi * c * n..(bi + 1) * c * n];
        for i in 0..n {
            cand.clear();
            for j in 0..n {
                if j != i {
                    cand.push((dist2(cloud, n, m, i, j), j));
                }
            }
            cand.sort_unstable_by(|a, b| {
                a.0.partial_cmp(&b.0)
                    .expect("distances are finite")
                    .then(a.1.cmp(&b.1))
            });
            neighbors.extend(cand[..k].iter().map(|&(_, j)| j));
        }
    }
    Ok(KnnGraph { batch: b, n, k, neighbors })
}

// ── kd-tree builder ─────────────────────────────────────────────────────────

struct KdNode {
    point: usize,
    axis: usize,
    left: i32,
    right: i32,
}

struct KdTree<'a, S: Elem> {
    cloud: &'a [S],
    n: usize,
    m: usize,
    nodes: Vec<KdNode>,
    root: i32,
}

impl<'a, S: Elem> KdTree<'a, S> {
    fn build(cloud: &'a [S], n: usize, m: usize) -> Self {
        let mut items: Vec<usize> = (0..n).collect();
        let mut tree = KdTree { cloud, n, m, nodes: Vec::with_capacity(n), root: -1 };
        tree.root = tree.build_rec(&mut items);
        tree
    }

    #[inline]
    fn coord(&self, p: usize, axis: usize) -> S {
        self.cloud[axis * self.n + p]
    }

    fn build_rec(&mut self, items: &mut [usize]) -> i32 {
        if items.is_empty() {
            return -1;
        }
        // Split on the widest axis so boxes stay fat and pruning stays sharp.
        let mut axis = 0;
        let mut widest = S::zero() - S::one();
        for a in 0..self.m {
            let mut lo = self.coord(items[0], a);
            let mut hi = lo;
            for &p in items.iter().skip(1) {
                let v = self.coord(p, a);
                if v < lo {
                    lo = v;
                }
                if v > hi {
                    hi = v;
                }
            }
            if hi - lo > widest {
                widest = hi - lo;
                axis = a;
            }
        }
        let mid = items.len() / 2;
        items.select_nth_unstable_by(mid, |&p, &q| {
            self.coord(p, axis)
                .partial_cmp(&self.coord(q, axis))
                .expect("coordinates are finite")
                .then(p.cmp(&q))
        });
        let point = items[mid];
        let (lo, hi) = items.split_at_mut(mid);
        let left = self.build_rec(lo);
        let right = self.build_rec(&mut hi[1..]);
        let id = self.nodes.len() as i32;
        self.nodes.push(KdNode { point, axis, left, right });
        id
    }

    fn query(&self, qi: usize, best: &mut Bounded<S>) {
        self.query_rec(self.root, qi, best);
    }

    fn query_rec(&self, node: i32, qi: usize, best: &mut Bounded<S>) {
        if node < 0 {
            return;
        }
        let nd = &self.nodes[node as usize];
        if nd.point != qi {
            best.offer(dist2(self.cloud, self.n, self.m, qi, nd.point), nd.point);
        }
        let diff = self.coord(qi, nd.axis) - self.coord(nd.point, nd.axis);
        let (near, far) = if diff < S::zero() { (nd.left, nd.right) } else { (nd.right, nd.left) };
        self.query_rec(near, qi, best);
        // Descend the far side unless every point there is provably worse
        // than the current worst candidate. Equal distances still descend, so
        // a tied point with a lower index can displace the worst.
        let axis_d2 = diff * diff;
        if !best.is_full() || axis_d2 <= best.worst().0 {
            self.query_rec(far, qi, best);
        }
    }
}

/// Fixed-capacity candidate list, sorted ascending by `(distance^2, index)`.
struct Bounded<S: Elem> {
    k: usize,
    items: Vec<(S, usize)>,
}

impl<S: Elem> Bounded<S> {
    fn new(k: usize) -> Self {
        Bounded { k, items: Vec::with_capacity(k + 1) }
    }

    fn is_full(&self) -> bool {
        self.items.len() == self.k
    }

    fn worst(&self) -> (S, usize) {
        *self.items.last().expect("worst() called on non-empty list")
    }

    fn offer(&mut self, d2: S, idx: usize) {
        if self.is_full() {
            let (wd, wi) = self.worst();
            if d2 > wd || (d2 == wd && idx > wi) {
                return;
            }
        }
        let pos = self
            .items
            .partition_point(|&(d, j)| d < d2 || (d == d2 && j < idx));
        self.items.insert(pos, (d2, idx));
        self.items.truncate(self.k);
    }
}

/// kd-tree builder. Returns exactly what [`knn_graph`] returns, including
/// tie-breaks, at `O(n log n)`-ish query cost in low dimensions.
pub fn accelerate_knn<S: Elem>(
    feats: &Tensor<S>,
    k: usize,
    metric_channels: Option<usize>,
) -> Result<KnnGraph> {
    let (b, c, n, m) = check_knn_args(feats, k, metric_channels)?;
    let data = feats.data();
    let mut neighbors = Vec::with_capacity(b * n * k);
    for bi in 0..b {
        let cloud = &data[bi * c * n..(bi + 1) * c * n];
        let tree = KdTree::build(cloud, n, m);
        for i in 0..n {
            let mut best = Bounded::new(k);
            tree.query(i, &mut best);
            debug_assert_eq!(best.items.len(), k, "every query must fill its candidate list");
            neighbors.extend(best.items.iter().map(|&(_, j)| j));
        }
    }
    Ok(KnnGraph { batch: b, n, k, neighbors })
}

// ── Edge features ───────────────────────────────────────────────────────────

/// What each edge carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeMode {
    /// Neighbour offsets only: `x_j - x_i`, giving `c` edge channels.
    Delta,
    /// Centre features alongside offsets: `[x_i, x_j - x_i]`, giving `2c`
    /// edge channels. The default; keeps absolute position available to the
    /// embedding.
    Concat,
}

impl EdgeMode {
    pub fn edge_channels(&self, c: usize) -> usize {
        match self {
            EdgeMode::Delta => c,
            EdgeMode::Concat => 2 * c,
        }
    }
}

/// Builds the edge tensor `[batch, edge_channels, n, k]` from point features
/// `[batch, c, n]` and a graph. Differentiable with respect to the features.
pub fn edge_features<S: Elem>(x: &Var<S>, graph: &KnnGraph, mode: EdgeMode) -> Result<Var<S>> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::shape(
            "edge_features",
            format!("point features must be [batch, c, n], got {shape:?}"),
        ));
    }
    let (b, c, n) = (shape[0], shape[1], shape[2]);
    if b != graph.batch || n != graph.n {
        return Err(Error::shape(
            "edge_features",
            format!(
                "features [{b}, {c}, {n}] do not match graph [batch {}, n {}]",
                graph.batch, graph.n
            ),
        ));
    }
    x.edge_gather(graph.gather_index(), mode == EdgeMode::Concat)
}

// ── Tests ───────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use rand::Rng;

    fn line_cloud(xs: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![1, 1, xs.len()], xs.to_vec()).unwrap()
    }

    #[test]
    fn knn_on_a_line_matches_hand_computation() {
        let g = knn_graph(&line_cloud(&[0.0, 1.0, 3.0, 7.0]), 2, None).unwrap();
        assert_eq!(g.neighbors_of(0, 0), &[1, 2]);
        assert_eq!(g.neighbors_of(0, 1), &[0, 2]);
        assert_eq!(g.neighbors_of(0, 2), &[1, 0]);
        assert_eq!(g.neighbors_of(0, 3), &[2, 1]);
    }

    #[test]
    fn knn_ties_resolve_to_lowest_index() {
        // Points 1, 2, 3 are all at distance 1 from point 0.
        let g = knn_graph(&line_cloud(&[0.0, 1.0, -1.0, 1.0]), 2, None).unwrap();
        assert_eq!(g.neighbors_of(0, 0), &[1, 2], "equidistant neighbours sort by index");
    }

    #[test]
    fn knn_never_reports_self() {
        let t = Tensor::new(vec![1, 2, 5], vec![0.0; 10]).unwrap(); // all identical points
        let g = knn_graph(&t, 4, None).unwrap();
        for i in 0..5 {
            assert!(!g.neighbors_of(0, i).contains(&i), "point {i} listed itself");
        }
    }

    #[test]
    fn knn_rejects_k_not_less_than_n() {
        let err = knn_graph(&line_cloud(&[0.0, 1.0, 2.0]), 3, None).unwrap_err();
        assert!(err.to_string().contains("clamp k"), "{err}");
    }

    #[test]
    fn knn_rejects_non_finite_metric_features() {
        let bad = line_cloud(&[0.0, f64::NAN, 2.0]);
        for build in [knn_graph::<f64>, accelerate_knn::<f64>] {
            let err = build(&bad, 1, None).unwrap_err();
            assert!(
                matches!(err, Error::NonFinite { .. }),
                "NaN features must surface as divergence, got {err}"
            );
        }
        // Non-finite values outside the metric channels never join a distance.
        let t = Tensor::new(vec![1, 2, 3], vec![0.0, 1.0, 5.0, 0.0, f64::INFINITY, 1.0]).unwrap();
        assert!(knn_graph(&t, 1, Some(1)).is_ok(), "unused channels may be non-finite");
    }

    #[test]
    fn metric_channels_restrict_the_distance() {
        // Channel 0 orders neighbours one way, channel 1 would reverse it.
        let t = Tensor::new(
            vec![1, 2, 3],
            vec![
                0.0, 1.0, 5.0, // channel 0
                0.0, 9.0, 1.0, // channel 1
            ],
        )
        .unwrap();
        let only_first = knn_graph(&t, 1, Some(1)).unwrap();
        assert_eq!(only_first.neighbors_of(0, 0), &[1]);
        let both = knn_graph(&t, 1, None).unwrap();
        assert_eq!(both.neighbors_of(0, 0), &[2], "channel 1 dominates the full metric");
    }

    #[test]
    fn kd_tree_matches_reference_on_random_clouds_with_ties() {
        let mut rng = crate::rng::stream(99, "kd-test");
        for trial in 0..20 {
            let n = 40;
            let b = 2;
            let mut data = Vec::with_capacity(b * 3 * n);
            for _ in 0..b * 3 * n {
                // Coarse grid coordinates force plenty of exact ties.
                data.push((rng.random_range(0..5) as f64) * 0.5);
            }
            let t = Tensor::new(vec![b, 3, n], data).unwrap();
            for k in [1usize, 5, 39] {
                let brute = knn_graph(&t, k, None).unwrap();
                let fast = accelerate_knn(&t, k, None).unwrap();
                assert_eq!(brute, fast, "builders disagree on trial {trial}, k = {k}");
            }
        }
    }

    #[test]
    fn edge_features_delta_is_neighbour_minus_centre() {
        let tape = Tape::new();
        let x = tape.constant(line_cloud(&[0.0, 1.0, 3.0]));
        let g = knn_graph(&x.value(), 1, None).unwrap();
        assert_eq!(g.neighbors, vec![1, 0, 1]);
        let e = edge_features(&x, &g, EdgeMode::Delta).unwrap();
        assert_eq!(e.shape(), vec![1, 1, 3, 1]);
        assert_eq!(e.value().data(), &[1.0, -1.0, -2.0]);
    }

    #[test]
    fn edge_features_concat_prepends_centre_channels() {
        let tape = Tape::new();
        let x = tape.constant(line_cloud(&[0.0, 1.0, 3.0]));
        let g = knn_graph(&x.value(), 1, None).unwrap();
        let e = edge_features(&x, &g, EdgeMode::Concat).unwrap();
        assert_eq!(e.shape(), vec![1, 2, 3, 1]);
        assert_eq!(e.value().data(), &[0.0, 1.0, 3.0, 1.0, -1.0, -2.0]);
    }

    #[test]
    fn edge_features_flow_gradients_to_points() {
        let tape = Tape::new();
        let x = tape.leaf(line_cloud(&[0.0, 1.0, 3.0]), true);
        let g = knn_graph(&x.value(), 1, None).unwrap();
        let e = edge_features(&x, &g, EdgeMode::Delta).unwrap();
        e.sum_all().unwrap().backward().unwrap();
        // d(sum of deltas)/dx_i = (times gathered as neighbour) - (times centre).
        // Gathered counts: point 0 once, point 1 twice, point 2 never.
        assert_eq!(x.grad().unwrap().data(), &[0.0, 1.0, -1.0]);
    }
}
