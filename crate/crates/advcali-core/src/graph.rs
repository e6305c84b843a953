//! Sparse undirected graphs in compressed-row form, the GCN propagation
//! operator, degree utilities, and the node dataset carried through the
//! calibration pipeline.

use crate::fmath;
use crate::tensor::Tensor;
use crate::{Error, Result};
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

/// Compressed sparse row matrix with `f64` values.
///
/// Shared between [`Graph`], [`NormalizedAdjacency`], and the tape's
/// sparse-dense product via `Arc`, so recording an op never copies the
/// structure.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_offsets: Vec<usize>,
    pub col_indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// `y = M x` for dense row-major `x` (n x c), writing into `out`.
    pub fn mul_dense(&self, x: &Tensor, out: &mut Tensor) {
        debug_assert_eq!(x.rows(), self.n);
        debug_assert_eq!(out.shape(), x.shape());
        let c = x.cols();
        for i in 0..self.n {
            let row = out.row_mut(i);
            row.fill(0.0);
            for k in self.row_offsets[i]..self.row_offsets[i + 1] {
                let j = self.col_indices[k];
                let w = self.values[k];
                let xj = x.row(j);
                for (o, &v) in row.iter_mut().zip(xj.iter().take(c)) {
                    *o += w * v;
                }
            }
        }
    }

    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }
}

/// Undirected simple graph: symmetric adjacency, no stored self-loops.
#[derive(Debug, Clone)]
pub struct Graph {
    csr: Arc<CsrMatrix>,
}

impl Graph {
    /// Build from an edge list.
    ///
    /// Edges may be given in one direction only; the adjacency is
    /// symmetrized. Duplicate mentions of the same unordered pair collapse to
    /// one edge (the first weight seen wins) and self-loops are dropped.
    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut pairs: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for &(u, v, w) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::Validation(format!(
                    "edge ({u},{v}) references a node outside [0, {num_nodes})"
                )));
            }
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Validation(format!(
                    "edge ({u},{v}) has invalid weight {w}"
                )));
            }
            if u == v {
                continue;
            }
            let key = (u.min(v), u.max(v));
            pairs.entry(key).or_insert(w);
        }

        let mut neighbor_count = vec![0usize; num_nodes];
        for &(u, v) in pairs.keys() {
            neighbor_count[u] += 1;
            neighbor_count[v] += 1;
        }
        let mut row_offsets = vec![0usize; num_nodes + 1];
        for i in 0..num_nodes {
            row_offsets[i + 1] = row_offsets[i] + neighbor_count[i];
        }
        let nnz = row_offsets[num_nodes];
        let mut col_indices = vec![0usize; nnz];
        let mut values = vec![0.0; nnz];
        let mut cursor = row_offsets.clone();
        // BTreeMap iteration is ordered, so each row's neighbors come out
        // ascending without a per-row sort.
        for (&(u, v), &w) in pairs.iter() {
            col_indices[cursor[u]] = v;
            values[cursor[u]] = w;
            cursor[u] += 1;
        }
        for (&(u, v), &w) in pairs.iter() {
            col_indices[cursor[v]] = u;
            values[cursor[v]] = w;
            cursor[v] += 1;
        }
        // The second pass appends the reverse direction, which can interleave
        // out of order with the first; restore ascending neighbor order.
        let mut perm: Vec<usize> = Vec::new();
        for i in 0..num_nodes {
            let lo = row_offsets[i];
            let hi = row_offsets[i + 1];
            perm.clear();
            perm.extend(lo..hi);
            perm.sort_by_key(|&k| col_indices[k]);
            let cols: Vec<usize> = perm.iter().map(|&k| col_indices[k]).collect();
            let vals: Vec<f64> = perm.iter().map(|&k| values[k]).collect();
            col_indices[lo..hi].copy_from_slice(&cols);
            values[lo..hi].copy_from_slice(&vals);
        }

        Ok(Graph {
            csr: Arc::new(CsrMatrix {
                n: num_nodes,
                row_offsets,
                col_indices,
                values,
            }),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.csr.n
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.csr.nnz() / 2
    }

    pub fn csr(&self) -> &Arc<CsrMatrix> {
        &self.csr
    }

    /// Neighbors of `i` with weights, ascending by neighbor index.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.csr.row_offsets[i];
        let hi = self.csr.row_offsets[i + 1];
        (lo..hi).map(move |k| (self.csr.col_indices[k], self.csr.values[k]))
    }

    /// Structural degree of every node (self-loops are never stored).
    pub fn degrees(&self) -> Vec<usize> {
        (0..self.csr.n)
            .map(|i| self.csr.row_offsets[i + 1] - self.csr.row_offsets[i])
            .collect()
    }

    /// Sum of edge weights incident to `i`.
    pub fn weighted_degree(&self, i: usize) -> f64 {
        (self.csr.row_offsets[i]..self.csr.row_offsets[i + 1])
            .map(|k| self.csr.values[k])
            .sum()
    }

    /// Total edge weight (each undirected edge counted once).
    pub fn total_weight(&self) -> f64 {
        self.csr.values.iter().sum::<f64>() / 2.0
    }

    /// Mark the `ceil(fraction * N)` highest-degree nodes, ranking by degree
    /// descending and breaking ties by ascending node index.
    pub fn top_degree_mask(&self, fraction: f64) -> Result<Vec<bool>> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Argument(format!(
                "fraction must lie in (0, 1], got {fraction}"
            )));
        }
        let n = self.csr.n;
        let k = fmath::ceil(fraction * n as f64) as usize;
        let degs = self.degrees();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| degs[b].cmp(&degs[a]).then(a.cmp(&b)));
        let mut mask = vec![false; n];
        for &i in order.iter().take(k.min(n)) {
            mask[i] = true;
        }
        Ok(mask)
    }

    /// Symmetrically normalized propagation operator with self-loops added,
    /// values `w_ij / sqrt(d_i * d_j)` where `d` are the row sums after the
    /// unit self-loop is inserted.
    pub fn gcn_normalize(&self) -> NormalizedAdjacency {
        let n = self.csr.n;
        let mut deg_hat = vec![1.0f64; n];
        for i in 0..n {
            deg_hat[i] += self.weighted_degree(i);
        }
        let inv_sqrt: Vec<f64> = deg_hat.iter().map(|&d| 1.0 / fmath::sqrt(d)).collect();

        let mut row_offsets = vec![0usize; n + 1];
        for i in 0..n {
            let deg = self.csr.row_offsets[i + 1] - self.csr.row_offsets[i];
            row_offsets[i + 1] = row_offsets[i] + deg + 1;
        }
        let nnz = row_offsets[n];
        let mut col_indices = vec![0usize; nnz];
        let mut values = vec![0.0; nnz];
        for i in 0..n {
            let mut at = row_offsets[i];
            let mut diagonal_placed = false;
            for k in self.csr.row_offsets[i]..self.csr.row_offsets[i + 1] {
                let j = self.csr.col_indices[k];
                if !diagonal_placed && j > i {
                    col_indices[at] = i;
                    values[at] = inv_sqrt[i] * inv_sqrt[i];
                    at += 1;
                    diagonal_placed = true;
                }
                col_indices[at] = j;
                values[at] = self.csr.values[k] * inv_sqrt[i] * inv_sqrt[j];
                at += 1;
            }
            if !diagonal_placed {
                col_indices[at] = i;
                values[at] = inv_sqrt[i] * inv_sqrt[i];
            }
        }

        NormalizedAdjacency {
            csr: Arc::new(CsrMatrix {
                n,
                row_offsets,
                col_indices,
                values,
            }),
        }
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}`, the message-passing operator of the GCN
/// calibration model.
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    csr: Arc<CsrMatrix>,
}

impl NormalizedAdjacency {
    pub fn num_nodes(&self) -> usize {
        self.csr.n
    }

    pub fn csr(&self) -> &Arc<CsrMatrix> {
        &self.csr
    }

    pub fn value_at(&self, i: usize, j: usize) -> f64 {
        for k in self.csr.row_offsets[i]..self.csr.row_offsets[i + 1] {
            if self.csr.col_indices[k] == j {
                return self.csr.values[k];
            }
        }
        0.0
    }
}

/// Logits, labels, and split masks for one calibration problem.
///
/// `labels[i] < 0` marks a node with no ground truth. Immutable after
/// validation.
#[derive(Debug, Clone)]
pub struct NodeDataset {
    pub logits: Tensor,
    pub labels: Vec<i64>,
    pub labeled_mask: Vec<bool>,
    pub test_mask: Vec<bool>,
    pub num_classes: usize,
}

impl NodeDataset {
    pub fn new(
        logits: Tensor,
        labels: Vec<i64>,
        labeled_mask: Vec<bool>,
        test_mask: Vec<bool>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = logits.rows();
        if logits.cols() != num_classes {
            return Err(Error::Shape(format!(
                "logits have {} columns but num_classes is {num_classes}",
                logits.cols()
            )));
        }
        if labels.len() != n || labeled_mask.len() != n || test_mask.len() != n {
            return Err(Error::Shape(format!(
                "labels/masks lengths ({}, {}, {}) do not match {n} logit rows",
                labels.len(),
                labeled_mask.len(),
                test_mask.len()
            )));
        }
        if !logits.is_finite() {
            return Err(Error::Numeric("logits contain non-finite values".into()));
        }
        for i in 0..n {
            if labeled_mask[i] && test_mask[i] {
                return Err(Error::Validation(format!(
                    "node {i} appears in both labeled and test masks"
                )));
            }
            if labels[i] >= num_classes as i64 {
                return Err(Error::Validation(format!(
                    "label {} of node {i} is outside [0, {num_classes})",
                    labels[i]
                )));
            }
            if labeled_mask[i] && labels[i] < 0 {
                return Err(Error::Validation(format!(
                    "labeled node {i} has no valid label"
                )));
            }
        }
        Ok(NodeDataset {
            logits,
            labels,
            labeled_mask,
            test_mask,
            num_classes,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.logits.rows()
    }

    /// Indices selected by a boolean mask.
    pub fn mask_indices(mask: &[bool]) -> Vec<usize> {
        mask.iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triangle() -> Graph {
        Graph::from_edges(3, &[(0, 1, 1.0), (1, 2, 1.0), (2, 0, 1.0)]).unwrap()
    }

    #[test]
    fn triangle_degrees() {
        assert_eq!(triangle().degrees(), vec![2, 2, 2]);
    }

    #[test]
    fn one_directional_edge_is_symmetrized() {
        let g = Graph::from_edges(2, &[(0, 1, 1.0)]).unwrap();
        assert_eq!(g.neighbors(0).collect::<Vec<_>>(), vec![(1, 1.0)]);
        assert_eq!(g.neighbors(1).collect::<Vec<_>>(), vec![(0, 1.0)]);
        assert_eq!(g.num_edges(), 1);
    }

    #[test]
    fn duplicates_collapse_and_self_loops_drop() {
        let g = Graph::from_edges(3, &[(0, 1, 1.0), (1, 0, 1.0), (2, 2, 5.0)]).unwrap();
        assert_eq!(g.num_edges(), 1);
        assert_eq!(g.degrees(), vec![1, 1, 0]);
    }

    #[test]
    fn out_of_range_edge_rejected() {
        assert!(Graph::from_edges(2, &[(0, 5, 1.0)]).is_err());
    }

    #[test]
    fn star_degrees() {
        let g = Graph::from_edges(
            5,
            &[(0, 1, 1.0), (0, 2, 1.0), (0, 3, 1.0), (0, 4, 1.0)],
        )
        .unwrap();
        assert_eq!(g.degrees(), vec![4, 1, 1, 1, 1]);
    }

    #[test]
    fn empty_graph_degrees_zero() {
        let g = Graph::from_edges(4, &[]).unwrap();
        assert_eq!(g.degrees(), vec![0, 0, 0, 0]);
    }

    #[test]
    fn degrees_sum_to_twice_edge_count() {
        let g = Graph::from_edges(
            6,
            &[
                (0, 1, 1.0),
                (1, 2, 1.0),
                (2, 3, 1.0),
                (3, 4, 1.0),
                (4, 5, 1.0),
                (5, 0, 1.0),
                (1, 4, 1.0),
            ],
        )
        .unwrap();
        let total: usize = g.degrees().iter().sum();
        assert_eq!(total, 2 * g.num_edges());
    }

    #[test]
    fn gcn_normalize_isolated_node() {
        let g = Graph::from_edges(1, &[]).unwrap();
        let a = g.gcn_normalize();
        assert_eq!(a.value_at(0, 0), 1.0);
    }

    #[test]
    fn gcn_normalize_single_edge() {
        let g = Graph::from_edges(2, &[(0, 1, 1.0)]).unwrap();
        let a = g.gcn_normalize();
        for i in 0..2 {
            for j in 0..2 {
                assert!((a.value_at(i, j) - 0.5).abs() < 1e-15, "entry {i},{j}");
            }
        }
    }

    #[test]
    fn gcn_normalize_triangle() {
        let a = triangle().gcn_normalize();
        for i in 0..3 {
            for j in 0..3 {
                assert!((a.value_at(i, j) - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gcn_normalize_symmetric_positive_diagonal() {
        let g = Graph::from_edges(
            5,
            &[(0, 1, 1.0), (0, 2, 2.0), (2, 3, 1.0), (3, 4, 0.5)],
        )
        .unwrap();
        let a = g.gcn_normalize();
        for i in 0..5 {
            assert!(a.value_at(i, i) > 0.0);
            for j in 0..5 {
                assert!((a.value_at(i, j) - a.value_at(j, i)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn top_degree_star_quarter() {
        // 1 hub + 7 leaves, fraction 0.25 -> k = 2: hub then lowest-index leaf.
        let edges: Vec<(usize, usize, f64)> = (1..8).map(|i| (0, i, 1.0)).collect();
        let g = Graph::from_edges(8, &edges).unwrap();
        let mask = g.top_degree_mask(0.25).unwrap();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 2);
        assert!(mask[0] && mask[1]);
    }

    #[test]
    fn top_degree_full_fraction_selects_all() {
        let g = triangle();
        let mask = g.top_degree_mask(1.0).unwrap();
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn top_degree_ties_break_by_index() {
        let g = Graph::from_edges(4, &[(0, 1, 1.0), (2, 3, 1.0)]).unwrap();
        let mask = g.top_degree_mask(0.5).unwrap();
        assert_eq!(mask, vec![true, true, false, false]);
    }

    #[test]
    fn top_degree_cardinality_exact() {
        let g = Graph::from_edges(7, &[(0, 1, 1.0), (1, 2, 1.0)]).unwrap();
        for (frac, expect) in [(0.1, 1), (0.3, 3), (0.5, 4), (1.0, 7)] {
            let mask = g.top_degree_mask(frac).unwrap();
            assert_eq!(mask.iter().filter(|&&m| m).count(), expect, "frac {frac}");
        }
    }

    #[test]
    fn top_degree_rejects_bad_fraction() {
        let g = triangle();
        assert!(g.top_degree_mask(0.0).is_err());
        assert!(g.top_degree_mask(1.5).is_err());
    }

    #[test]
    fn dataset_rejects_overlapping_masks() {
        let logits = Tensor::zeros(2, 2);
        let err = NodeDataset::new(
            logits,
            vec![0, 1],
            vec![true, false],
            vec![true, false],
            2,
        );
        assert!(err.is_err());
    }

    #[test]
    fn dataset_rejects_labeled_without_label() {
        let logits = Tensor::zeros(2, 2);
        let err = NodeDataset::new(logits, vec![-1, 1], vec![true, false], vec![false, true], 2);
        assert!(err.is_err());
    }

    #[test]
    fn dataset_rejects_label_out_of_range() {
        let logits = Tensor::zeros(2, 2);
        let err = NodeDataset::new(logits, vec![0, 2], vec![true, true], vec![false, false], 2);
        assert!(err.is_err());
    }
}
