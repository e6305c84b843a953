//! Synthetic inputs: stochastic block model graphs with block labels and
//! noisy one-hot features, plus planted miscalibration faults expressed as
//! group-dependent logit temperatures.

use crate::community::Partition;
use crate::graph::Graph;
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::{Error, Result};
use alloc::format;
use alloc::vec::Vec;

/// Gaussian noise added to the one-hot block features.
pub const FEATURE_NOISE_STD: f64 = 0.5;

/// Stochastic block model description.
#[derive(Debug, Clone, PartialEq)]
pub struct SbmSpec {
    pub block_sizes: Vec<usize>,
    pub p_in: f64,
    pub p_out: f64,
    pub seed: u64,
}

impl SbmSpec {
    pub fn num_nodes(&self) -> usize {
        self.block_sizes.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_sizes.is_empty() || self.block_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Argument("block sizes must be positive".into()));
        }
        for (name, p) in [("p_in", self.p_in), ("p_out", self.p_out)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Argument(format!(
                    "{name} = {p} outside [0, 1]"
                )));
            }
        }
        if self.p_out > self.p_in {
            return Err(Error::Argument(format!(
                "p_out = {} exceeds p_in = {}",
                self.p_out, self.p_in
            )));
        }
        Ok(())
    }
}

/// Generate an undirected SBM graph; labels are block ids, features are
/// one-hot block indicators plus seeded Gaussian noise (sigma 0.5).
pub fn gen_sbm(spec: &SbmSpec) -> Result<(Graph, Vec<i64>, Tensor)> {
    spec.validate()?;
    let n = spec.num_nodes();
    let num_blocks = spec.block_sizes.len();

    let mut labels = Vec::with_capacity(n);
    for (block, &size) in spec.block_sizes.iter().enumerate() {
        labels.extend(core::iter::repeat(block as i64).take(size));
    }

    let mut edge_rng = stream(spec.seed, "sbm-edges");
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if labels[i] == labels[j] {
                spec.p_in
            } else {
                spec.p_out
            };
            if edge_rng.next_f64() < p {
                edges.push((i, j, 1.0));
            }
        }
    }
    let graph = Graph::from_edges(n, &edges)?;

    let mut feat_rng = stream(spec.seed, "sbm-features");
    let mut features = Tensor::zeros(n, num_blocks);
    for i in 0..n {
        let row = features.row_mut(i);
        for (b, v) in row.iter_mut().enumerate() {
            let base = if b == labels[i] as usize { 1.0 } else { 0.0 };
            *v = base + FEATURE_NOISE_STD * feat_rng.next_gaussian();
        }
    }

    Ok((graph, labels, features))
}

/// Which nodes a planted fault targets.
#[derive(Debug, Clone, PartialEq)]
pub enum PlantTarget {
    /// The `ceil(fraction * N)` highest-degree nodes.
    TopDegree { fraction: f64 },
    /// All nodes with the given ground-truth class.
    Class { id: i64 },
    /// All nodes of the given community (requires a partition).
    Community { id: usize },
}

/// A planted distortion: targeted logit rows are divided by `tau`.
/// `tau < 1` sharpens the softmax, planting overconfidence.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantRule {
    pub target: PlantTarget,
    pub tau: f64,
}

impl PlantRule {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Argument(format!(
                "planted temperature must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Resolve a rule's target to a node mask.
pub fn resolve_target(
    target: &PlantTarget,
    g: &Graph,
    labels: &[i64],
    partition: Option<&Partition>,
) -> Result<Vec<bool>> {
    match target {
        PlantTarget::TopDegree { fraction } => g.top_degree_mask(*fraction),
        PlantTarget::Class { id } => Ok(labels.iter().map(|&y| y == *id).collect()),
        PlantTarget::Community { id } => {
            let p = partition.ok_or_else(|| {
                Error::Argument("community target needs a partition".into())
            })?;
            if *id >= p.num_communities() {
                return Err(Error::Argument(format!(
                    "community {id} outside [0, {})",
                    p.num_communities()
                )));
            }
            Ok((0..g.num_nodes()).map(|i| p.community_of(i) == *id).collect())
        }
    }
}

/// Apply the planted fault: targeted rows become `row / tau`, everything
/// else is untouched.
pub fn plant_miscalibration(
    logits: &Tensor,
    rule: &PlantRule,
    g: &Graph,
    labels: &[i64],
    partition: Option<&Partition>,
) -> Result<Tensor> {
    rule.validate()?;
    let mask = resolve_target(&rule.target, g, labels, partition)?;
    if mask.len() != logits.rows() {
        return Err(Error::Shape(format!(
            "target mask covers {} nodes but logits have {} rows",
            mask.len(),
            logits.rows()
        )));
    }
    let mut out = logits.clone();
    for (i, &hit) in mask.iter().enumerate() {
        if hit {
            for v in out.row_mut(i) {
                *v /= rule.tau;
            }
        }
    }
    Ok(out)
}
