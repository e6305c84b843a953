//! Calibration and detection models.
//!
//! [`GcnTemperatureScaler`] maps logits plus graph structure to a strictly
//! positive per-node temperature. [`GinGroupDetector`] maps the scaled
//! logits to a row-stochastic soft group assignment. [`ts_fit`] and
//! [`vs_fit`] are the global temperature-scaling and vector-scaling
//! baselines.

use crate::diff::{NodeId, Tape};
use crate::fmath;
use crate::graph::{Graph, NormalizedAdjacency};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::{Error, Result};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

/// Default floor added to the softplus output of the temperature head.
pub const DEFAULT_T_MIN: f64 = 1e-3;

/// Glorot-uniform tensor: entries uniform in `[-b, b]`, `b = sqrt(6 / (fan_in + fan_out))`.
fn glorot(rng: &mut SplitMix64, rows: usize, cols: usize) -> Tensor {
    let bound = fmath::sqrt(6.0 / (rows + cols) as f64);
    let mut t = Tensor::zeros(rows, cols);
    for v in t.values_mut() {
        *v = rng.next_uniform_symmetric(bound);
    }
    t
}

/// Strictly positive per-node temperatures.
#[derive(Debug, Clone)]
pub struct TemperatureVector {
    values: Vec<f64>,
}

impl TemperatureVector {
    pub fn new(values: Vec<f64>, t_min: f64) -> Result<Self> {
        if let Some(bad) = values.iter().find(|&&t| !(t >= t_min) || !t.is_finite()) {
            return Err(Error::Domain(format!(
                "temperature {bad} below the floor {t_min}"
            )));
        }
        Ok(TemperatureVector { values })
    }

    pub fn from_tensor(t: &Tensor, t_min: f64) -> Result<Self> {
        if t.cols() != 1 {
            return Err(Error::Shape(format!(
                "temperature vector must be Nx1, got {}x{}",
                t.rows(),
                t.cols()
            )));
        }
        Self::new(t.values().to_vec(), t_min)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Row-stochastic soft group assignment (N x K).
#[derive(Debug, Clone)]
pub struct GroupWeights {
    weights: Tensor,
}

impl GroupWeights {
    /// Validates each row sums to 1 within 1e-9.
    pub fn from_tensor(weights: Tensor) -> Result<Self> {
        for r in 0..weights.rows() {
            let sum: f64 = weights.row(r).iter().sum();
            if fmath::abs(sum - 1.0) > 1e-9 {
                return Err(Error::Validation(format!(
                    "group weight row {r} sums to {sum}, expected 1"
                )));
            }
            if weights.row(r).iter().any(|&v| v < 0.0) {
                return Err(Error::Validation(format!(
                    "group weight row {r} has a negative entry"
                )));
            }
        }
        Ok(GroupWeights { weights })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.weights
    }

    pub fn num_groups(&self) -> usize {
        self.weights.cols()
    }

    /// Hard assignment of each node: argmax over groups, ties to the lowest
    /// group index.
    pub fn hard_assignment(&self) -> Vec<usize> {
        self.weights.row_argmax()
    }
}

/// Two-layer GCN that outputs `softplus(raw) + t_min` node temperatures.
#[derive(Debug, Clone)]
pub struct GcnTemperatureScaler {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub t_min: f64,
}

/// Tape handles for the scaler's parameters.
#[derive(Debug, Clone, Copy)]
pub struct FcNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl FcNodes {
    pub fn ids(&self) -> [NodeId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

impl GcnTemperatureScaler {
    /// Glorot-uniform weights, zero biases.
    pub fn init(num_classes: usize, hidden: usize, t_min: f64, rng: &mut SplitMix64) -> Self {
        GcnTemperatureScaler {
            w1: glorot(rng, num_classes, hidden),
            b1: Tensor::zeros(1, hidden),
            w2: glorot(rng, hidden, 1),
            b2: Tensor::zeros(1, 1),
            t_min,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.w1.rows()
    }

    pub fn params(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// Put the current parameters on a tape.
    pub fn stage(&self, tape: &mut Tape) -> Result<FcNodes> {
        Ok(FcNodes {
            w1: tape.param(self.w1.clone())?,
            b1: tape.param(self.b1.clone())?,
            w2: tape.param(self.w2.clone())?,
            b2: tape.param(self.b2.clone())?,
        })
    }

    /// `t = softplus(A (relu(A Z W1 + b1)) W2 + b2) + t_min`, an `N x 1`
    /// column of temperatures.
    pub fn forward(
        &self,
        tape: &mut Tape,
        nodes: &FcNodes,
        adj: &NormalizedAdjacency,
        z: NodeId,
    ) -> Result<NodeId> {
        let zw = tape.matmul(z, nodes.w1)?;
        let prop1 = tape.spmm(adj.csr(), zw)?;
        let pre1 = tape.add_row(prop1, nodes.b1)?;
        let h1 = tape.relu(pre1)?;
        let hw = tape.matmul(h1, nodes.w2)?;
        let prop2 = tape.spmm(adj.csr(), hw)?;
        let pre2 = tape.add_row(prop2, nodes.b2)?;
        let sp = tape.softplus(pre2)?;
        tape.affine(sp, 1.0, self.t_min)
    }
}

/// Divide each logit row by its temperature and renormalize:
/// returns `(scaled logits, probabilities)`.
pub fn scale_logits(tape: &mut Tape, z: NodeId, t: NodeId) -> Result<(NodeId, NodeId)> {
    let zhat = tape.div_rows(z, t)?;
    let phat = tape.softmax_rows(zhat)?;
    Ok((zhat, phat))
}

/// One GIN layer's MLP: `lin(in, d) -> relu -> lin(d, d)`.
#[derive(Debug, Clone)]
pub struct GinLayer {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl GinLayer {
    fn init(input_dim: usize, hidden: usize, rng: &mut SplitMix64) -> Self {
        GinLayer {
            w1: glorot(rng, input_dim, hidden),
            b1: Tensor::zeros(1, hidden),
            w2: glorot(rng, hidden, hidden),
            b2: Tensor::zeros(1, hidden),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct GinLayerNodes {
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

/// Tape handles for the detector's parameters.
#[derive(Debug, Clone, Copy)]
pub struct GinNodes {
    layers: [GinLayerNodes; 2],
    proj: NodeId,
}

impl GinNodes {
    /// Parameter handles in declared order (layer 1, layer 2, projection).
    pub fn ids(&self) -> [NodeId; 9] {
        [
            self.layers[0].w1,
            self.layers[0].b1,
            self.layers[0].w2,
            self.layers[0].b2,
            self.layers[1].w1,
            self.layers[1].b1,
            self.layers[1].w2,
            self.layers[1].b2,
            self.proj,
        ]
    }
}

/// Two GIN layers (sum aggregation, fixed eps = 0) plus a linear projection
/// into K groups, row-softmaxed.
#[derive(Debug, Clone)]
pub struct GinGroupDetector {
    pub layer1: GinLayer,
    pub layer2: GinLayer,
    pub proj: Tensor,
}

impl GinGroupDetector {
    pub fn init(input_dim: usize, hidden: usize, num_groups: usize, rng: &mut SplitMix64) -> Self {
        GinGroupDetector {
            layer1: GinLayer::init(input_dim, hidden, rng),
            layer2: GinLayer::init(hidden, hidden, rng),
            proj: glorot(rng, hidden, num_groups),
        }
    }

    pub fn num_groups(&self) -> usize {
        self.proj.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.proj.rows()
    }

    pub fn params(&self) -> [&Tensor; 9] {
        [
            &self.layer1.w1,
            &self.layer1.b1,
            &self.layer1.w2,
            &self.layer1.b2,
            &self.layer2.w1,
            &self.layer2.b1,
            &self.layer2.w2,
            &self.layer2.b2,
            &self.proj,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.layer1.w1,
            &mut self.layer1.b1,
            &mut self.layer1.w2,
            &mut self.layer1.b2,
            &mut self.layer2.w1,
            &mut self.layer2.b1,
            &mut self.layer2.w2,
            &mut self.layer2.b2,
            &mut self.proj,
        ]
    }

    pub fn stage(&self, tape: &mut Tape) -> Result<GinNodes> {
        let stage_layer = |tape: &mut Tape, l: &GinLayer| -> Result<GinLayerNodes> {
            Ok(GinLayerNodes {
                w1: tape.param(l.w1.clone())?,
                b1: tape.param(l.b1.clone())?,
                w2: tape.param(l.w2.clone())?,
                b2: tape.param(l.b2.clone())?,
            })
        };
        Ok(GinNodes {
            layers: [
                stage_layer(tape, &self.layer1)?,
                stage_layer(tape, &self.layer2)?,
            ],
            proj: tape.param(self.proj.clone())?,
        })
    }

    fn layer_forward(
        tape: &mut Tape,
        nodes: GinLayerNodes,
        graph: &Graph,
        h: NodeId,
    ) -> Result<NodeId> {
        // (1 + eps) h_i + sum_{j in N(i)} h_j with eps = 0; sum aggregation
        // uses the raw adjacency.
        let neighbor_sum = tape.spmm(graph.csr(), h)?;
        let agg = tape.add(h, neighbor_sum)?;
        let x1 = tape.matmul(agg, nodes.w1)?;
        let x1b = tape.add_row(x1, nodes.b1)?;
        let act = tape.relu(x1b)?;
        let x2 = tape.matmul(act, nodes.w2)?;
        tape.add_row(x2, nodes.b2)
    }

    /// `G = softmax(GIN(A, zhat) W)`, rows summing to 1.
    pub fn forward(
        &self,
        tape: &mut Tape,
        nodes: &GinNodes,
        graph: &Graph,
        zhat: NodeId,
    ) -> Result<NodeId> {
        let h1 = Self::layer_forward(tape, nodes.layers[0], graph, zhat)?;
        let h2 = Self::layer_forward(tape, nodes.layers[1], graph, h1)?;
        let logits = tape.matmul(h2, nodes.proj)?;
        tape.softmax_rows(logits)
    }
}

/// Class-wise affine scaling parameters of the vector-scaling baseline.
#[derive(Debug, Clone)]
pub struct VectorScalingParams {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl VectorScalingParams {
    /// `z'_{i,c} = w_c z_{i,c} + b_c`.
    pub fn apply(&self, z: &Tensor) -> Tensor {
        let mut out = z.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = self.w[c] * *v + self.b[c];
            }
        }
        out
    }
}

/// Masked mean cross-entropy of `softmax(z)` rows, no tape involved.
fn masked_mean_ce(z: &Tensor, labels: &[i64], mask: &[usize]) -> f64 {
    let mut total = 0.0;
    for &i in mask {
        let row = z.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + fmath::ln(row.iter().map(|&v| fmath::exp(v - max)).sum::<f64>());
        total += lse - row[labels[i] as usize];
    }
    total / mask.len() as f64
}

/// Fit a single global temperature by golden-section search on `ln T` over
/// `[ln 0.05, ln 10]` to tolerance 1e-4, minimizing cross-entropy of
/// `softmax(Z / T)` on the masked nodes.
pub fn ts_fit(z: &Tensor, labels: &[i64], mask: &[bool]) -> Result<f64> {
    let idx = indices_of(mask);
    if idx.is_empty() {
        return Err(Error::Argument(
            "temperature fit needs a nonempty mask".into(),
        ));
    }
    for &i in &idx {
        if labels[i] < 0 || labels[i] as usize >= z.cols() {
            return Err(Error::Validation(format!(
                "masked node {i} lacks a valid label"
            )));
        }
    }
    let objective = |x: f64| {
        let t = fmath::exp(x);
        let mut scaled = z.clone();
        for v in scaled.values_mut() {
            *v /= t;
        }
        masked_mean_ce(&scaled, labels, &idx)
    };

    let mut lo = fmath::ln(0.05);
    let mut hi = fmath::ln(10.0);
    let inv_phi = (fmath::sqrt(5.0) - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = objective(x1);
    let mut f2 = objective(x2);
    while hi - lo > 1e-4 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = objective(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = objective(x2);
        }
    }
    Ok(fmath::exp((lo + hi) / 2.0))
}

/// Fit class-wise scaling by full-batch gradient descent on the masked
/// cross-entropy: 2000 steps at step size 0.01 from `w = 1, b = 0`.
pub fn vs_fit(z: &Tensor, labels: &[i64], mask: &[bool]) -> Result<VectorScalingParams> {
    let idx = indices_of(mask);
    if idx.is_empty() {
        return Err(Error::Argument(
            "vector scaling needs a nonempty mask".into(),
        ));
    }
    let c = z.cols();
    for &i in &idx {
        if labels[i] < 0 || labels[i] as usize >= c {
            return Err(Error::Validation(format!(
                "masked node {i} lacks a valid label"
            )));
        }
    }
    let mut params = VectorScalingParams {
        w: vec![1.0; c],
        b: vec![0.0; c],
    };
    let lr = 0.01;
    let inv_m = 1.0 / idx.len() as f64;
    for _ in 0..2000 {
        let mut gw = vec![0.0; c];
        let mut gb = vec![0.0; c];
        for &i in &idx {
            let row = z.row(i);
            let scaled: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(k, &v)| params.w[k] * v + params.b[k])
                .collect();
            let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scaled.iter().map(|&v| fmath::exp(v - max)).collect();
            let sum: f64 = exps.iter().sum();
            let y = labels[i] as usize;
            for k in 0..c {
                let p = exps[k] / sum;
                let delta = p - if k == y { 1.0 } else { 0.0 };
                gw[k] += delta * row[k] * inv_m;
                gb[k] += delta * inv_m;
            }
        }
        for k in 0..c {
            params.w[k] -= lr * gw[k];
            params.b[k] -= lr * gb[k];
        }
    }
    Ok(params)
}

fn indices_of(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect()
}
