//! Reverse-mode gradient engine over dense matrices.
//!
//! A [`Tape`] records each executed operation together with its forward
//! value; [`Tape::backward`] replays the record in reverse, accumulating
//! gradients for every node. The op set is exactly what the calibration and
//! detector objectives need — this is not a general autodiff library.
//!
//! Subgradient conventions are fixed for determinism: `relu'(0) = 0`,
//! `|.|'(0) = 0`, and row-max routes its gradient to the lowest-index
//! maximizing column.

use crate::fmath;
use crate::graph::CsrMatrix;
use crate::tensor::Tensor;
use crate::{Error, Result};
use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Floor used when clamping probabilities inside the log of the
/// negative-log-likelihood reduction.
pub const NLL_CLAMP: f64 = 1e-12;

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Spmm {
        matrix: Arc<CsrMatrix>,
        rhs: NodeId,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow {
        a: NodeId,
        bias: NodeId,
    },
    DivRows {
        a: NodeId,
        t: NodeId,
    },
    Relu(NodeId),
    Softplus(NodeId),
    SoftmaxRows(NodeId),
    RowMax {
        a: NodeId,
        argmax: Vec<usize>,
    },
    MaskedColSum {
        a: NodeId,
        col: usize,
        mask: Vec<usize>,
        weights: Option<Vec<f64>>,
    },
    MaskedColDot {
        a: NodeId,
        col_a: usize,
        b: NodeId,
        col_b: usize,
        mask: Vec<usize>,
    },
    MaskedNll {
        p: NodeId,
        picks: Vec<(usize, usize)>,
    },
    Square(NodeId),
    Abs(NodeId),
    Affine {
        a: NodeId,
        mul: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Record of one forward computation. Confined to a single thread; build a
/// fresh tape per training step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar loss with respect to every tape node.
///
/// Nodes the loss does not depend on keep an all-zero gradient of the node's
/// shape.
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.grads[id.0]
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn check(&self, id: NodeId) -> Result<&Tensor> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or_else(|| Error::State(format!("node {} is not on this tape", id.0)))
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::Numeric(
                "operation produced a non-finite value".into(),
            ));
        }
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Record an input that gradients are not requested for. Gradients are
    /// still accumulated (a leaf is a leaf); the distinction is documentary.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::Numeric("input tensor is not finite".into()));
        }
        self.push(value, Op::Leaf)
    }

    /// Record a trainable parameter.
    pub fn param(&mut self, value: Tensor) -> Result<NodeId> {
        self.constant(value)
    }

    /// Dense product `a @ b`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.check(a)?.shape();
        let (br, bc) = self.check(b)?.shape();
        if ac != br {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: {ar}x{ac} @ {br}x{bc}"
            )));
        }
        let out = matmul_nn(self.value(a), self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// Sparse-dense product `M @ rhs` for a symmetric CSR matrix (graph or
    /// normalized adjacency).
    pub fn spmm(&mut self, matrix: &Arc<CsrMatrix>, rhs: NodeId) -> Result<NodeId> {
        let (r, c) = self.check(rhs)?.shape();
        if r != matrix.n {
            return Err(Error::Shape(format!(
                "sparse operand is {n}x{n} but dense operand has {r} rows",
                n = matrix.n
            )));
        }
        let mut out = Tensor::zeros(r, c);
        matrix.mul_dense(self.value(rhs), &mut out);
        self.push(
            out,
            Op::Spmm {
                matrix: Arc::clone(matrix),
                rhs,
            },
        )
    }

    fn elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let sa = self.check(a)?.shape();
        let sb = self.check(b)?.shape();
        if sa != sb {
            return Err(Error::Shape(format!(
                "elementwise operands differ: {}x{} vs {}x{}",
                sa.0, sa.1, sb.0, sb.1
            )));
        }
        let mut out = self.value(a).clone();
        for (o, &x) in out.values_mut().iter_mut().zip(self.nodes[b.0].value.values()) {
            *o = f(*o, x);
        }
        self.push(out, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Broadcast-add a `1 x c` bias row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_, ac) = self.check(a)?.shape();
        let (br, bc) = self.check(bias)?.shape();
        if br != 1 || bc != ac {
            return Err(Error::Shape(format!(
                "bias must be 1x{ac}, got {br}x{bc}"
            )));
        }
        let mut out = self.value(a).clone();
        let bias_row: Vec<f64> = self.value(bias).values().to_vec();
        for r in 0..out.rows() {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(bias_row.iter()) {
                *o += bv;
            }
        }
        self.push(out, Op::AddRow { a, bias })
    }

    /// Divide each row `i` of `a` by the positive per-row scalar `t[i]`.
    pub fn div_rows(&mut self, a: NodeId, t: NodeId) -> Result<NodeId> {
        let (ar, _) = self.check(a)?.shape();
        let (tr, tc) = self.check(t)?.shape();
        if tc != 1 || tr != ar {
            return Err(Error::Shape(format!(
                "row divisor must be {ar}x1, got {tr}x{tc}"
            )));
        }
        if self.value(t).values().iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain(
                "row divisor must be strictly positive".into(),
            ));
        }
        let mut out = self.value(a).clone();
        let t_vals: Vec<f64> = self.value(t).values().to_vec();
        for r in 0..out.rows() {
            let inv = 1.0 / t_vals[r];
            for o in out.row_mut(r) {
                *o *= inv;
            }
        }
        self.push(out, Op::DivRows { a, t })
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let mut out = self.value(a).clone();
        for v in out.values_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(out, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let mut out = self.value(a).clone();
        for v in out.values_mut() {
            *v = fmath::softplus(*v);
        }
        self.push(out, Op::Softplus(a))
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = fmath::exp(*v - max);
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Per-row maximum as an `r x 1` column. The subgradient flows only to
    /// the selected entry; ties select the lowest column index.
    pub fn row_max(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a);
        let argmax = v.row_argmax();
        let out = Tensor::column(
            &argmax
                .iter()
                .enumerate()
                .map(|(r, &c)| v.get(r, c))
                .collect::<Vec<f64>>(),
        );
        self.push(out, Op::RowMax { a, argmax })
    }

    /// `sum_k w_k * a[mask_k, col]` as a scalar. `weights` aligns with
    /// `mask`; omitted weights mean all ones.
    pub fn masked_col_sum(
        &mut self,
        a: NodeId,
        col: usize,
        mask: &[usize],
        weights: Option<&[f64]>,
    ) -> Result<NodeId> {
        let (rows, cols) = self.check(a)?.shape();
        if col >= cols {
            return Err(Error::Shape(format!("column {col} out of {cols}")));
        }
        if let Some(w) = weights {
            if w.len() != mask.len() {
                return Err(Error::Shape(format!(
                    "weights length {} does not match mask length {}",
                    w.len(),
                    mask.len()
                )));
            }
        }
        if mask.iter().any(|&i| i >= rows) {
            return Err(Error::Shape("mask index out of range".into()));
        }
        let v = self.value(a);
        let mut sum = 0.0;
        for (k, &i) in mask.iter().enumerate() {
            let w = weights.map_or(1.0, |w| w[k]);
            sum += w * v.get(i, col);
        }
        self.push(
            Tensor::scalar(sum),
            Op::MaskedColSum {
                a,
                col,
                mask: mask.to_vec(),
                weights: weights.map(|w| w.to_vec()),
            },
        )
    }

    /// `sum_k a[mask_k, col_a] * b[mask_k, col_b]` as a scalar; both factors
    /// receive gradient.
    pub fn masked_col_dot(
        &mut self,
        a: NodeId,
        col_a: usize,
        b: NodeId,
        col_b: usize,
        mask: &[usize],
    ) -> Result<NodeId> {
        let (ra, ca) = self.check(a)?.shape();
        let (rb, cb) = self.check(b)?.shape();
        if col_a >= ca || col_b >= cb {
            return Err(Error::Shape("dot column out of range".into()));
        }
        if mask.iter().any(|&i| i >= ra || i >= rb) {
            return Err(Error::Shape("mask index out of range".into()));
        }
        let va = self.value(a);
        let vb = self.value(b);
        let sum: f64 = mask
            .iter()
            .map(|&i| va.get(i, col_a) * vb.get(i, col_b))
            .sum();
        self.push(
            Tensor::scalar(sum),
            Op::MaskedColDot {
                a,
                col_a,
                b,
                col_b,
                mask: mask.to_vec(),
            },
        )
    }

    /// Negative log-likelihood of the picked entries:
    /// `-sum ln(max(p[r, c], 1e-12))`.
    pub fn masked_nll(&mut self, p: NodeId, picks: &[(usize, usize)]) -> Result<NodeId> {
        let (rows, cols) = self.check(p)?.shape();
        if picks.iter().any(|&(r, c)| r >= rows || c >= cols) {
            return Err(Error::Shape("pick index out of range".into()));
        }
        let v = self.value(p);
        let mut sum = 0.0;
        for &(r, c) in picks {
            sum -= fmath::ln(v.get(r, c).max(NLL_CLAMP));
        }
        self.push(
            Tensor::scalar(sum),
            Op::MaskedNll {
                p,
                picks: picks.to_vec(),
            },
        )
    }

    /// Elementwise square.
    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let mut out = self.value(a).clone();
        for v in out.values_mut() {
            *v *= *v;
        }
        self.push(out, Op::Square(a))
    }

    /// Elementwise absolute value with subgradient 0 at the kink.
    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let mut out = self.value(a).clone();
        for v in out.values_mut() {
            *v = fmath::abs(*v);
        }
        self.push(out, Op::Abs(a))
    }

    /// Elementwise affine map `mul * x + add`.
    pub fn affine(&mut self, a: NodeId, mul: f64, add: f64) -> Result<NodeId> {
        self.check(a)?;
        if !mul.is_finite() || !add.is_finite() {
            return Err(Error::Numeric("affine coefficients must be finite".into()));
        }
        let mut out = self.value(a).clone();
        for v in out.values_mut() {
            *v = mul * *v + add;
        }
        self.push(out, Op::Affine { a, mul })
    }

    /// Reverse accumulation from a `1 x 1` loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward on an empty tape".into()));
        }
        let loss_value = self.check(loss)?;
        if loss_value.shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "loss must be 1x1, got {}x{}",
                loss_value.rows(),
                loss_value.cols()
            )));
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.rows(), n.value.cols()))
            .collect();
        grads[loss.0].set(0, 0, 1.0);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            // Skip nodes the loss does not reach.
            if grads[idx].values().iter().all(|&g| g == 0.0) {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let g = grads[idx].clone();
                    let ga = matmul_nt(&g, self.value(*b));
                    let gb = matmul_tn(self.value(*a), &g);
                    accumulate(&mut grads[a.0], &ga);
                    accumulate(&mut grads[b.0], &gb);
                }
                Op::Spmm { matrix, rhs } => {
                    // Symmetric matrix: M^T g = M g.
                    let g = grads[idx].clone();
                    let mut gr = Tensor::zeros(g.rows(), g.cols());
                    matrix.mul_dense(&g, &mut gr);
                    accumulate(&mut grads[rhs.0], &gr);
                }
                Op::Add(a, b) => {
                    let g = grads[idx].clone();
                    accumulate(&mut grads[a.0], &g);
                    accumulate(&mut grads[b.0], &g);
                }
                Op::Sub(a, b) => {
                    let g = grads[idx].clone();
                    accumulate(&mut grads[a.0], &g);
                    accumulate_scaled(&mut grads[b.0], &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let g = grads[idx].clone();
                    let mut ga = g.clone();
                    for (x, &y) in ga.values_mut().iter_mut().zip(self.value(*b).values()) {
                        *x *= y;
                    }
                    let mut gb = g;
                    for (x, &y) in gb.values_mut().iter_mut().zip(self.value(*a).values()) {
                        *x *= y;
                    }
                    accumulate(&mut grads[a.0], &ga);
                    accumulate(&mut grads[b.0], &gb);
                }
                Op::AddRow { a, bias } => {
                    let g = grads[idx].clone();
                    accumulate(&mut grads[a.0], &g);
                    let gb = grads[bias.0].row_mut(0);
                    for r in 0..g.rows() {
                        for (o, &gv) in gb.iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                }
                Op::DivRows { a, t } => {
                    let g = grads[idx].clone();
                    let t_vals: Vec<f64> = self.value(*t).values().to_vec();
                    let out_vals = &node.value;
                    {
                        let ga = &mut grads[a.0];
                        for r in 0..g.rows() {
                            let inv = 1.0 / t_vals[r];
                            for (o, &gv) in ga.row_mut(r).iter_mut().zip(g.row(r)) {
                                *o += gv * inv;
                            }
                        }
                    }
                    {
                        let gt = &mut grads[t.0];
                        for r in 0..g.rows() {
                            // d(a/t)/dt = -a/t^2 = -out/t
                            let dot: f64 = g
                                .row(r)
                                .iter()
                                .zip(out_vals.row(r))
                                .map(|(&gv, &ov)| gv * ov)
                                .sum();
                            let cur = gt.get(r, 0);
                            gt.set(r, 0, cur - dot / t_vals[r]);
                        }
                    }
                }
                Op::Relu(a) => {
                    let g = grads[idx].clone();
                    let input = self.value(*a);
                    let ga = &mut grads[a.0];
                    for (k, (&gv, &x)) in g.values().iter().zip(input.values()).enumerate() {
                        if x > 0.0 {
                            ga.values_mut()[k] += gv;
                        }
                    }
                }
                Op::Softplus(a) => {
                    let g = grads[idx].clone();
                    let input = self.value(*a);
                    let ga = &mut grads[a.0];
                    for (k, (&gv, &x)) in g.values().iter().zip(input.values()).enumerate() {
                        ga.values_mut()[k] += gv * fmath::sigmoid(x);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let g = grads[idx].clone();
                    let p = &node.value;
                    let ga = &mut grads[a.0];
                    for r in 0..g.rows() {
                        let dot: f64 = g
                            .row(r)
                            .iter()
                            .zip(p.row(r))
                            .map(|(&gv, &pv)| gv * pv)
                            .sum();
                        for (o, (&gv, &pv)) in
                            ga.row_mut(r).iter_mut().zip(g.row(r).iter().zip(p.row(r)))
                        {
                            *o += pv * (gv - dot);
                        }
                    }
                }
                Op::RowMax { a, argmax } => {
                    let g = grads[idx].clone();
                    let ga = &mut grads[a.0];
                    for (r, &c) in argmax.iter().enumerate() {
                        let cur = ga.get(r, c);
                        ga.set(r, c, cur + g.get(r, 0));
                    }
                }
                Op::MaskedColSum {
                    a,
                    col,
                    mask,
                    weights,
                } => {
                    let g = grads[idx].get(0, 0);
                    let ga = &mut grads[a.0];
                    for (k, &i) in mask.iter().enumerate() {
                        let w = weights.as_ref().map_or(1.0, |w| w[k]);
                        let cur = ga.get(i, *col);
                        ga.set(i, *col, cur + w * g);
                    }
                }
                Op::MaskedColDot {
                    a,
                    col_a,
                    b,
                    col_b,
                    mask,
                } => {
                    let g = grads[idx].get(0, 0);
                    let va = self.value(*a).clone();
                    let vb = self.value(*b).clone();
                    for &i in mask {
                        let cur = grads[a.0].get(i, *col_a);
                        grads[a.0].set(i, *col_a, cur + g * vb.get(i, *col_b));
                        let cur = grads[b.0].get(i, *col_b);
                        grads[b.0].set(i, *col_b, cur + g * va.get(i, *col_a));
                    }
                }
                Op::MaskedNll { p, picks } => {
                    let g = grads[idx].get(0, 0);
                    let values = self.value(*p).clone();
                    let gp = &mut grads[p.0];
                    for &(r, c) in picks {
                        let cur = gp.get(r, c);
                        gp.set(r, c, cur - g / values.get(r, c).max(NLL_CLAMP));
                    }
                }
                Op::Square(a) => {
                    let g = grads[idx].clone();
                    let input = self.value(*a);
                    let ga = &mut grads[a.0];
                    for (k, (&gv, &x)) in g.values().iter().zip(input.values()).enumerate() {
                        ga.values_mut()[k] += 2.0 * x * gv;
                    }
                }
                Op::Abs(a) => {
                    let g = grads[idx].clone();
                    let input = self.value(*a);
                    let ga = &mut grads[a.0];
                    for (k, (&gv, &x)) in g.values().iter().zip(input.values()).enumerate() {
                        let s = if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        ga.values_mut()[k] += s * gv;
                    }
                }
                Op::Affine { a, mul } => {
                    let g = grads[idx].clone();
                    accumulate_scaled(&mut grads[a.0], &g, *mul);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(into: &mut Tensor, from: &Tensor) {
    for (o, &v) in into.values_mut().iter_mut().zip(from.values()) {
        *o += v;
    }
}

fn accumulate_scaled(into: &mut Tensor, from: &Tensor, scale: f64) {
    for (o, &v) in into.values_mut().iter_mut().zip(from.values()) {
        *o += scale * v;
    }
}

/// `a @ b`
fn matmul_nn(a: &Tensor, b: &Tensor) -> Tensor {
    let (ar, ac) = a.shape();
    let bc = b.cols();
    let mut out = Tensor::zeros(ar, bc);
    for i in 0..ar {
        for k in 0..ac {
            let av = a.get(i, k);
            if av == 0.0 {
                continue;
            }
            let brow = b.row(k);
            let orow = out.row_mut(i);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a @ b^T`
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (ar, ac) = a.shape();
    let br = b.rows();
    debug_assert_eq!(ac, b.cols());
    let mut out = Tensor::zeros(ar, br);
    for i in 0..ar {
        let arow = a.row(i);
        for j in 0..br {
            let dot: f64 = arow.iter().zip(b.row(j)).map(|(&x, &y)| x * y).sum();
            out.set(i, j, dot);
        }
    }
    out
}

/// `a^T @ b`
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (ar, ac) = a.shape();
    let bc = b.cols();
    debug_assert_eq!(ar, b.rows());
    let mut out = Tensor::zeros(ac, bc);
    for k in 0..ar {
        let arow = a.row(k);
        let brow = b.row(k);
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = out.row_mut(i);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::from_vec(1, 2, vec![0.0, 0.0]).unwrap())
            .unwrap();
        let p = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(p).values(), &[0.5, 0.5]);
    }

    #[test]
    fn softplus_at_zero_is_ln_two() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0)).unwrap();
        let y = tape.softplus(x).unwrap();
        assert!((tape.value(y).item().unwrap() - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn div_rows_scales_each_row() {
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::from_vec(1, 2, vec![2.0, 4.0]).unwrap())
            .unwrap();
        let t = tape.constant(Tensor::scalar(2.0)).unwrap();
        let y = tape.div_rows(x, t).unwrap();
        assert_eq!(tape.value(y).values(), &[1.0, 2.0]);
    }

    #[test]
    fn div_rows_rejects_nonpositive_divisor() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(2, 2)).unwrap();
        let t = tape
            .constant(Tensor::from_vec(2, 1, vec![1.0, 0.0]).unwrap())
            .unwrap();
        assert!(matches!(tape.div_rows(x, t), Err(Error::Domain(_))));
    }

    #[test]
    fn inactive_relu_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(-1.0)).unwrap();
        let y = tape.relu(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).item().unwrap(), 0.0);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0)).unwrap();
        let y = tape.relu(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).item().unwrap(), 0.0);
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0)).unwrap();
        let y = tape.abs(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).item().unwrap(), 0.0);
    }

    #[test]
    fn row_max_routes_gradient_to_argmax() {
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::from_vec(1, 2, vec![3.0, 1.0]).unwrap())
            .unwrap();
        let y = tape.row_max(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).values(), &[1.0, 0.0]);
    }

    #[test]
    fn row_max_ties_route_to_lowest_column() {
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::from_vec(1, 3, vec![2.0, 2.0, 1.0]).unwrap())
            .unwrap();
        let y = tape.row_max(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).values(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3)).unwrap();
        let b = tape.constant(Tensor::zeros(2, 3)).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut tape = Tape::new();
        let t = Tensor::from_vec(1, 2, vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(tape.constant(t), Err(Error::Numeric(_))));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(2, 2)).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_rejects_foreign_node() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1.0)).unwrap();
        let _ = x;
        let empty = Tape::new();
        assert!(matches!(
            empty.backward(NodeId(0)),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn masked_nll_matches_closed_form() {
        let mut tape = Tape::new();
        // Two rows of probabilities; pick the "true" class of each.
        let p = tape
            .constant(Tensor::from_vec(2, 2, vec![0.5, 0.5, 0.25, 0.75]).unwrap())
            .unwrap();
        let loss = tape.masked_nll(p, &[(0, 0), (1, 1)]).unwrap();
        let expect = -(0.5f64.ln() + 0.75f64.ln());
        assert!((tape.value(loss).item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn untouched_leaf_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(2.0)).unwrap();
        let unused = tape.constant(Tensor::zeros(3, 3)).unwrap();
        let y = tape.square(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).item().unwrap(), 4.0);
        assert!(grads.get(unused).values().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn matmul_gradient_has_outer_product_structure() {
        // loss = sum(W x) with x fixed => dW[i][j] = x[j].
        let mut tape = Tape::new();
        let w = tape
            .constant(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let x = tape
            .constant(Tensor::from_vec(2, 1, vec![5.0, 7.0]).unwrap())
            .unwrap();
        let y = tape.matmul(w, x).unwrap();
        let ones = tape
            .constant(Tensor::from_vec(2, 1, vec![1.0, 1.0]).unwrap())
            .unwrap();
        let loss = tape.masked_col_dot(y, 0, ones, 0, &[0, 1]).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).values(), &[5.0, 7.0, 5.0, 7.0]);
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::from_vec(1, 1, vec![0.7]).unwrap())
            .unwrap();
        let l1 = tape.square(x).unwrap();
        let l2 = tape.softplus(x).unwrap();
        let a = 2.5;
        let b = -1.25;
        let s1 = tape.affine(l1, a, 0.0).unwrap();
        let s2 = tape.affine(l2, b, 0.0).unwrap();
        let total = tape.add(s1, s2).unwrap();
        let g_total = tape.backward(total).unwrap();
        let g1 = tape.backward(l1).unwrap();
        let g2 = tape.backward(l2).unwrap();
        let combined = a * g1.get(x).item().unwrap() + b * g2.get(x).item().unwrap();
        assert!((g_total.get(x).item().unwrap() - combined).abs() < 1e-12);
    }
}
