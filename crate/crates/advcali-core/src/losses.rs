//! Training objectives: cross-entropy, confidence extraction, soft
//! group-wise accuracy/confidence means, and the differentiable group
//! calibration loss with a pluggable accuracy-confidence distance.
//!
//! Every sum, every normalizer, and the outer population weight run over the
//! supplied mask, so a labeled-node training mask and an evaluation mask get
//! identical treatment.

use crate::diff::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::{Error, Result};
use alloc::format;
use alloc::vec::Vec;

/// Mass below which a soft group contributes zero loss and zero gradient.
pub const DEGENERATE_MASS: f64 = 1e-12;

/// Distance between a group's mean accuracy and mean confidence.
///
/// Squared error is the training default; absolute error recovers the
/// classic binned calibration error when groups are hard bin memberships.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistanceKind {
    #[default]
    Squared,
    Absolute,
}

/// Per-node confidence, predicted class, and correctness.
///
/// `correct` is defined only where a label exists.
#[derive(Debug, Clone)]
pub struct ConfidenceView {
    pub conf: Vec<f64>,
    pub pred: Vec<usize>,
    pub correct: Vec<Option<bool>>,
}

impl ConfidenceView {
    /// Extract max-probability confidence and argmax predictions (ties to
    /// the lowest class index) from a probability matrix.
    pub fn from_probabilities(p: &Tensor, labels: &[i64]) -> Result<Self> {
        if labels.len() != p.rows() {
            return Err(Error::Shape(format!(
                "{} labels for {} probability rows",
                labels.len(),
                p.rows()
            )));
        }
        let pred = p.row_argmax();
        let conf: Vec<f64> = pred.iter().enumerate().map(|(r, &c)| p.get(r, c)).collect();
        let correct = pred
            .iter()
            .zip(labels)
            .map(|(&yhat, &y)| (y >= 0).then_some(yhat as i64 == y))
            .collect();
        Ok(ConfidenceView { conf, pred, correct })
    }
}

/// Confidence on the tape (for gradients) together with the plain view.
#[derive(Debug)]
pub struct TapeConfidence {
    /// `N x 1` node holding the max probability per row; gradient flows to
    /// the selected entry only.
    pub node: NodeId,
    pub view: ConfidenceView,
}

/// Record confidence extraction of a probability node.
pub fn confidence(tape: &mut Tape, p: NodeId, labels: &[i64]) -> Result<TapeConfidence> {
    let view = ConfidenceView::from_probabilities(tape.value(p), labels)?;
    let node = tape.row_max(p)?;
    Ok(TapeConfidence { node, view })
}

/// Summed cross-entropy `-sum_{i in mask} ln(P[i, y_i])`, differentiable
/// through the probabilities.
pub fn cross_entropy(tape: &mut Tape, p: NodeId, labels: &[i64], mask: &[usize]) -> Result<NodeId> {
    let values = tape.value(p);
    let mut picks = Vec::with_capacity(mask.len());
    for &i in mask {
        if i >= values.rows() {
            return Err(Error::Shape(format!(
                "masked node {i} outside probability rows"
            )));
        }
        let y = labels[i];
        if y < 0 || y as usize >= values.cols() {
            return Err(Error::Validation(format!(
                "masked node {i} has no valid label"
            )));
        }
        if values.get(i, y as usize) <= 0.0 {
            return Err(Error::Numeric(format!(
                "probability of the true class of node {i} is not positive"
            )));
        }
        picks.push((i, y as usize));
    }
    tape.masked_nll(p, &picks)
}

fn correctness_weights(view: &ConfidenceView, mask: &[usize]) -> Result<Vec<f64>> {
    mask.iter()
        .map(|&i| {
            view.correct
                .get(i)
                .copied()
                .flatten()
                .map(|c| if c { 1.0 } else { 0.0 })
                .ok_or_else(|| {
                    Error::Validation(format!("masked node {i} has no correctness indicator"))
                })
        })
        .collect()
}

/// Mass-normalized mean correctness of one soft group column over the mask.
/// A column mass below [`DEGENERATE_MASS`] yields a constant zero.
pub fn soft_acc(
    tape: &mut Tape,
    g: NodeId,
    col: usize,
    view: &ConfidenceView,
    mask: &[usize],
) -> Result<NodeId> {
    let mass = tape.masked_col_sum(g, col, mask, None)?;
    if tape.value(mass).item()? < DEGENERATE_MASS {
        return tape.constant(Tensor::scalar(0.0));
    }
    let weights = correctness_weights(view, mask)?;
    let num = tape.masked_col_sum(g, col, mask, Some(&weights))?;
    tape.div_rows(num, mass)
}

/// Mass-normalized mean confidence of one soft group column over the mask,
/// differentiable through both the group weights and the confidence.
pub fn soft_conf(
    tape: &mut Tape,
    g: NodeId,
    col: usize,
    conf: NodeId,
    mask: &[usize],
) -> Result<NodeId> {
    let mass = tape.masked_col_sum(g, col, mask, None)?;
    if tape.value(mass).item()? < DEGENERATE_MASS {
        return tape.constant(Tensor::scalar(0.0));
    }
    let num = tape.masked_col_dot(g, col, conf, 0, mask)?;
    tape.div_rows(num, mass)
}

/// Differentiable group calibration loss:
/// `sum_j (mass_j / |mask|) * dist(SoftAcc_j, SoftConf_j)`.
///
/// Groups whose masked mass falls below [`DEGENERATE_MASS`] contribute
/// nothing, with zero gradient.
pub fn group_ece(
    tape: &mut Tape,
    g: NodeId,
    conf: &TapeConfidence,
    mask: &[usize],
    dist: DistanceKind,
) -> Result<NodeId> {
    if mask.is_empty() {
        return Err(Error::Argument(
            "group calibration needs a nonempty mask".into(),
        ));
    }
    let num_groups = tape.value(g).cols();
    let inv_population = 1.0 / mask.len() as f64;
    let weights = correctness_weights(&conf.view, mask)?;
    let mut total = tape.constant(Tensor::scalar(0.0))?;
    for j in 0..num_groups {
        let mass = tape.masked_col_sum(g, j, mask, None)?;
        if tape.value(mass).item()? < DEGENERATE_MASS {
            continue;
        }
        let acc_num = tape.masked_col_sum(g, j, mask, Some(&weights))?;
        let acc = tape.div_rows(acc_num, mass)?;
        let conf_num = tape.masked_col_dot(g, j, conf.node, 0, mask)?;
        let conf_mean = tape.div_rows(conf_num, mass)?;
        let gap = tape.sub(acc, conf_mean)?;
        let d = match dist {
            DistanceKind::Squared => tape.square(gap)?,
            DistanceKind::Absolute => tape.abs(gap)?,
        };
        let weighted = tape.mul(mass, d)?;
        let term = tape.affine(weighted, inv_population, 0.0)?;
        total = tape.add(total, term)?;
    }
    Ok(total)
}

/// `ce + lambda * gece`, the scalar objective both players share.
pub fn total_objective(tape: &mut Tape, ce: NodeId, gece: NodeId, lambda: f64) -> Result<NodeId> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::Argument(format!(
            "loss weight must be nonnegative, got {lambda}"
        )));
    }
    let scaled = tape.affine(gece, lambda, 0.0)?;
    tape.add(ce, scaled)
}
