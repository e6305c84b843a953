//! Binned calibration metrics: global, degree-restricted, class-wise, and
//! subgraph-restricted expected calibration error, plus reliability-diagram
//! bin statistics and group-detector diagnostics.
//!
//! Bins are half-open intervals `((m-1)/M, m/M]`. Metrics over an empty
//! population are undefined and reported as `None`, never zero.

use crate::community::Partition;
use crate::fmath;
use crate::graph::Graph;
use crate::losses::ConfidenceView;
use crate::models::GroupWeights;
use crate::{Error, Result};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

/// Statistics of one reliability bin.
#[derive(Debug, Clone, PartialEq)]
pub struct BinStats {
    /// 1-based bin index.
    pub bin_index: usize,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean correctness of the bin's samples; 0 for an empty bin.
    pub acc: f64,
    /// Mean confidence of the bin's samples; 0 for an empty bin.
    pub conf: f64,
}

/// All calibration metrics of one evaluation, plus the per-metric
/// population sizes. `None` marks an undefined metric (empty population).
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub global_ece: Option<f64>,
    pub degree_ece: Option<f64>,
    pub class_ece: Option<f64>,
    pub subgraph_ece: Option<f64>,
    pub bins: Vec<BinStats>,
    pub population: PopulationSizes,
}

#[derive(Debug, Clone, Default)]
pub struct PopulationSizes {
    pub global: usize,
    pub degree: usize,
    pub class: usize,
    pub subgraph: usize,
}

/// 1-based bin index of a confidence under the half-open binning rule,
/// found by scanning the interval predicates directly so it agrees with
/// the set-builder definition on every float.
pub fn bin_of(conf: f64, bins: usize) -> usize {
    for m in 1..=bins {
        let lower = (m - 1) as f64 / bins as f64;
        let upper = m as f64 / bins as f64;
        if conf > lower && conf <= upper {
            return m;
        }
    }
    // conf == 0 cannot occur for max-softmax confidences; clamp defensively.
    if conf <= 0.0 {
        1
    } else {
        bins
    }
}

/// Expected calibration error over a population of (confidence, correct)
/// samples: `sum_m |B_m|/n * |acc_m - conf_m|`.
pub fn ece(conf: &[f64], correct: &[bool], bins: usize) -> Result<(f64, Vec<BinStats>)> {
    if conf.is_empty() {
        return Err(Error::Argument("calibration error of an empty population".into()));
    }
    if conf.len() != correct.len() {
        return Err(Error::Shape(format!(
            "{} confidences vs {} correctness flags",
            conf.len(),
            correct.len()
        )));
    }
    if bins == 0 {
        return Err(Error::Argument("bin count must be positive".into()));
    }
    if let Some(bad) = conf.iter().find(|&&c| !(c > 0.0 && c <= 1.0)) {
        return Err(Error::Domain(format!(
            "confidence {bad} outside (0, 1]"
        )));
    }
    let mut count = vec![0usize; bins];
    let mut acc_sum = vec![0.0; bins];
    let mut conf_sum = vec![0.0; bins];
    for (&c, &ok) in conf.iter().zip(correct) {
        let m = bin_of(c, bins) - 1;
        count[m] += 1;
        acc_sum[m] += if ok { 1.0 } else { 0.0 };
        conf_sum[m] += c;
    }
    let n = conf.len() as f64;
    let mut total = 0.0;
    let mut stats = Vec::with_capacity(bins);
    for m in 0..bins {
        let (acc, mean_conf) = if count[m] > 0 {
            (acc_sum[m] / count[m] as f64, conf_sum[m] / count[m] as f64)
        } else {
            (0.0, 0.0)
        };
        total += count[m] as f64 / n * fmath::abs(acc - mean_conf);
        stats.push(BinStats {
            bin_index: m + 1,
            lower: m as f64 / bins as f64,
            upper: (m + 1) as f64 / bins as f64,
            count: count[m],
            acc,
            conf: mean_conf,
        });
    }
    Ok((total, stats))
}

fn restricted_ece(
    view: &ConfidenceView,
    keep: impl Fn(usize) -> bool,
    bins: usize,
) -> Result<Option<(f64, usize)>> {
    let mut conf = Vec::new();
    let mut correct = Vec::new();
    for i in 0..view.conf.len() {
        if keep(i) {
            let ok = view.correct[i].ok_or_else(|| {
                Error::Validation(format!("node {i} in the population has no label"))
            })?;
            conf.push(view.conf[i]);
            correct.push(ok);
        }
    }
    if conf.is_empty() {
        return Ok(None);
    }
    let n = conf.len();
    Ok(Some((ece(&conf, &correct, bins)?.0, n)))
}

/// Calibration error restricted to the highest-degree fraction of the graph
/// intersected with the evaluation mask. `None` when the intersection is
/// empty.
pub fn degree_ece(
    view: &ConfidenceView,
    g: &Graph,
    eval_mask: &[bool],
    fraction: f64,
    bins: usize,
) -> Result<Option<f64>> {
    require_nonempty(eval_mask)?;
    let top = g.top_degree_mask(fraction)?;
    Ok(
        restricted_ece(view, |i| eval_mask[i] && top[i], bins)?
            .map(|(e, _)| e),
    )
}

/// Mean over classes of the per-class calibration error; classes with no
/// masked members are skipped from the mean.
pub fn classwise_ece(
    view: &ConfidenceView,
    labels: &[i64],
    eval_mask: &[bool],
    bins: usize,
) -> Result<f64> {
    require_nonempty(eval_mask)?;
    let num_classes = labels.iter().copied().max().unwrap_or(-1) + 1;
    let mut per_class = Vec::new();
    for class in 0..num_classes {
        if let Some((e, _)) =
            restricted_ece(view, |i| eval_mask[i] && labels[i] == class, bins)?
        {
            per_class.push(e);
        }
    }
    if per_class.is_empty() {
        return Err(Error::Argument(
            "no labeled members in the evaluation mask".into(),
        ));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// Calibration error on the largest community (ties to the lowest community
/// id) intersected with the evaluation mask.
pub fn subgraph_ece(
    view: &ConfidenceView,
    partition: &Partition,
    eval_mask: &[bool],
    bins: usize,
) -> Result<Option<f64>> {
    require_nonempty(eval_mask)?;
    let target = partition.largest_community();
    Ok(restricted_ece(
        view,
        |i| eval_mask[i] && partition.community_of(i) == target,
        bins,
    )?
    .map(|(e, _)| e))
}

fn require_nonempty(mask: &[bool]) -> Result<()> {
    if mask.iter().any(|&m| m) {
        Ok(())
    } else {
        Err(Error::Argument("evaluation mask is empty".into()))
    }
}

/// Degree and Class-0 dispersion of the detector's hard group assignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupDiagnostics {
    /// Population standard deviation of the per-group mean degrees
    /// (nonempty groups only).
    pub degree_std: f64,
    /// Population standard deviation of the fraction of Class-0 nodes per
    /// group (all K groups; empty ones count as 0). `None` when no node has
    /// class 0.
    pub class0_std: Option<f64>,
}

/// Diagnostics over the argmax group assignment of `weights`.
pub fn group_diagnostics(weights: &GroupWeights, g: &Graph, labels: &[i64]) -> GroupDiagnostics {
    let assignment = weights.hard_assignment();
    let k = weights.num_groups();
    let degrees = g.degrees();

    let mut sum = vec![0.0f64; k];
    let mut count = vec![0usize; k];
    for (i, &grp) in assignment.iter().enumerate() {
        sum[grp] += degrees[i] as f64;
        count[grp] += 1;
    }
    let means: Vec<f64> = (0..k)
        .filter(|&grp| count[grp] > 0)
        .map(|grp| sum[grp] / count[grp] as f64)
        .collect();
    let degree_std = population_std(&means);

    let class0: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter_map(|(i, &y)| (y == 0).then_some(i))
        .collect();
    let class0_std = if class0.is_empty() {
        None
    } else {
        let mut frac = vec![0.0f64; k];
        for &i in &class0 {
            frac[assignment[i]] += 1.0;
        }
        for f in frac.iter_mut() {
            *f /= class0.len() as f64;
        }
        Some(population_std(&frac))
    };

    GroupDiagnostics {
        degree_std,
        class0_std,
    }
}

fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / values.len() as f64;
    fmath::sqrt(var)
}

/// Compute the full metric report on the evaluation mask.
///
/// Global bins come from the whole masked population; the subgraph metric is
/// computed only when a partition is supplied.
pub fn compute_report(
    view: &ConfidenceView,
    g: &Graph,
    labels: &[i64],
    eval_mask: &[bool],
    partition: Option<&Partition>,
    fraction: f64,
    bins: usize,
) -> Result<MetricReport> {
    require_nonempty(eval_mask)?;
    let mut population = PopulationSizes::default();

    let global = restricted_ece(view, |i| eval_mask[i], bins)?;
    let (global_ece, global_bins) = match global {
        Some((_, n)) => {
            population.global = n;
            let mut conf = Vec::with_capacity(n);
            let mut correct = Vec::with_capacity(n);
            for i in 0..view.conf.len() {
                if eval_mask[i] {
                    conf.push(view.conf[i]);
                    correct.push(view.correct[i].unwrap_or(false));
                }
            }
            let (e, b) = ece(&conf, &correct, bins)?;
            (Some(e), b)
        }
        None => (None, Vec::new()),
    };

    let top = g.top_degree_mask(fraction)?;
    let degree = restricted_ece(view, |i| eval_mask[i] && top[i], bins)?;
    if let Some((_, n)) = degree {
        population.degree = n;
    }

    let class_ece = match classwise_ece(view, labels, eval_mask, bins) {
        Ok(e) => {
            population.class = (0..view.conf.len())
                .filter(|&i| eval_mask[i] && labels[i] >= 0)
                .count();
            Some(e)
        }
        Err(Error::Argument(_)) => None,
        Err(e) => return Err(e),
    };

    let subgraph = match partition {
        Some(p) => {
            let target = p.largest_community();
            let r = restricted_ece(view, |i| eval_mask[i] && p.community_of(i) == target, bins)?;
            if let Some((_, n)) = r {
                population.subgraph = n;
            }
            r.map(|(e, _)| e)
        }
        None => None,
    };

    Ok(MetricReport {
        global_ece,
        degree_ece: degree.map(|(e, _)| e),
        class_ece,
        subgraph_ece: subgraph,
        bins: global_bins,
        population,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::community::louvain;
    use crate::rng::stream;

    #[test]
    fn single_bin2_population_hand_value() {
        let (e, bins) = ece(
            &[0.9, 0.8, 0.6, 0.55],
            &[true, true, false, true],
            2,
        )
        .unwrap();
        assert!((e - 0.0375).abs() < 1e-15);
        assert_eq!(bins[0].count, 0);
        assert_eq!(bins[1].count, 4);
        assert!((bins[1].acc - 0.75).abs() < 1e-15);
        assert!((bins[1].conf - 0.7125).abs() < 1e-15);
    }

    #[test]
    fn two_bin_hand_value() {
        let (e, _) = ece(&[0.3, 0.9], &[false, true], 2).unwrap();
        assert!((e - 0.2).abs() < 1e-15);
    }

    #[test]
    fn perfectly_calibrated_bins_score_zero() {
        // Each sample's confidence equals its bin's accuracy.
        let conf = [0.75, 0.75, 0.75, 0.75];
        let correct = [true, true, true, false];
        let (e, _) = ece(&conf, &correct, 2).unwrap();
        assert!(e.abs() < 1e-15);
    }

    #[test]
    fn ece_rejects_empty_population_and_bad_confidence() {
        assert!(ece(&[], &[], 15).is_err());
        assert!(matches!(
            ece(&[1.2], &[true], 15),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            ece(&[0.0], &[true], 15),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn ece_is_permutation_invariant() {
        let conf = [0.9, 0.3, 0.62, 0.55, 0.71];
        let correct = [true, false, true, false, true];
        let (e1, _) = ece(&conf, &correct, 15).unwrap();
        let perm = [4, 2, 0, 3, 1];
        let conf_p: Vec<f64> = perm.iter().map(|&i| conf[i]).collect();
        let correct_p: Vec<bool> = perm.iter().map(|&i| correct[i]).collect();
        let (e2, _) = ece(&conf_p, &correct_p, 15).unwrap();
        assert_eq!(e1.to_bits(), e2.to_bits());
    }

    #[test]
    fn scalar_reproducible_from_bins() {
        let mut rng = stream(3, "bins");
        let n = 200;
        let conf: Vec<f64> = (0..n).map(|_| 0.2 + 0.8 * rng.next_f64()).collect();
        let correct: Vec<bool> = (0..n).map(|_| rng.next_f64() < 0.7).collect();
        let (e, bins) = ece(&conf, &correct, 15).unwrap();
        let rebuilt: f64 = bins
            .iter()
            .map(|b| b.count as f64 / n as f64 * (b.acc - b.conf).abs())
            .sum();
        assert!((e - rebuilt).abs() < 1e-12);
    }

    #[test]
    fn binning_boundaries_are_half_open() {
        // 0.5 belongs to bin ending at 0.5, values just above go up a bin.
        assert_eq!(bin_of(0.5, 2), 1);
        assert_eq!(bin_of(0.500000001, 2), 2);
        assert_eq!(bin_of(1.0, 15), 15);
        assert_eq!(bin_of(1.0 / 15.0, 15), 1);
    }

    fn view_of(conf: &[f64], correct: &[bool]) -> ConfidenceView {
        ConfidenceView {
            conf: conf.to_vec(),
            pred: vec![0; conf.len()],
            correct: correct.iter().map(|&c| Some(c)).collect(),
        }
    }

    #[test]
    fn degree_ece_star_hub_single_sample() {
        let edges: Vec<(usize, usize, f64)> = (1..8).map(|i| (0, i, 1.0)).collect();
        let g = Graph::from_edges(8, &edges).unwrap();
        let conf = [0.9, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5];
        let correct = [false, true, true, true, true, true, true, true];
        let view = view_of(&conf, &correct);
        // Only the hub is in both the mask and the top-degree slice.
        let mut mask = vec![false; 8];
        mask[0] = true;
        mask[7] = false;
        let e = degree_ece(&view, &g, &mask, 1.0 / 8.0, 15).unwrap().unwrap();
        assert!((e - 0.9).abs() < 1e-15);
    }

    #[test]
    fn degree_ece_fraction_one_equals_global() {
        let g = Graph::from_edges(4, &[(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0)]).unwrap();
        let conf = [0.9, 0.7, 0.6, 0.8];
        let correct = [true, false, true, true];
        let view = view_of(&conf, &correct);
        let mask = vec![true; 4];
        let d = degree_ece(&view, &g, &mask, 1.0, 15).unwrap().unwrap();
        let (e, _) = ece(&conf, &correct, 15).unwrap();
        assert_eq!(d.to_bits(), e.to_bits());
    }

    #[test]
    fn degree_ece_empty_intersection_is_undefined() {
        let edges: Vec<(usize, usize, f64)> = (1..4).map(|i| (0, i, 1.0)).collect();
        let g = Graph::from_edges(4, &edges).unwrap();
        let view = view_of(&[0.9, 0.8, 0.7, 0.6], &[true, true, true, true]);
        // Mask excludes the hub, the only top-degree node at this fraction.
        let mask = vec![false, true, true, true];
        assert_eq!(degree_ece(&view, &g, &mask, 0.25, 15).unwrap(), None);
    }

    #[test]
    fn classwise_single_class_equals_global() {
        let view = view_of(&[0.9, 0.7], &[true, false]);
        let labels = vec![0, 0];
        let mask = vec![true, true];
        let c = classwise_ece(&view, &labels, &mask, 15).unwrap();
        let (e, _) = ece(&view.conf, &[true, false], 15).unwrap();
        assert_eq!(c.to_bits(), e.to_bits());
    }

    #[test]
    fn classwise_averages_over_classes() {
        // Class 0: one sample conf 0.9 correct -> ECE 0.1.
        // Class 1: one sample conf 0.6 wrong -> ECE 0.6.
        let view = view_of(&[0.9, 0.6], &[true, false]);
        let labels = vec![0, 1];
        let mask = vec![true, true];
        let c = classwise_ece(&view, &labels, &mask, 15).unwrap();
        assert!((c - 0.35).abs() < 1e-15);
    }

    #[test]
    fn classwise_requires_labeled_members() {
        let view = ConfidenceView {
            conf: vec![0.9],
            pred: vec![0],
            correct: vec![None],
        };
        assert!(classwise_ece(&view, &[-1], &[true], 15).is_err());
    }

    #[test]
    fn subgraph_ece_two_triangles() {
        let g = Graph::from_edges(
            6,
            &[
                (0, 1, 1.0),
                (1, 2, 1.0),
                (2, 0, 1.0),
                (3, 4, 1.0),
                (4, 5, 1.0),
                (5, 3, 1.0),
            ],
        )
        .unwrap();
        let p = louvain(&g, 1.0, 7);
        assert_eq!(p.num_communities(), 2);
        let conf = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4];
        let correct = [true, true, false, true, false, true];
        let view = view_of(&conf, &correct);
        // Tie on size: community containing node 0 wins.
        let e = subgraph_ece(&view, &p, &[true; 6], 15).unwrap().unwrap();
        let (expect, _) = ece(&conf[0..3], &correct[0..3], 15).unwrap();
        assert_eq!(e.to_bits(), expect.to_bits());
    }

    #[test]
    fn diagnostics_single_group_zero_std() {
        let g = Graph::from_edges(3, &[(0, 1, 1.0), (1, 2, 1.0)]).unwrap();
        let w = GroupWeights::from_tensor(crate::tensor::Tensor::from_vec(
            3,
            1,
            vec![1.0, 1.0, 1.0],
        )
        .unwrap())
        .unwrap();
        let d = group_diagnostics(&w, &g, &[0, 1, 0]);
        assert_eq!(d.degree_std, 0.0);
    }

    #[test]
    fn diagnostics_two_group_degree_std() {
        // Group 0 holds the two degree-2 hubs, group 1 the degree-4 pair:
        // mean degrees [2, 4] -> population std 1.
        let g = Graph::from_edges(
            4,
            &[
                (0, 1, 1.0),
                (0, 2, 1.0),
                (1, 2, 1.0),
                (2, 3, 1.0),
                (0, 3, 1.0),
                (1, 3, 1.0),
            ],
        )
        .unwrap();
        // degrees: all 3 in K4; build custom split instead.
        let degs = g.degrees();
        assert_eq!(degs, vec![3, 3, 3, 3]);
        let path = Graph::from_edges(
            6,
            &[
                (0, 1, 1.0),
                (1, 2, 1.0),
                (2, 3, 1.0),
                (3, 4, 1.0),
                (4, 5, 1.0),
                (5, 0, 1.0),
                (0, 2, 1.0),
                (2, 4, 1.0),
                (4, 0, 1.0),
            ],
        )
        .unwrap();
        // degrees: nodes 0,2,4 have 4; nodes 1,3,5 have 2.
        let mut data = vec![0.0; 12];
        for i in 0..6 {
            let grp = if i % 2 == 0 { 1 } else { 0 };
            data[i * 2 + grp] = 1.0;
        }
        let w = GroupWeights::from_tensor(
            crate::tensor::Tensor::from_vec(6, 2, data).unwrap(),
        )
        .unwrap();
        let d = group_diagnostics(&w, &path, &[0; 6]);
        assert!((d.degree_std - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diagnostics_uniform_class0_split_zero_std() {
        let g = Graph::from_edges(4, &[(0, 1, 1.0), (2, 3, 1.0)]).unwrap();
        let mut data = vec![0.0; 8];
        data[0] = 1.0; // node 0 -> group 0
        data[3] = 1.0; // node 1 -> group 1
        data[4] = 1.0; // node 2 -> group 0
        data[7] = 1.0; // node 3 -> group 1
        let w = GroupWeights::from_tensor(
            crate::tensor::Tensor::from_vec(4, 2, data).unwrap(),
        )
        .unwrap();
        let d = group_diagnostics(&w, &g, &[0, 0, 0, 0]);
        assert_eq!(d.class0_std, Some(0.0));
    }

    #[test]
    fn diagnostics_without_class0_is_undefined() {
        let g = Graph::from_edges(2, &[(0, 1, 1.0)]).unwrap();
        let w = GroupWeights::from_tensor(
            crate::tensor::Tensor::from_vec(2, 1, vec![1.0, 1.0]).unwrap(),
        )
        .unwrap();
        let d = group_diagnostics(&w, &g, &[1, 2]);
        assert_eq!(d.class0_std, None);
    }

    #[test]
    fn brute_force_agreement_on_random_instances() {
        // Independent oracle: loop bins, loop samples, test the interval
        // predicate directly.
        let brute = |conf: &[f64], correct: &[bool], bins: usize| -> f64 {
            let n = conf.len() as f64;
            let mut total = 0.0;
            for m in 1..=bins {
                let lower = (m - 1) as f64 / bins as f64;
                let upper = m as f64 / bins as f64;
                let members: Vec<usize> = (0..conf.len())
                    .filter(|&i| conf[i] > lower && conf[i] <= upper)
                    .collect();
                if members.is_empty() {
                    continue;
                }
                let acc = members.iter().filter(|&&i| correct[i]).count() as f64
                    / members.len() as f64;
                let mean_conf =
                    members.iter().map(|&i| conf[i]).sum::<f64>() / members.len() as f64;
                total += members.len() as f64 / n * (acc - mean_conf).abs();
            }
            total
        };
        for seed in 0..100u64 {
            let mut rng = stream(seed, "ece-brute");
            let n = 1 + rng.next_below(300) as usize;
            let bins = 1 + rng.next_below(20) as usize;
            let conf: Vec<f64> = (0..n).map(|_| rng.next_f64_open()).collect();
            let correct: Vec<bool> = (0..n).map(|_| rng.next_f64() < 0.6).collect();
            let (fast, _) = ece(&conf, &correct, bins).unwrap();
            let slow = brute(&conf, &correct, bins);
            assert!(
                (fast - slow).abs() < 1e-15,
                "seed {seed}: {fast} vs {slow}"
            );
        }
    }
}
