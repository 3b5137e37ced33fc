//! Evaluation metrics for predicted annotation variance and opposition.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::RatingScale;

pub const DEFAULT_VAR_BINS: usize = 6;
pub const DEFAULT_OPP_BINS: usize = 5;

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    Ok(())
}

/// Mean squared error between predicted and target variances.
pub fn var_mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_lengths(pred, target)?;
    if pred.is_empty() {
        return Err(Error::LengthMismatch(0, 0));
    }
    let ss: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(ss / pred.len() as f64)
}

/// 1-based ranks with ties sharing the mean of the positions they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i..j (0-based) -> ranks i+1..=j
        let avg = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = avg;
        }
        i = j;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(x, y)?;
    if x.len() < 2 {
        return Err(Error::CorrelationUndefined("fewer than 2 observations"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::CorrelationUndefined("constant input"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with tie-averaged ranks.
pub fn spearman(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_lengths(pred, target)?;
    if pred.iter().chain(target).any(|v| v.is_nan()) {
        return Err(Error::CorrelationUndefined("NaN input"));
    }
    pearson(&average_ranks(pred), &average_ranks(target))
}

/// Confusion summary of the "does this item show any disagreement" task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisagreeF1 {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    /// No predicted and no actual positives; `f1` is 1 by convention.
    pub vacuous: bool,
}

/// F1 of predicting `target_var > 0` by `pred_var > threshold`. Precision
/// (recall) with no predicted (actual) positives is 1, as nothing was got wrong.
pub fn disagree_f1_detail(pred_var: &[f64], target_var: &[f64], threshold: f64) -> Result<DisagreeF1> {
    check_lengths(pred_var, target_var)?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (p, t) in pred_var.iter().zip(target_var) {
        match (*p > threshold, *t > 0.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fneg == 0 {
        return Ok(DisagreeF1 {
            f1: 1.0,
            precision: 1.0,
            recall: 1.0,
            vacuous: true,
        });
    }
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    Ok(DisagreeF1 {
        f1: (2 * tp) as f64 / (2 * tp + fp + fneg) as f64,
        precision,
        recall,
        vacuous: false,
    })
}

pub fn disagree_f1(pred_var: &[f64], target_var: &[f64], threshold: f64) -> Result<f64> {
    Ok(disagree_f1_detail(pred_var, target_var, threshold)?.f1)
}

/// Threshold maximizing Disagree-F1 on validation predictions.
///
/// Candidates are a value below the smallest prediction followed by the
/// midpoints between consecutive distinct predictions, scanned in increasing
/// order; the first maximum wins.
pub fn calibrate_threshold(pred_var: &[f64], target_var: &[f64]) -> Result<f64> {
    check_lengths(pred_var, target_var)?;
    if pred_var.is_empty() {
        return Err(Error::InvalidConfig(
            "cannot calibrate a threshold on no predictions".into(),
        ));
    }
    let mut uniq: Vec<f64> = pred_var.to_vec();
    uniq.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    uniq.dedup();
    let below = if uniq[0] > 0.0 { uniq[0] / 2.0 } else { 0.0 };
    let candidates =
        std::iter::once(below).chain(uniq.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    let mut best = (f64::NEG_INFINITY, below);
    for thr in candidates {
        let f1 = disagree_f1(pred_var, target_var, thr)?;
        if f1 > best.0 {
            best = (f1, thr);
        }
    }
    Ok(best.1)
}

/// Metrics of one trained model on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub var_mse: f64,
    pub var_spearman: f64,
    pub disagree_f1: f64,
    pub threshold_used: f64,
    pub n_items: usize,
}

pub fn evaluate(pred_var: &[f64], target_var: &[f64], threshold: f64) -> Result<EvalReport> {
    Ok(EvalReport {
        var_mse: var_mse(pred_var, target_var)?,
        var_spearman: spearman(pred_var, target_var)?,
        disagree_f1: disagree_f1(pred_var, target_var, threshold)?,
        threshold_used: threshold,
        n_items: pred_var.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
    /// `None` for an empty bin.
    pub mean_target: Option<f64>,
    pub mean_pred: Option<f64>,
    /// Population standard deviation of the predictions in the bin.
    pub std_pred: Option<f64>,
}

/// Items grouped by target value, comparing target and prediction per bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinTable {
    pub rows: Vec<BinRow>,
}

impl BinTable {
    pub fn n_items(&self) -> usize {
        self.rows.iter().map(|r| r.count).sum()
    }

    /// Predicted means of non-empty bins, in bin order.
    pub fn pred_means(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.mean_pred).collect()
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut out = String::from("bin_lo,bin_hi,count,mean_target,mean_pred,std_pred\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.bin_lo,
                r.bin_hi,
                r.count,
                opt(r.mean_target),
                opt(r.mean_pred),
                opt(r.std_pred)
            );
        }
        out
    }
}

/// `n_bins + 1` equally spaced edges over `[lo, hi]`.
pub fn equal_width_edges(lo: f64, hi: f64, n_bins: usize) -> Result<Vec<f64>> {
    if n_bins == 0 || hi.partial_cmp(&lo) != Some(Ordering::Greater) {
        return Err(Error::InvalidConfig(format!(
            "need n_bins >= 1 and hi > lo, got {n_bins} bins over [{lo}, {hi}]"
        )));
    }
    let w = (hi - lo) / n_bins as f64;
    let mut edges: Vec<f64> = (0..n_bins).map(|i| lo + w * i as f64).collect();
    edges.push(hi);
    Ok(edges)
}

/// Equal-width variance bins over `[0, ((K-1)/2)^2]`, the largest population
/// variance on the scale. Unbiased targets from very few annotators can exceed
/// that bound; the upper edge is then stretched to the largest target.
pub fn default_variance_edges(scale: RatingScale, n_bins: usize, targets: &[f64]) -> Result<Vec<f64>> {
    let max_t = targets.iter().copied().fold(0.0, f64::max);
    equal_width_edges(0.0, scale.max_population_variance().max(max_t), n_bins)
}

pub fn default_opposition_edges(n_bins: usize) -> Result<Vec<f64>> {
    equal_width_edges(0.0, 1.0, n_bins)
}

/// Assigns items to half-open bins `[lo, hi)` (last bin closed) by target.
pub fn bin_analysis(target: &[f64], pred: &[f64], edges: &[f64]) -> Result<BinTable> {
    check_lengths(target, pred)?;
    if edges.len() < 2 || edges.windows(2).any(|w| w[1].partial_cmp(&w[0]) != Some(Ordering::Greater)) {
        return Err(Error::InvalidConfig(
            "bin edges must be strictly increasing with at least two entries".into(),
        ));
    }
    let n_bins = edges.len() - 1;
    let (lo, hi) = (edges[0], edges[n_bins]);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_bins];
    for (i, &t) in target.iter().enumerate() {
        if !(t >= lo && t <= hi) {
            return Err(Error::UncoveredValue { value: t, lo, hi });
        }
        // Last edge <= t picks the bin; t == hi goes to the closed last bin.
        let b = edges[1..n_bins].partition_point(|&e| e <= t);
        members[b].push(i);
    }
    let rows = members
        .iter()
        .enumerate()
        .map(|(b, idx)| {
            let count = idx.len();
            let mean = |v: &[f64]| idx.iter().map(|&i| v[i]).sum::<f64>() / count as f64;
            let (mean_target, mean_pred, std_pred) = if count == 0 {
                (None, None, None)
            } else {
                let mp = mean(pred);
                let var = idx.iter().map(|&i| (pred[i] - mp).powi(2)).sum::<f64>() / count as f64;
                (Some(mean(target)), Some(mp), Some(var.sqrt()))
            };
            BinRow {
                bin_lo: edges[b],
                bin_hi: edges[b + 1],
                count,
                mean_target,
                mean_pred,
                std_pred,
            }
        })
        .collect();
    Ok(BinTable { rows })
}

/// Mean and sample standard deviation of one metric across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample (n-1) standard deviation; 0 for a single value.
    pub std: f64,
    pub values: Vec<f64>,
    /// Set when only one value was aggregated, so `std` carries no information.
    pub single_seed: bool,
}

impl Aggregate {
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidConfig("nothing to aggregate".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Ok(Self {
            mean,
            std,
            single_seed: values.len() == 1,
            values,
        })
    }

    /// `"mean ± std"`.
    pub fn display(&self, decimals: usize) -> String {
        format!("{:.*} ± {:.*}", decimals, self.mean, decimals, self.std)
    }
}
