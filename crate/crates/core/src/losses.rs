//! Training objectives over Likert distributions and scalar targets.
//!
//! Every distribution loss returns its gradient with respect to the
//! pre-softmax logits of the prediction: the softmax Jacobian depends only on
//! the normalized probabilities, so it is composed here analytically and the
//! model never needs a generic autodiff.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{distribution_mean, LikertDistribution};

/// Lower/upper clamp for every probability that enters a logarithm.
pub const PROB_CLAMP: f64 = 1e-8;
/// Additive smoothing applied to both sides of the KL-soft loss.
pub const KL_EPSILON: f64 = 1e-8;
/// Default weight of the mean-matching term in EMD+MSE.
pub const DEFAULT_LAMBDA_MEAN: f64 = 1.0;

/// Exponent applied to CDF differences in the EMD loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum EmdPower {
    /// Absolute CDF differences: the exact 1-D Wasserstein-1 distance scaled by 1/K.
    L1,
    /// Squared CDF differences, smooth everywhere.
    #[default]
    L2,
}

impl TryFrom<u8> for EmdPower {
    type Error = Error;
    fn try_from(p: u8) -> Result<Self> {
        match p {
            1 => Ok(EmdPower::L1),
            2 => Ok(EmdPower::L2),
            _ => Err(Error::InvalidConfig(format!("emd_power must be 1 or 2, got {p}"))),
        }
    }
}

impl From<EmdPower> for u8 {
    fn from(p: EmdPower) -> u8 {
        match p {
            EmdPower::L1 => 1,
            EmdPower::L2 => 2,
        }
    }
}

/// The six training configurations compared in the experiment grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "snake_case")]
pub enum LossKind {
    /// Binary cross-entropy on the aggregated positive-class probability.
    BinaryCe,
    /// Squared error regression on the unbiased variance.
    VarReg,
    Emd {
        #[serde(default)]
        emd_power: EmdPower,
    },
    EmdMse {
        lambda_mean: f64,
        #[serde(default)]
        emd_power: EmdPower,
    },
    CumCe,
    KlSoft,
}

impl LossKind {
    /// All six kinds with default hyperparameters, in report order.
    pub fn all(lambda_mean: f64, emd_power: EmdPower) -> Vec<LossKind> {
        vec![
            LossKind::BinaryCe,
            LossKind::VarReg,
            LossKind::Emd { emd_power },
            LossKind::EmdMse {
                lambda_mean,
                emd_power,
            },
            LossKind::CumCe,
            LossKind::KlSoft,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::BinaryCe => "binary_ce",
            LossKind::VarReg => "var_reg",
            LossKind::Emd { .. } => "emd",
            LossKind::EmdMse { .. } => "emd_mse",
            LossKind::CumCe => "cum_ce",
            LossKind::KlSoft => "kl_soft",
        }
    }

    /// Row label used in reports.
    pub fn label(&self) -> &'static str {
        match self {
            LossKind::BinaryCe => "Binary CE",
            LossKind::VarReg => "Var Reg",
            LossKind::Emd { .. } => "EMD",
            LossKind::EmdMse { .. } => "EMD+MSE",
            LossKind::CumCe => "Cum CE",
            LossKind::KlSoft => "KL Soft",
        }
    }

    pub fn uses_distribution_head(&self) -> bool {
        !matches!(self, LossKind::BinaryCe | LossKind::VarReg)
    }

    pub fn validate(&self) -> Result<()> {
        if let LossKind::EmdMse { lambda_mean, .. } = self {
            if !(lambda_mean.is_finite() && *lambda_mean >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "lambda_mean must be finite and >= 0, got {lambda_mean}"
                )));
            }
        }
        Ok(())
    }

    /// Parses a CLI loss name, attaching the given hyperparameters.
    pub fn parse_with(name: &str, lambda_mean: f64, emd_power: EmdPower) -> Result<LossKind> {
        let kind = match name.trim().to_ascii_lowercase().as_str() {
            "binary_ce" => LossKind::BinaryCe,
            "var_reg" => LossKind::VarReg,
            "emd" => LossKind::Emd { emd_power },
            "emd_mse" => LossKind::EmdMse {
                lambda_mean,
                emd_power,
            },
            "cum_ce" => LossKind::CumCe,
            "kl_soft" => LossKind::KlSoft,
            other => {
                return Err(Error::InvalidConfig(format!("unknown loss kind '{other}'")))
            }
        };
        kind.validate()?;
        Ok(kind)
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LossKind::parse_with(s, DEFAULT_LAMBDA_MEAN, EmdPower::default())
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A loss value and its gradient with respect to the head pre-activations
/// (or the raw prediction, for [`var_reg_loss`]).
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_same_k(pred: &LikertDistribution, target: &LikertDistribution) -> Result<()> {
    if pred.k() != target.k() {
        return Err(Error::ScaleMismatch {
            expected: target.k(),
            actual: pred.k(),
        });
    }
    Ok(())
}

/// Chains `dL/dp` through the softmax: `dL/dz_j = p_j (g_j - sum_i p_i g_i)`.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(grad_probs)
        .map(|(p, g)| p * (g - dot))
        .collect()
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Binary cross-entropy with clamped probability.
pub fn bce(q: f64, t: f64) -> f64 {
    let q = clamp_prob(q);
    -(t * q.ln() + (1.0 - t) * (1.0 - q).ln())
}

/// `dBCE/dq`, zero inside the clamped region.
fn bce_grad(q: f64, t: f64) -> f64 {
    if q <= PROB_CLAMP || q >= 1.0 - PROB_CLAMP {
        return 0.0;
    }
    (q - t) / (q * (1.0 - q))
}

fn emd_parts(
    pred: &LikertDistribution,
    target: &LikertDistribution,
    power: EmdPower,
) -> (f64, Vec<f64>) {
    let k = pred.k();
    let kf = k as f64;
    let diffs: Vec<f64> = pred
        .cdf()
        .iter()
        .zip(target.cdf())
        .map(|(a, b)| a - b)
        .collect();
    let value = diffs
        .iter()
        .map(|d| match power {
            EmdPower::L1 => d.abs(),
            EmdPower::L2 => d * d,
        })
        .sum::<f64>()
        / kf;
    // CDF(k) depends on p_j for every j <= k, so dV/dp_j sums the tail k >= j.
    let mut grad = vec![0.0; k];
    let mut acc = 0.0;
    for j in (0..k).rev() {
        let d = diffs[j];
        acc += match power {
            EmdPower::L1 => {
                if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            EmdPower::L2 => 2.0 * d,
        } / kf;
        grad[j] = acc;
    }
    (value, grad)
}

/// Earth Mover's Distance between two Likert distributions:
/// `(1/K) sum_k |CDF_pred(k) - CDF_target(k)|^p`.
pub fn emd_loss(
    pred: &LikertDistribution,
    target: &LikertDistribution,
    power: EmdPower,
) -> Result<LossEval> {
    check_same_k(pred, target)?;
    let (value, grad_p) = emd_parts(pred, target, power);
    Ok(LossEval {
        value,
        grad: softmax_backward(pred.probs(), &grad_p),
    })
}

/// EMD plus `lambda_mean` times the squared gap between expected ratings.
pub fn emd_mse_loss(
    pred: &LikertDistribution,
    target: &LikertDistribution,
    lambda_mean: f64,
    power: EmdPower,
) -> Result<LossEval> {
    check_same_k(pred, target)?;
    if !(lambda_mean.is_finite() && lambda_mean >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "lambda_mean must be finite and >= 0, got {lambda_mean}"
        )));
    }
    let (emd, mut grad_p) = emd_parts(pred, target, power);
    let gap = distribution_mean(pred) - distribution_mean(target);
    for (j, g) in grad_p.iter_mut().enumerate() {
        *g += lambda_mean * 2.0 * gap * j as f64;
    }
    Ok(LossEval {
        value: emd + lambda_mean * gap * gap,
        grad: softmax_backward(pred.probs(), &grad_p),
    })
}

/// Per-threshold binary cross-entropies `BCE(P_pred(y > k), P_target(y > k))`
/// for `k = 0..K-2`.
pub fn cumulative_ce_terms(
    pred: &LikertDistribution,
    target: &LikertDistribution,
) -> Result<Vec<f64>> {
    check_same_k(pred, target)?;
    let q = pred.survival();
    let t = target.survival();
    Ok((0..pred.k() - 1).map(|k| bce(q[k], t[k])).collect())
}

/// Ordinal cumulative cross-entropy: the sum of the K-1 threshold BCE terms.
pub fn cumulative_ce_loss(
    pred: &LikertDistribution,
    target: &LikertDistribution,
) -> Result<LossEval> {
    let terms = cumulative_ce_terms(pred, target)?;
    let k = pred.k();
    let q = pred.survival();
    let t = target.survival();
    // q_k = sum_{j > k} p_j, so dV/dp_j = sum_{k < j} dBCE_k/dq_k.
    let mut grad_p = vec![0.0; k];
    let mut acc = 0.0;
    for j in 1..k {
        acc += bce_grad(q[j - 1], t[j - 1]);
        grad_p[j] = acc;
    }
    Ok(LossEval {
        value: terms.iter().sum(),
        grad: softmax_backward(pred.probs(), &grad_p),
    })
}

fn smooth(p: &[f64]) -> Vec<f64> {
    let denom = 1.0 + p.len() as f64 * KL_EPSILON;
    p.iter().map(|x| (x + KL_EPSILON) / denom).collect()
}

/// KL divergence from the prediction to the soft-label target, both smoothed
/// by [`KL_EPSILON`] and renormalized. Ignores ordinal distance entirely.
pub fn kl_soft_loss(pred: &LikertDistribution, target: &LikertDistribution) -> Result<LossEval> {
    check_same_k(pred, target)?;
    let ps = smooth(pred.probs());
    let ts = smooth(target.probs());
    let value = ts
        .iter()
        .zip(&ps)
        .map(|(t, p)| t * (t.ln() - p.ln()))
        .sum::<f64>()
        .max(0.0);
    let scale = 1.0 / (1.0 + pred.k() as f64 * KL_EPSILON);
    let grad_p: Vec<f64> = ts.iter().zip(&ps).map(|(t, p)| -t / p * scale).collect();
    Ok(LossEval {
        value,
        grad: softmax_backward(pred.probs(), &grad_p),
    })
}

/// Binary cross-entropy of a sigmoid output; the gradient is taken with respect
/// to the pre-sigmoid logit, which is simply `p - t`.
pub fn binary_ce_loss(pred_prob: f64, target_prob: f64) -> Result<LossEval> {
    if !(0.0..=1.0).contains(&target_prob) || !pred_prob.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "binary CE needs finite prediction and target in [0,1], got ({pred_prob}, {target_prob})"
        )));
    }
    Ok(LossEval {
        value: bce(pred_prob, target_prob),
        grad: vec![pred_prob - target_prob],
    })
}

/// Mass strictly above the scale center `(K-1)/2`: the positive class of the
/// aggregated binary baseline.
pub fn aggregate_binary(target: &LikertDistribution) -> f64 {
    let center = target.scale().center();
    target
        .probs()
        .iter()
        .enumerate()
        .filter(|(k, _)| *k as f64 > center)
        .map(|(_, p)| p)
        .sum()
}

/// Squared error on a scalar variance; the gradient is with respect to the
/// predicted variance itself.
pub fn var_reg_loss(pred_var: f64, target_var: f64) -> Result<LossEval> {
    if !(pred_var.is_finite() && target_var.is_finite()) || pred_var < 0.0 || target_var < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "variance regression needs finite non-negative values, got ({pred_var}, {target_var})"
        )));
    }
    let d = pred_var - target_var;
    Ok(LossEval {
        value: d * d,
        grad: vec![2.0 * d],
    })
}
