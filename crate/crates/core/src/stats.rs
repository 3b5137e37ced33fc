//! Exact statistics over annotator ratings.
//!
//! Ratings are 0-based: a K-point Likert scale takes the values `0..K`.
//! Variance is offset-invariant, so this only affects reported means.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for a probability vector to count as normalized.
pub const NORM_TOLERANCE: f64 = 1e-9;

/// An ordered K-point rating scale with values `0, 1, ..., K-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct RatingScale(usize);

impl RatingScale {
    pub fn new(k_levels: usize) -> Result<Self> {
        if k_levels < 2 {
            return Err(Error::InvalidScale(format!(
                "k_levels must be >= 2, got {k_levels}"
            )));
        }
        Ok(Self(k_levels))
    }

    pub fn k(self) -> usize {
        self.0
    }

    pub fn max_rating(self) -> usize {
        self.0 - 1
    }

    /// Scale midpoint `(K-1)/2`.
    pub fn center(self) -> f64 {
        (self.0 - 1) as f64 / 2.0
    }

    /// Largest population variance any distribution on this scale can have:
    /// half the mass at each extreme.
    pub fn max_population_variance(self) -> f64 {
        let c = self.center();
        c * c
    }

    pub fn contains(self, rating: i64) -> bool {
        rating >= 0 && (rating as usize) < self.0
    }
}

impl TryFrom<usize> for RatingScale {
    type Error = Error;
    fn try_from(k: usize) -> Result<Self> {
        RatingScale::new(k)
    }
}

impl From<RatingScale> for usize {
    fn from(s: RatingScale) -> usize {
        s.0
    }
}

/// The ratings one item received from its annotators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemAnnotations {
    pub item_id: String,
    pub ratings: Vec<u32>,
    pub scale: RatingScale,
}

impl ItemAnnotations {
    pub fn new(item_id: impl Into<String>, ratings: Vec<u32>, scale: RatingScale) -> Result<Self> {
        let ann = Self {
            item_id: item_id.into(),
            ratings,
            scale,
        };
        ann.validate()?;
        Ok(ann)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratings.is_empty() {
            return Err(Error::NoAnnotations);
        }
        if let Some(&r) = self
            .ratings
            .iter()
            .find(|&&r| !self.scale.contains(r as i64))
        {
            return Err(Error::RatingOutOfScale {
                rating: r as i64,
                max: self.scale.max_rating(),
            });
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.ratings.len()
    }

    pub fn mean(&self) -> Result<f64> {
        if self.ratings.is_empty() {
            return Err(Error::NoAnnotations);
        }
        Ok(self.ratings.iter().map(|&r| r as f64).sum::<f64>() / self.n() as f64)
    }

    /// Rating counts per category.
    pub fn counts(&self) -> Result<Vec<usize>> {
        self.validate()?;
        let mut counts = vec![0usize; self.scale.k()];
        for &r in &self.ratings {
            counts[r as usize] += 1;
        }
        Ok(counts)
    }
}

/// A normalized probability vector over the K ordered ratings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikertDistribution {
    probs: Vec<f64>,
}

impl LikertDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        RatingScale::new(probs.len())?;
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "entry {p} is negative or non-finite"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("entries sum to {total}")));
        }
        Ok(Self { probs })
    }

    /// Builds from unnormalized non-negative weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::InvalidDistribution(format!(
                "weights sum to {total}"
            )));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn uniform(scale: RatingScale) -> Self {
        let k = scale.k();
        Self {
            probs: vec![1.0 / k as f64; k],
        }
    }

    pub fn point_mass(scale: RatingScale, rating: usize) -> Result<Self> {
        if rating >= scale.k() {
            return Err(Error::RatingOutOfScale {
                rating: rating as i64,
                max: scale.max_rating(),
            });
        }
        let mut probs = vec![0.0; scale.k()];
        probs[rating] = 1.0;
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn scale(&self) -> RatingScale {
        RatingScale(self.probs.len())
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    /// The distribution with the scale reversed (`k -> K-1-k`).
    pub fn mirrored(&self) -> Self {
        Self {
            probs: self.probs.iter().rev().copied().collect(),
        }
    }

    /// `P(rating > k)` for `k = 0..K-1`; the last entry is always 0.
    pub fn survival(&self) -> Vec<f64> {
        let k = self.k();
        let mut out = vec![0.0; k];
        let mut acc = 0.0;
        for i in (0..k.saturating_sub(1)).rev() {
            acc += self.probs[i + 1];
            out[i] = acc;
        }
        out
    }

    pub fn cdf(&self) -> Vec<f64> {
        self.probs
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p;
                Some(*acc)
            })
            .collect()
    }
}

/// Empirical rating distribution of one item.
pub fn build_distribution(ann: &ItemAnnotations) -> Result<LikertDistribution> {
    let counts = ann.counts()?;
    let n = ann.n() as f64;
    Ok(LikertDistribution {
        probs: counts.into_iter().map(|c| c as f64 / n).collect(),
    })
}

/// Unbiased (N-1) sample variance of an item's ratings.
pub fn unbiased_variance(ann: &ItemAnnotations) -> Result<f64> {
    ann.validate()?;
    let n = ann.n();
    if n < 2 {
        return Err(Error::VarianceUndefined(n));
    }
    let mean = ann.mean()?;
    let ss: f64 = ann
        .ratings
        .iter()
        .map(|&r| {
            let d = r as f64 - mean;
            d * d
        })
        .sum();
    Ok(ss / (n - 1) as f64)
}

/// Expected rating under the distribution.
pub fn distribution_mean(dist: &LikertDistribution) -> f64 {
    dist.probs
        .iter()
        .enumerate()
        .map(|(k, p)| p * k as f64)
        .sum()
}

/// Population variance of the rating under the distribution.
pub fn distribution_variance(dist: &LikertDistribution) -> f64 {
    let mean = distribution_mean(dist);
    dist.probs
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let d = k as f64 - mean;
            p * d * d
        })
        .sum()
}

/// Partition of the rating values into low, mid and high camps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OppositionSegmentation {
    pub low: Vec<usize>,
    pub mid: Vec<usize>,
    pub high: Vec<usize>,
}

impl OppositionSegmentation {
    pub fn new(mut low: Vec<usize>, mut mid: Vec<usize>, mut high: Vec<usize>) -> Result<Self> {
        low.sort_unstable();
        mid.sort_unstable();
        high.sort_unstable();
        let seg = Self { low, mid, high };
        let mut all: Vec<usize> = seg.all().collect();
        all.sort_unstable();
        let before = all.len();
        all.dedup();
        if all.len() != before {
            return Err(Error::InvalidConfig("segments overlap".into()));
        }
        if seg.low.is_empty() || seg.high.is_empty() {
            return Err(Error::InvalidConfig(
                "low and high segments must be non-empty".into(),
            ));
        }
        if seg.low.last() >= seg.high.first() {
            return Err(Error::InvalidConfig(
                "every low value must be below every high value".into(),
            ));
        }
        Ok(seg)
    }

    fn all(&self) -> impl Iterator<Item = usize> + '_ {
        self.low
            .iter()
            .chain(self.mid.iter())
            .chain(self.high.iter())
            .copied()
    }

    /// Checks that the segments cover exactly `0..K`.
    pub fn check_scale(&self, scale: RatingScale) -> Result<()> {
        let mut all: Vec<usize> = self.all().collect();
        all.sort_unstable();
        if all != (0..scale.k()).collect::<Vec<_>>() {
            return Err(Error::ScaleMismatch {
                expected: scale.k(),
                actual: all.len(),
            });
        }
        Ok(())
    }

    /// Segmentation of the mirrored scale (`k -> K-1-k`, low and high swapped).
    pub fn mirrored(&self, scale: RatingScale) -> Self {
        let flip = |v: &[usize]| {
            let mut out: Vec<usize> = v.iter().map(|k| scale.max_rating() - k).collect();
            out.sort_unstable();
            out
        };
        Self {
            low: flip(&self.high),
            mid: flip(&self.mid),
            high: flip(&self.low),
        }
    }
}

/// Half-split segmentation: values below the scale center are low, above are high,
/// and the center value (odd K only) is mid. For even K the mid segment is empty.
pub fn default_segmentation(scale: RatingScale) -> OppositionSegmentation {
    let center = scale.center();
    let mut seg = OppositionSegmentation {
        low: Vec::new(),
        mid: Vec::new(),
        high: Vec::new(),
    };
    for k in 0..scale.k() {
        let v = k as f64;
        if v < center {
            seg.low.push(k);
        } else if v > center {
            seg.high.push(k);
        } else {
            seg.mid.push(k);
        }
    }
    seg
}

/// Segment mass, accumulated from the scale edges inward so that mirroring the
/// distribution reproduces the same floating-point sum.
fn segment_mass(probs: &[f64], members: &[usize]) -> f64 {
    let last = probs.len() - 1;
    let dist_to_edge = |k: usize| k.min(last - k);
    let mut levels: Vec<usize> = members.iter().map(|&k| dist_to_edge(k)).collect();
    levels.sort_unstable();
    levels.dedup();
    levels
        .into_iter()
        .map(|lvl| {
            members
                .iter()
                .filter(|&&k| dist_to_edge(k) == lvl)
                .map(|&k| probs[k])
                .sum::<f64>()
        })
        .sum()
}

/// Camp masses `(P_low, P_mid, P_high)`.
pub fn segment_masses(
    dist: &LikertDistribution,
    seg: &OppositionSegmentation,
) -> Result<(f64, f64, f64)> {
    seg.check_scale(dist.scale())?;
    Ok((
        segment_mass(&dist.probs, &seg.low),
        segment_mass(&dist.probs, &seg.mid),
        segment_mass(&dist.probs, &seg.high),
    ))
}

/// Opposition Index `2 * min(P_low, P_high) * (1 - P_mid)`, in `[0, 1]`.
///
/// 1 means half the annotators sit in each extreme camp with nobody in the middle;
/// 0 means at least one extreme camp is empty (or everyone is in the middle).
pub fn opposition_index(dist: &LikertDistribution, seg: &OppositionSegmentation) -> Result<f64> {
    let (low, mid, high) = segment_masses(dist, seg)?;
    Ok((2.0 * low.min(high) * (1.0 - mid)).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(ratings: &[u32], k: usize) -> ItemAnnotations {
        ItemAnnotations::new("x", ratings.to_vec(), RatingScale::new(k).unwrap()).unwrap()
    }

    fn dist(p: &[f64]) -> LikertDistribution {
        LikertDistribution::new(p.to_vec()).unwrap()
    }

    #[test]
    fn build_distribution_examples() {
        assert_eq!(
            build_distribution(&item(&[1, 1, 0, 1, 2], 5)).unwrap().probs(),
            &[0.2, 0.6, 0.2, 0.0, 0.0]
        );
        assert_eq!(
            build_distribution(&item(&[2, 2, 2], 3)).unwrap().probs(),
            &[0.0, 0.0, 1.0]
        );
        assert_eq!(
            build_distribution(&item(&[0, 0, 0, 2, 2, 2], 3))
                .unwrap()
                .probs(),
            &[0.5, 0.0, 0.5]
        );
    }

    #[test]
    fn build_distribution_errors() {
        let scale = RatingScale::new(3).unwrap();
        let empty = ItemAnnotations {
            item_id: "e".into(),
            ratings: vec![],
            scale,
        };
        let err = build_distribution(&empty).unwrap_err();
        assert_eq!(err.to_string(), "no annotations");
        let bad = ItemAnnotations {
            item_id: "b".into(),
            ratings: vec![0, 3],
            scale,
        };
        assert!(build_distribution(&bad)
            .unwrap_err()
            .to_string()
            .starts_with("rating out of scale"));
    }

    #[test]
    fn unbiased_variance_examples() {
        assert!((unbiased_variance(&item(&[0, 0, 0, 2, 2, 2], 3)).unwrap() - 1.2).abs() < 1e-15);
        assert_eq!(unbiased_variance(&item(&[2, 2, 2], 3)).unwrap(), 0.0);
        assert!((unbiased_variance(&item(&[1, 1, 0, 1, 2], 5)).unwrap() - 0.5).abs() < 1e-15);
        let err = unbiased_variance(&item(&[1], 3)).unwrap_err();
        assert!(err.to_string().starts_with("variance undefined"));
    }

    #[test]
    fn mean_and_variance_of_distributions() {
        let d = dist(&[0.2, 0.6, 0.2, 0.0, 0.0]);
        assert!((distribution_mean(&d) - 1.0).abs() < 1e-15);
        assert!((distribution_variance(&d) - 0.4).abs() < 1e-15);

        let s3 = RatingScale::new(3).unwrap();
        let u = LikertDistribution::uniform(s3);
        assert!((distribution_mean(&u) - 1.0).abs() < 1e-15);
        assert!((distribution_variance(&u) - 2.0 / 3.0).abs() < 1e-15);

        for k in 0..3 {
            let pm = LikertDistribution::point_mass(s3, k).unwrap();
            assert_eq!(distribution_mean(&pm), k as f64);
            assert_eq!(distribution_variance(&pm), 0.0);
        }
    }

    #[test]
    fn default_segmentations() {
        let seg = default_segmentation(RatingScale::new(3).unwrap());
        assert_eq!((seg.low, seg.mid, seg.high), (vec![0], vec![1], vec![2]));
        let seg = default_segmentation(RatingScale::new(5).unwrap());
        assert_eq!(
            (seg.low, seg.mid, seg.high),
            (vec![0, 1], vec![2], vec![3, 4])
        );
        let seg = default_segmentation(RatingScale::new(2).unwrap());
        assert_eq!((seg.low, seg.mid, seg.high), (vec![0], vec![], vec![1]));
    }

    #[test]
    fn opposition_index_examples() {
        let s3 = RatingScale::new(3).unwrap();
        let seg = default_segmentation(s3);
        assert_eq!(opposition_index(&dist(&[0.5, 0.0, 0.5]), &seg).unwrap(), 1.0);
        assert_eq!(opposition_index(&dist(&[0.0, 1.0, 0.0]), &seg).unwrap(), 0.0);
        let row3 = build_distribution(&item(&[0, 0, 0, 2, 2], 3)).unwrap();
        assert!((opposition_index(&row3, &seg).unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn opposition_index_rejects_mismatched_segmentation() {
        let seg = default_segmentation(RatingScale::new(5).unwrap());
        assert!(matches!(
            opposition_index(&dist(&[0.5, 0.0, 0.5]), &seg),
            Err(Error::ScaleMismatch { .. })
        ));
    }

    #[test]
    fn segmentation_validation() {
        assert!(OppositionSegmentation::new(vec![0, 1], vec![1], vec![2]).is_err());
        assert!(OppositionSegmentation::new(vec![2], vec![1], vec![0]).is_err());
        assert!(OppositionSegmentation::new(vec![0], vec![1, 2], vec![3]).is_ok());
    }

    #[test]
    fn distribution_validation() {
        assert!(LikertDistribution::new(vec![0.5, 0.4]).is_err());
        assert!(LikertDistribution::new(vec![1.5, -0.5]).is_err());
        assert!(LikertDistribution::new(vec![1.0]).is_err());
        assert!(LikertDistribution::new(vec![0.5, 0.5 + 1e-12]).is_ok());
    }

    #[test]
    fn survival_and_cdf() {
        let d = dist(&[0.2, 0.3, 0.5]);
        let s = d.survival();
        assert!((s[0] - 0.8).abs() < 1e-15 && (s[1] - 0.5).abs() < 1e-15 && s[2] == 0.0);
        let c = d.cdf();
        assert!((c[0] - 0.2).abs() < 1e-15 && (c[1] - 0.5).abs() < 1e-15);
    }
}
