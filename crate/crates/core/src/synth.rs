//! Synthetic annotator populations with known latent rating distributions.
//!
//! Each item draws a latent distribution from one of five profiles, samples
//! its annotations i.i.d. from it, and exposes a feature vector that is a noisy
//! affine image of the latent log-probabilities. Variance and opposition are then
//! recoverable from the features, with `noise_temp` controlling how well.

use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{AnnotationRecord, EmbeddingStore};
use crate::stats::{
    default_segmentation, distribution_variance, opposition_index, LikertDistribution,
    RatingScale,
};

pub const DEFAULT_FEATURE_DIM: usize = 32;

/// Probabilities are floored here before taking logs for the feature map.
pub const LOG_PROB_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    ConsensusLow,
    ConsensusMid,
    ConsensusHigh,
    /// Majority near one end, minority at the opposite extreme.
    Skewed,
    /// Half at the lowest rating, half at the highest.
    Polarized,
}

impl Profile {
    pub const ALL: [Profile; 5] = [
        Profile::ConsensusLow,
        Profile::ConsensusMid,
        Profile::ConsensusHigh,
        Profile::Skewed,
        Profile::Polarized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Profile::ConsensusLow => "consensus-low",
            Profile::ConsensusMid => "consensus-mid",
            Profile::ConsensusHigh => "consensus-high",
            Profile::Skewed => "skewed",
            Profile::Polarized => "polarized",
        }
    }
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Profile::ALL
            .into_iter()
            .find(|p| p.name() == norm)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown profile '{s}'")))
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Profile weights, in [`Profile::ALL`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixture(pub [f64; 5]);

impl Default for Mixture {
    fn default() -> Self {
        Mixture([0.25, 0.2, 0.15, 0.3, 0.1])
    }
}

impl Mixture {
    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig(
                "mixture weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = self.0.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "mixture weights must sum to 1, got {total}"
            )));
        }
        Ok(())
    }

    pub fn weight(&self, p: Profile) -> f64 {
        self.0[Profile::ALL.iter().position(|q| *q == p).expect("known profile")]
    }
}

/// Parses `name=weight,...`; unnamed profiles get weight 0.
impl FromStr for Mixture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut w = [0.0; 5];
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            let (name, val) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("expected name=weight, got '{part}'")))?;
            let profile: Profile = name.parse()?;
            let val: f64 = val
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad weight '{val}'")))?;
            w[Profile::ALL.iter().position(|q| *q == profile).expect("known")] = val;
        }
        let m = Mixture(w);
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_items: usize,
    pub k_levels: usize,
    /// Inclusive range of annotators per item.
    pub annotators_per_item: (usize, usize),
    pub mixture: Mixture,
    /// Standard deviation of the Gaussian feature noise.
    pub noise_temp: f64,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_items: 2000,
            k_levels: 5,
            annotators_per_item: (5, 5),
            mixture: Mixture::default(),
            noise_temp: 0.1,
            feature_dim: DEFAULT_FEATURE_DIM,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<RatingScale> {
        self.mixture.validate()?;
        let (lo, hi) = self.annotators_per_item;
        if lo < 2 || hi < lo {
            return Err(Error::InvalidConfig(format!(
                "annotators_per_item must satisfy 2 <= min <= max, got ({lo}, {hi})"
            )));
        }
        if !(self.noise_temp > 0.0 && self.noise_temp.is_finite()) {
            return Err(Error::InvalidConfig("noise_temp must be > 0".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::InvalidConfig("feature_dim must be positive".into()));
        }
        RatingScale::new(self.k_levels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthItem {
    pub item_id: String,
    pub profile: Profile,
    pub latent: LikertDistribution,
    pub features: Vec<f32>,
    pub ratings: Vec<u32>,
}

impl SynthItem {
    pub fn latent_variance(&self) -> f64 {
        distribution_variance(&self.latent)
    }

    pub fn latent_opposition(&self) -> f64 {
        opposition_index(&self.latent, &default_segmentation(self.latent.scale()))
            .expect("default segmentation matches")
    }
}

/// Independent stream seed for `(base, stream)`, via SplitMix64 finalization.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const PROJECTION_STREAM: u64 = u64::MAX;

/// I.i.d. categorical draws from `latent`.
pub fn sample_annotations(latent: &LikertDistribution, n: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with(latent, n, &mut rng)
}

fn sample_with<R: Rng>(latent: &LikertDistribution, n: usize, rng: &mut R) -> Vec<u32> {
    let dist = WeightedIndex::new(latent.probs()).expect("valid distribution has positive mass");
    (0..n).map(|_| dist.sample(rng) as u32).collect()
}

fn bump(support: &[usize], peak: f64, spread: f64, k: usize) -> Vec<f64> {
    let mut w = vec![0.0; k];
    for &i in support {
        let d = i as f64 - peak;
        w[i] = (-d * d / (2.0 * spread * spread)).exp();
    }
    w
}

fn mirror(w: Vec<f64>) -> Vec<f64> {
    w.into_iter().rev().collect()
}

/// Draws a latent distribution of the given profile.
pub fn latent_for_profile<R: Rng>(profile: Profile, scale: RatingScale, rng: &mut R) -> LikertDistribution {
    let k = scale.k();
    let c = scale.center();
    let lower: Vec<usize> = (0..k).filter(|&i| i as f64 <= c).collect();
    let mut spread = || rng.random_range(0.25..1.0);
    let weights = match profile {
        Profile::ConsensusLow | Profile::ConsensusHigh => {
            let s = spread();
            let peak = rng.random_range(0.0..=c / 2.0);
            let w = bump(&lower, peak, s, k);
            if profile == Profile::ConsensusHigh {
                mirror(w)
            } else {
                w
            }
        }
        Profile::ConsensusMid => {
            // Mass on the center and one side only, so one extreme camp is empty.
            let s = spread();
            let peak = *lower.last().expect("non-empty") as f64;
            let w = bump(&lower, peak, s, k);
            if rng.random_bool(0.5) {
                mirror(w)
            } else {
                w
            }
        }
        Profile::Skewed => {
            let s = spread();
            let peak = rng.random_range(0.0..=c / 2.0);
            let minority = rng.random_range(0.05..0.45);
            let mut w = bump(&lower, peak, s, k);
            let total: f64 = w.iter().sum();
            for v in &mut w {
                *v *= (1.0 - minority) / total;
            }
            w[k - 1] += minority;
            if rng.random_bool(0.5) {
                mirror(w)
            } else {
                w
            }
        }
        Profile::Polarized => {
            let mut w = vec![0.0; k];
            w[0] = 0.5;
            w[k - 1] = 0.5;
            w
        }
    };
    LikertDistribution::from_weights(&weights).expect("profile weights are positive")
}

/// Centered log-probabilities, the categorical's natural parameters up to a constant.
pub fn latent_parameters(latent: &LikertDistribution) -> Vec<f64> {
    let logs: Vec<f64> = latent.probs().iter().map(|p| p.max(LOG_PROB_FLOOR).ln()).collect();
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    logs.iter().map(|l| l - mean).collect()
}

/// Fixed random affine map from latent parameters to feature space.
struct Projection {
    matrix: Vec<f64>,
    offset: Vec<f64>,
    k: usize,
}

impl Projection {
    fn new(seed: u64, k: usize, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, PROJECTION_STREAM));
        let normal = Normal::new(0.0, 1.0).expect("valid normal");
        Self {
            matrix: (0..dim * k).map(|_| normal.sample(&mut rng)).collect(),
            offset: (0..dim).map(|_| 0.1 * normal.sample(&mut rng)).collect(),
            k,
        }
    }

    fn apply<R: Rng>(&self, params: &[f64], noise: f64, rng: &mut R) -> Vec<f32> {
        let normal = Normal::new(0.0, noise).expect("noise_temp > 0");
        self.matrix
            .chunks_exact(self.k)
            .zip(&self.offset)
            .map(|(row, b)| {
                let clean: f64 = b + row.iter().zip(params).map(|(a, p)| a * p).sum::<f64>();
                (clean + normal.sample(rng)) as f32
            })
            .collect()
    }
}

/// Generates a synthetic corpus, deterministic in `cfg.seed`. Items are
/// generated from per-item seed streams so the work shards freely.
pub fn generate_corpus(cfg: &SynthConfig) -> Result<Vec<SynthItem>> {
    let scale = cfg.validate()?;
    let projection = Projection::new(cfg.seed, scale.k(), cfg.feature_dim);
    let chooser = WeightedIndex::new(cfg.mixture.0)
        .map_err(|e| Error::InvalidConfig(format!("mixture: {e}")))?;
    let width = cfg.n_items.max(1).to_string().len();
    Ok((0..cfg.n_items)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, i as u64));
            let profile = Profile::ALL[chooser.sample(&mut rng)];
            let latent = latent_for_profile(profile, scale, &mut rng);
            let (lo, hi) = cfg.annotators_per_item;
            let n = rng.random_range(lo..=hi);
            let ratings = sample_with(&latent, n, &mut rng);
            let features = projection.apply(&latent_parameters(&latent), cfg.noise_temp, &mut rng);
            SynthItem {
                item_id: format!("syn{i:0width$}"),
                profile,
                latent,
                features,
                ratings,
            }
        })
        .collect())
}

/// One annotation record per rating, with synthetic annotator ids.
pub fn to_records(items: &[SynthItem]) -> Vec<AnnotationRecord> {
    items
        .iter()
        .flat_map(|it| {
            it.ratings.iter().enumerate().map(move |(j, &r)| AnnotationRecord {
                item_id: it.item_id.clone(),
                text: None,
                rating: r,
                annotator_id: Some(format!("ann{j}")),
            })
        })
        .collect()
}

pub fn to_embedding_store(items: &[SynthItem]) -> Result<EmbeddingStore> {
    let dim = items.first().map(|it| it.features.len()).unwrap_or(1);
    let mut store = EmbeddingStore::new(dim);
    for it in items {
        store.insert(it.item_id.clone(), &it.features)?;
    }
    Ok(store)
}

/// Ground truth written alongside a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentRecord {
    pub item_id: String,
    pub profile: Profile,
    pub probs: Vec<f64>,
    pub variance: f64,
    pub opposition: f64,
}

pub fn to_latent_records(items: &[SynthItem]) -> Vec<LatentRecord> {
    items
        .iter()
        .map(|it| LatentRecord {
            item_id: it.item_id.clone(),
            profile: it.profile,
            probs: it.latent.probs().to_vec(),
            variance: it.latent_variance(),
            opposition: it.latent_opposition(),
        })
        .collect()
}

pub fn latent_to_jsonl(records: &[LatentRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn load_latent(path: &std::path::Path) -> Result<Vec<LatentRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}
