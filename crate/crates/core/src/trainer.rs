//! Data splits, the optimization loop and early stopping.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::EmbeddingStore;
use crate::losses::{
    aggregate_binary, binary_ce_loss, cumulative_ce_loss, emd_loss, emd_mse_loss, kl_soft_loss,
    var_reg_loss, LossEval, LossKind,
};
use crate::model::{sigmoid, HeadKind, Mlp, MlpParams, ModelConfig, Prediction, Trace};
use crate::stats::{
    build_distribution, default_segmentation, opposition_index, unbiased_variance,
    ItemAnnotations, LikertDistribution, RatingScale,
};
use crate::synth::{derive_seed, LatentRecord};

const SPLIT_STREAM: u64 = 0x5eed_0001;
const INIT_STREAM: u64 = 0x5eed_0002;
const SHUFFLE_STREAM: u64 = 0x5eed_0003;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 200,
            patience: 5,
            seed: 0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.patience < 1 || self.batch_size < 1 || self.max_epochs < 1 {
            return Err(Error::InvalidConfig(
                "patience, batch_size and max_epochs must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Train, validation and test shares.
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ratios: [0.5, 0.25, 0.25],
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|r| r.is_nan() || *r <= 0.0) {
            return Err(Error::InvalidConfig("every split ratio must be > 0".into()));
        }
        let total: f64 = self.ratios.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "split ratios must sum to 1, got {total}"
            )));
        }
        Ok(())
    }
}

/// Item ids per split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }

    /// Fails if any id sits in more than one split.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for id in self.train.iter().chain(&self.validation).chain(&self.test) {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `n` items; ties go to the earlier split.
pub fn split_sizes(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, q) in sizes.iter_mut().zip(&quotas) {
        *s = q.floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut remaining = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        sizes[i] += 1;
        remaining -= 1;
    }
    sizes
}

/// Shuffles item ids with the split seed and cuts them into train/validation/test.
pub fn make_splits(item_ids: &[String], spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let mut seen = HashSet::new();
    for id in item_ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    let mut ids = item_ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, SPLIT_STREAM));
    ids.shuffle(&mut rng);
    let [n_train, n_val, _] = split_sizes(ids.len(), &spec.ratios);
    let test = ids.split_off(n_train + n_val);
    let validation = ids.split_off(n_train);
    let splits = Splits {
        train: ids,
        validation,
        test,
    };
    splits.check_disjoint()?;
    Ok(splits)
}

/// Ground truth of a synthetic item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentTruth {
    pub variance: f64,
    pub opposition: f64,
}

/// One item ready for training: features plus every target a head may need.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub item_id: String,
    pub features: Vec<f64>,
    pub distribution: LikertDistribution,
    pub unbiased_variance: f64,
    pub binary_target: f64,
    pub opposition: f64,
    pub latent: Option<LatentTruth>,
}

impl Example {
    pub fn new(item: &ItemAnnotations, features: Vec<f64>) -> Result<Self> {
        let distribution = build_distribution(item)?;
        Ok(Self {
            item_id: item.item_id.clone(),
            features,
            unbiased_variance: unbiased_variance(item)?,
            binary_target: aggregate_binary(&distribution),
            opposition: opposition_index(&distribution, &default_segmentation(item.scale))?,
            distribution,
            latent: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub scale: RatingScale,
    pub feature_dim: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    /// Joins items with their feature vectors; every item needs >= 2 ratings.
    pub fn from_items(items: &[ItemAnnotations], store: &EmbeddingStore) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidConfig("dataset has no items".into()))?;
        store.check_covers(items.iter().map(|it| it.item_id.as_str()))?;
        let examples = items
            .iter()
            .map(|it| {
                if it.scale != first.scale {
                    return Err(Error::ScaleMismatch {
                        expected: first.scale.k(),
                        actual: it.scale.k(),
                    });
                }
                let f = store.get(&it.item_id).expect("coverage checked");
                Example::new(it, f.iter().map(|&v| v as f64).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            scale: first.scale,
            feature_dim: store.dim(),
            examples,
        })
    }

    pub fn ids(&self) -> Vec<String> {
        self.examples.iter().map(|e| e.item_id.clone()).collect()
    }

    /// Examples for `ids`, in that order.
    pub fn select<'a>(&'a self, ids: &[String]) -> Result<Vec<&'a Example>> {
        let index: std::collections::HashMap<&str, &Example> = self
            .examples
            .iter()
            .map(|e| (e.item_id.as_str(), e))
            .collect();
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::MissingEmbeddings(vec![id.clone()]))
            })
            .collect()
    }

    /// Attaches synthetic ground truth; every example must be covered.
    pub fn attach_latent(&mut self, records: &[LatentRecord]) -> Result<()> {
        let index: std::collections::HashMap<&str, &LatentRecord> =
            records.iter().map(|r| (r.item_id.as_str(), r)).collect();
        let missing: Vec<String> = self
            .examples
            .iter()
            .filter(|e| !index.contains_key(e.item_id.as_str()))
            .map(|e| e.item_id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "latent truth missing for {} items, first {}",
                missing.len(),
                missing[0]
            )));
        }
        for e in &mut self.examples {
            let r = index[e.item_id.as_str()];
            e.latent = Some(LatentTruth {
                variance: r.variance,
                opposition: r.opposition,
            });
        }
        Ok(())
    }

    pub fn has_latent(&self) -> bool {
        self.examples.iter().all(|e| e.latent.is_some())
    }
}

/// Head that a loss kind trains.
pub fn head_for(kind: &LossKind, scale: RatingScale) -> HeadKind {
    match kind {
        LossKind::BinaryCe => HeadKind::BinaryProb { k_levels: scale.k() },
        LossKind::VarReg => HeadKind::ScalarNonNeg,
        _ => HeadKind::Distribution { k_levels: scale.k() },
    }
}

/// Loss of one item and its gradient with respect to the head pre-activation.
pub fn objective(kind: &LossKind, trace: &Trace, example: &Example) -> Result<LossEval> {
    match (kind, &trace.prediction) {
        (LossKind::BinaryCe, Prediction::Probability(p)) => binary_ce_loss(*p, example.binary_target),
        (LossKind::VarReg, Prediction::Variance(v)) => {
            let mut e = var_reg_loss(*v, example.unbiased_variance)?;
            // d softplus(z) / dz = sigmoid(z)
            e.grad[0] *= sigmoid(trace.head_preact()[0]);
            Ok(e)
        }
        (LossKind::Emd { emd_power }, Prediction::Distribution(d)) => {
            emd_loss(d, &example.distribution, *emd_power)
        }
        (
            LossKind::EmdMse {
                lambda_mean,
                emd_power,
            },
            Prediction::Distribution(d),
        ) => emd_mse_loss(d, &example.distribution, *lambda_mean, *emd_power),
        (LossKind::CumCe, Prediction::Distribution(d)) => cumulative_ce_loss(d, &example.distribution),
        (LossKind::KlSoft, Prediction::Distribution(d)) => kl_soft_loss(d, &example.distribution),
        (kind, pred) => Err(Error::InvalidConfig(format!(
            "loss {kind} cannot train a head producing {pred:?}"
        ))),
    }
}

/// Mean objective over a set of examples.
pub fn mean_loss(mlp: &Mlp, kind: &LossKind, examples: &[&Example]) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        total += objective(kind, &mlp.trace(&ex.features)?, ex)?.value;
    }
    Ok(total / examples.len().max(1) as f64)
}

/// Optimizer state for one parameter set.
pub enum Optimizer {
    Adam { m: Vec<f64>, v: Vec<f64>, t: i32 },
    Sgd,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, n: usize) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            },
            OptimizerKind::Sgd => Optimizer::Sgd,
        }
    }

    pub fn step(&mut self, params: &mut MlpParams, grads: &MlpParams, lr: f64) {
        match self {
            Optimizer::Sgd => {
                for (p, g) in params.values_mut().zip(grads.values()) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam { m, v, t } => {
                *t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(*t);
                let c2 = 1.0 - ADAM_BETA2.powi(*t);
                for (((p, g), m), v) in params.values_mut().zip(grads.values()).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// Patience-based stopping on a validation metric (lower is better).
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records `metric` for `epoch`; returns `true` when the epoch is a new best.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if metric < self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub best: Mlp,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Validation objective of the untrained network.
    pub initial_validation_loss: f64,
}

/// Seed used for weight initialization in a run keyed by `seed`.
pub fn init_seed(seed: u64) -> u64 {
    derive_seed(seed, INIT_STREAM)
}

/// Applies one optimizer step computed on `batch`; returns the batch's mean
/// loss before the update.
pub fn gradient_step(
    mlp: &mut Mlp,
    kind: &LossKind,
    batch: &[&Example],
    optimizer: &mut Optimizer,
    learning_rate: f64,
    grads: &mut MlpParams,
) -> Result<f64> {
    grads.fill_zero();
    let mut total = 0.0;
    for ex in batch {
        let trace = mlp.trace(&ex.features)?;
        let eval = objective(kind, &trace, ex)?;
        total += eval.value;
        mlp.accumulate_gradients(&trace, &eval.grad, grads)?;
    }
    let scale = 1.0 / batch.len() as f64;
    grads.values_mut().for_each(|g| *g *= scale);
    optimizer.step(&mut mlp.params, grads, learning_rate);
    Ok(total * scale)
}

/// Trains one model with early stopping on the validation objective.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &[&Example],
    validation_set: &[&Example],
    kind: &LossKind,
) -> Result<TrainResult> {
    train_cfg.validate()?;
    kind.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if validation_set.is_empty() {
        return Err(Error::EmptySplit("validation"));
    }
    let mut mlp = Mlp::init(model_cfg.clone(), init_seed(train_cfg.seed))?;
    let mut optimizer = Optimizer::new(train_cfg.optimizer, mlp.params.len());
    let mut grads = MlpParams::zeros(model_cfg);

    let initial_validation_loss = mean_loss(&mlp, kind, validation_set)?;
    let mut stopper = EarlyStopping::new(train_cfg.patience);
    let mut best = mlp.clone();
    let mut history = Vec::new();
    let mut order: Vec<&Example> = train_set.to_vec();

    for epoch in 1..=train_cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            derive_seed(train_cfg.seed, SHUFFLE_STREAM),
            epoch as u64,
        ));
        order.clear();
        order.extend_from_slice(train_set);
        order.shuffle(&mut rng);

        let mut train_total = 0.0;
        for batch in order.chunks(train_cfg.batch_size) {
            train_total += gradient_step(
                &mut mlp,
                kind,
                batch,
                &mut optimizer,
                train_cfg.learning_rate,
                &mut grads,
            )? * batch.len() as f64;
        }
        let train_loss = train_total / train_set.len() as f64;
        let validation_loss = mean_loss(&mlp, kind, validation_set)?;
        if !train_loss.is_finite() || !validation_loss.is_finite() || !mlp.params.all_finite() {
            return Err(Error::Diverged { epoch });
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            validation_loss,
        });
        if stopper.observe(epoch, validation_loss) {
            best = mlp.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }
    Ok(TrainResult {
        best,
        best_epoch: stopper.best_epoch(),
        history,
        initial_validation_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("id{i}")).collect()
    }

    #[test]
    fn split_sizes_follow_largest_remainder() {
        let r = [0.5, 0.25, 0.25];
        assert_eq!(split_sizes(100, &r), [50, 25, 25]);
        assert_eq!(split_sizes(101, &r), [51, 25, 25]);
        assert_eq!(split_sizes(102, &r), [51, 26, 25]);
        assert_eq!(split_sizes(3, &r), [1, 1, 1]);
        assert_eq!(split_sizes(2, &r), [1, 1, 0]);
    }

    #[test]
    fn splits_are_deterministic_and_disjoint() {
        let spec = SplitSpec { seed: 3, ..Default::default() };
        let a = make_splits(&ids(100), &spec).unwrap();
        assert_eq!(a.sizes(), (50, 25, 25));
        assert_eq!(a, make_splits(&ids(100), &spec).unwrap());
        a.check_disjoint().unwrap();
        let b = make_splits(&ids(100), &SplitSpec { seed: 4, ..Default::default() }).unwrap();
        assert_ne!(a, b);
        assert_eq!(make_splits(&ids(101), &spec).unwrap().sizes(), (51, 25, 25));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let mut v = ids(5);
        v.push("id0".into());
        assert!(matches!(make_splits(&v, &SplitSpec::default()), Err(Error::DuplicateId(_))));
    }

    #[test]
    fn bad_split_ratios() {
        let bad = SplitSpec { ratios: [0.5, 0.5, 0.0], seed: 0 };
        assert!(make_splits(&ids(4), &bad).is_err());
        let bad = SplitSpec { ratios: [0.5, 0.3, 0.3], seed: 0 };
        assert!(make_splits(&ids(4), &bad).is_err());
    }

    #[test]
    fn early_stopping_on_worsening_metric() {
        let mut s = EarlyStopping::new(5);
        let mut stopped_at = None;
        for epoch in 1..=20 {
            s.observe(epoch, epoch as f64);
            if s.should_stop() {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(6));
        assert_eq!(s.best_epoch(), 1);
    }

    #[test]
    fn early_stopping_resets_on_improvement() {
        let mut s = EarlyStopping::new(2);
        for (e, m) in [(1, 3.0), (2, 4.0), (3, 2.0), (4, 2.0)] {
            s.observe(e, m);
            assert!(!s.should_stop());
        }
        s.observe(5, 2.5);
        assert!(s.should_stop());
        assert_eq!(s.best_epoch(), 3);
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig { patience: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
    }
}
