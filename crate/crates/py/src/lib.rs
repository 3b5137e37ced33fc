use std::path::PathBuf;

use disagree_core::eval;
use disagree_core::experiment::{run_cell, ExperimentManifest};
use disagree_core::ingest::EmbeddingStore;
use disagree_core::losses::{self, EmdPower, LossKind};
use disagree_core::model::{Activation, HeadKind, Mlp, ModelConfig, Prediction};
use disagree_core::stats::{self, ItemAnnotations, LikertDistribution, OppositionSegmentation, RatingScale};
use disagree_core::synth::{self, Mixture, SynthConfig};
use disagree_core::trainer::{Dataset, TrainConfig};
use disagree_core::Error;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

fn to_py(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn items(ratings: Vec<u32>, k: usize) -> PyResult<ItemAnnotations> {
    let scale = RatingScale::new(k).map_err(to_py)?;
    ItemAnnotations::new("item", ratings, scale).map_err(to_py)
}

fn dist(probs: Vec<f64>) -> PyResult<LikertDistribution> {
    LikertDistribution::new(probs).map_err(to_py)
}

fn json_to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Sample variance (N-1 denominator) of 0-based ratings on a K-point scale.
#[pyfunction]
fn unbiased_variance(ratings: Vec<u32>, k: usize) -> PyResult<f64> {
    stats::unbiased_variance(&items(ratings, k)?).map_err(to_py)
}

/// Empirical rating distribution of 0-based ratings.
#[pyfunction]
fn build_distribution(ratings: Vec<u32>, k: usize) -> PyResult<Vec<f64>> {
    Ok(stats::build_distribution(&items(ratings, k)?)
        .map_err(to_py)?
        .probs()
        .to_vec())
}

#[pyfunction]
fn distribution_variance(probs: Vec<f64>) -> PyResult<f64> {
    Ok(stats::distribution_variance(&dist(probs)?))
}

/// Opposition index; the segmentation defaults to the split around the centre.
#[pyfunction]
#[pyo3(signature = (probs, low=None, mid=None, high=None))]
fn opposition_index(
    probs: Vec<f64>,
    low: Option<Vec<usize>>,
    mid: Option<Vec<usize>>,
    high: Option<Vec<usize>>,
) -> PyResult<f64> {
    let d = dist(probs)?;
    let seg = match (low, mid, high) {
        (None, None, None) => stats::default_segmentation(d.scale()),
        (Some(l), m, Some(h)) => OppositionSegmentation::new(l, m.unwrap_or_default(), h).map_err(to_py)?,
        _ => return Err(PyValueError::new_err("give both low and high, or neither")),
    };
    stats::opposition_index(&d, &seg).map_err(to_py)
}

/// Loss between a predicted and a target distribution.
///
/// Returns `(value, grad)` where `grad` is taken with respect to the softmax
/// logits that produced `pred`.
#[pyfunction]
#[pyo3(signature = (kind, pred, target, lambda_mean=losses::DEFAULT_LAMBDA_MEAN, emd_power=2))]
fn distribution_loss(
    kind: &str,
    pred: Vec<f64>,
    target: Vec<f64>,
    lambda_mean: f64,
    emd_power: u8,
) -> PyResult<(f64, Vec<f64>)> {
    let power = EmdPower::try_from(emd_power).map_err(to_py)?;
    let (p, t) = (dist(pred)?, dist(target)?);
    let eval = match LossKind::parse_with(kind, lambda_mean, power).map_err(to_py)? {
        LossKind::Emd { emd_power } => losses::emd_loss(&p, &t, emd_power),
        LossKind::EmdMse { lambda_mean, emd_power } => losses::emd_mse_loss(&p, &t, lambda_mean, emd_power),
        LossKind::CumCe => losses::cumulative_ce_loss(&p, &t),
        LossKind::KlSoft => losses::kl_soft_loss(&p, &t),
        other => {
            return Err(PyValueError::new_err(format!(
                "{other} does not compare distributions"
            )))
        }
    }
    .map_err(to_py)?;
    Ok((eval.value, eval.grad))
}

/// Binary cross-entropy; the gradient is with respect to the sigmoid logit.
#[pyfunction]
fn binary_ce_loss(pred_prob: f64, target_prob: f64) -> PyResult<(f64, f64)> {
    let e = losses::binary_ce_loss(pred_prob, target_prob).map_err(to_py)?;
    Ok((e.value, e.grad[0]))
}

#[pyfunction]
fn var_reg_loss(pred_var: f64, target_var: f64) -> PyResult<(f64, f64)> {
    let e = losses::var_reg_loss(pred_var, target_var).map_err(to_py)?;
    Ok((e.value, e.grad[0]))
}

#[pyfunction]
fn var_mse(pred: Vec<f64>, target: Vec<f64>) -> PyResult<f64> {
    eval::var_mse(&pred, &target).map_err(to_py)
}

/// Spearman rank correlation with tied ranks averaged.
#[pyfunction]
fn spearman(pred: Vec<f64>, target: Vec<f64>) -> PyResult<f64> {
    eval::spearman(&pred, &target).map_err(to_py)
}

#[pyfunction]
fn disagree_f1(pred_var: Vec<f64>, target_var: Vec<f64>, threshold: f64) -> PyResult<f64> {
    eval::disagree_f1(&pred_var, &target_var, threshold).map_err(to_py)
}

#[pyfunction]
fn calibrate_threshold(pred_var: Vec<f64>, target_var: Vec<f64>) -> PyResult<f64> {
    eval::calibrate_threshold(&pred_var, &target_var).map_err(to_py)
}

/// Synthetic items as a list of dicts with ratings, features and the latent
/// distribution behind them.
#[pyfunction]
#[pyo3(signature = (n_items=2000, k=5, annotators=(5, 5), mixture=None, noise_temp=0.1, feature_dim=32, seed=0))]
#[allow(clippy::too_many_arguments)]
fn generate_corpus<'py>(
    py: Python<'py>,
    n_items: usize,
    k: usize,
    annotators: (usize, usize),
    mixture: Option<&str>,
    noise_temp: f64,
    feature_dim: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyList>> {
    let mixture = match mixture {
        Some(s) => s.parse::<Mixture>().map_err(to_py)?,
        None => Mixture::default(),
    };
    let cfg = SynthConfig {
        n_items,
        k_levels: k,
        annotators_per_item: annotators,
        mixture,
        noise_temp,
        feature_dim,
        seed,
    };
    let corpus = synth::generate_corpus(&cfg).map_err(to_py)?;
    let out = PyList::empty(py);
    for it in &corpus {
        let d = PyDict::new(py);
        d.set_item("item_id", &it.item_id)?;
        d.set_item("profile", it.profile.name())?;
        d.set_item("ratings", &it.ratings)?;
        d.set_item("features", &it.features)?;
        d.set_item("latent_probs", it.latent.probs())?;
        d.set_item("latent_variance", it.latent_variance())?;
        d.set_item("latent_opposition", it.latent_opposition())?;
        out.append(d)?;
    }
    Ok(out)
}

fn parse_head(head: &str, k: usize) -> PyResult<HeadKind> {
    match head {
        "distribution" => Ok(HeadKind::Distribution { k_levels: k }),
        "scalar" => Ok(HeadKind::ScalarNonNeg),
        "binary" => Ok(HeadKind::BinaryProb { k_levels: k }),
        other => Err(PyValueError::new_err(format!(
            "head must be distribution, scalar or binary, got '{other}'"
        ))),
    }
}

/// Feed-forward network with a distribution, variance or probability head.
#[pyclass(module = "disagree")]
struct Model {
    inner: Mlp,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (input_dim, head="distribution", k=5, hidden=None, activation="relu", seed=0))]
    fn new(
        input_dim: usize,
        head: &str,
        k: usize,
        hidden: Option<Vec<usize>>,
        activation: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let mut cfg = ModelConfig::new(input_dim, parse_head(head, k)?);
        if let Some(h) = hidden {
            cfg.hidden_dims = h;
        }
        cfg.activation = match activation {
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            other => return Err(PyValueError::new_err(format!("unknown activation '{other}'"))),
        };
        Ok(Self {
            inner: Mlp::init(cfg, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Mlp::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.config.parameter_count()
    }

    #[getter]
    fn head(&self) -> &'static str {
        match self.inner.config.head {
            HeadKind::Distribution { .. } => "distribution",
            HeadKind::ScalarNonNeg => "scalar",
            HeadKind::BinaryProb { .. } => "binary",
        }
    }

    /// Probabilities for a distribution head, otherwise a single float.
    fn forward<'py>(&self, py: Python<'py>, features: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
        match self.inner.forward(&features).map_err(to_py)? {
            Prediction::Distribution(d) => Ok(PyList::new(py, d.probs())?.into_any()),
            Prediction::Variance(v) | Prediction::Probability(v) => Ok(v.into_pyobject(py)?.into_any()),
        }
    }

    fn predict_variance(&self, features: Vec<f64>) -> PyResult<f64> {
        self.inner.predict_variance(&features).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!(
            "Model(input_dim={}, hidden={:?}, head={})",
            c.input_dim,
            c.hidden_dims,
            self.head()
        )
    }
}

/// Trains one model on a random split of the items.
///
/// Returns `(model, summary)`; the summary holds the test metrics and the
/// training history.
#[pyfunction]
#[pyo3(signature = (features, ratings, k, loss="emd", seed=1, hidden=None, learning_rate=1e-3, batch_size=64, max_epochs=200, patience=5, lambda_mean=losses::DEFAULT_LAMBDA_MEAN, emd_power=2))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    features: Vec<Vec<f64>>,
    ratings: Vec<Vec<u32>>,
    k: usize,
    loss: &str,
    seed: u64,
    hidden: Option<Vec<usize>>,
    learning_rate: f64,
    batch_size: usize,
    max_epochs: usize,
    patience: usize,
    lambda_mean: f64,
    emd_power: u8,
) -> PyResult<(Model, Bound<'py, PyAny>)> {
    if features.len() != ratings.len() {
        return Err(to_py(Error::LengthMismatch(features.len(), ratings.len())));
    }
    let scale = RatingScale::new(k).map_err(to_py)?;
    let dim = features.first().map_or(0, Vec::len);
    let mut store = EmbeddingStore::new(dim);
    let mut anns = Vec::with_capacity(ratings.len());
    for (i, (f, r)) in features.iter().zip(ratings).enumerate() {
        let id = format!("item{i}");
        let f32s: Vec<f32> = f.iter().map(|&v| v as f32).collect();
        store.insert(id.clone(), &f32s).map_err(to_py)?;
        anns.push(ItemAnnotations::new(id, r, scale).map_err(to_py)?);
    }
    let dataset = Dataset::from_items(&anns, &store).map_err(to_py)?;
    let power = EmdPower::try_from(emd_power).map_err(to_py)?;
    let kind = LossKind::parse_with(loss, lambda_mean, power).map_err(to_py)?;
    let manifest = ExperimentManifest {
        hidden_dims: hidden.unwrap_or_else(|| ModelConfig::new(dim, HeadKind::ScalarNonNeg).hidden_dims),
        train: TrainConfig {
            learning_rate,
            batch_size,
            max_epochs,
            patience,
            ..Default::default()
        },
        loss_kinds: vec![kind],
        seeds: vec![seed],
        ..Default::default()
    };
    manifest.validate().map_err(to_py)?;
    let outcome = py
        .detach(|| run_cell(&dataset, &manifest, &kind, seed))
        .map_err(to_py)?;
    let summary = json_to_py(py, &outcome.summary)?;
    summary.set_item("history", json_to_py(py, &outcome.history)?)?;
    Ok((Model { inner: outcome.model }, summary))
}

#[pymodule]
fn disagree(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(unbiased_variance, m)?)?;
    m.add_function(wrap_pyfunction!(build_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(distribution_variance, m)?)?;
    m.add_function(wrap_pyfunction!(opposition_index, m)?)?;
    m.add_function(wrap_pyfunction!(distribution_loss, m)?)?;
    m.add_function(wrap_pyfunction!(binary_ce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(var_reg_loss, m)?)?;
    m.add_function(wrap_pyfunction!(var_mse, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(disagree_f1, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_names_round_trip() {
        for name in ["distribution", "scalar", "binary"] {
            let m = Model::new(3, name, 5, Some(vec![2]), "relu", 0).unwrap();
            assert_eq!(m.head(), name);
        }
        assert!(parse_head("ordinal", 5).is_err());
    }
}
