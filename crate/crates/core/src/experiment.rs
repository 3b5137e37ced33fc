//! The multi-seed experiment protocol and post-hoc bin analyses.
//!
//! Every (loss kind, seed) cell resplits the data with that seed, initializes
//! and shuffles from streams derived from it, trains with early stopping,
//! calibrates the disagreement threshold on validation and scores the test
//! split. Cells are independent and run in parallel; results are merged in
//! grid order so reports are byte-for-byte reproducible.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{
    bin_analysis, calibrate_threshold, default_opposition_edges, default_variance_edges,
    evaluate, spearman, Aggregate, BinTable, EvalReport,
};
use crate::io::{to_json_bytes, write_atomic};
use crate::losses::{EmdPower, LossKind, DEFAULT_LAMBDA_MEAN};
use crate::model::{
    prediction_variance, Activation, HeadKind, Mlp, ModelConfig, Prediction, DEFAULT_HIDDEN,
};
use crate::stats::{default_segmentation, opposition_index};
use crate::trainer::{
    head_for, make_splits, train, Dataset, EpochRecord, Example, SplitSpec, Splits, TrainConfig,
};

pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// Everything needed to replay an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentManifest {
    pub dataset_name: String,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    /// Optimization settings; the seed is replaced per cell.
    pub train: TrainConfig,
    pub split_ratios: [f64; 3],
    pub loss_kinds: Vec<LossKind>,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentManifest {
    fn default() -> Self {
        Self {
            dataset_name: "dataset".into(),
            hidden_dims: DEFAULT_HIDDEN.to_vec(),
            activation: Activation::Relu,
            train: TrainConfig::default(),
            split_ratios: SplitSpec::default().ratios,
            loss_kinds: LossKind::all(DEFAULT_LAMBDA_MEAN, EmdPower::default()),
            seeds: DEFAULT_SEEDS.to_vec(),
        }
    }
}

impl ExperimentManifest {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        if self.loss_kinds.is_empty() {
            return Err(Error::InvalidConfig("at least one loss kind is required".into()));
        }
        for k in &self.loss_kinds {
            k.validate()?;
        }
        self.train.validate()?;
        SplitSpec {
            ratios: self.split_ratios,
            seed: 0,
        }
        .validate()
    }

    pub fn model_config(&self, dataset: &Dataset, kind: &LossKind) -> ModelConfig {
        ModelConfig {
            input_dim: dataset.feature_dim,
            hidden_dims: self.hidden_dims.clone(),
            activation: self.activation,
            head: head_for(kind, dataset.scale),
        }
    }
}

/// Scores against the synthetic ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentEval {
    pub variance: EvalReport,
    pub opposition_spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub loss: LossKind,
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub initial_validation_loss: f64,
    pub best_validation_loss: f64,
    pub test: EvalReport,
    /// Spearman of predicted vs empirical opposition index; distribution heads only.
    pub opposition_spearman: Option<f64>,
    pub latent: Option<LatentEval>,
}

/// A finished cell with its trained model.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub summary: CellSummary,
    pub model: Mlp,
    pub splits: Splits,
    pub history: Vec<EpochRecord>,
}

/// Per-item predictions of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub variance: Vec<f64>,
    /// Opposition index of predicted distributions; `None` for non-distribution heads.
    pub opposition: Option<Vec<f64>>,
}

pub fn predict(model: &Mlp, examples: &[&Example]) -> Result<Predictions> {
    let is_dist = matches!(model.config.head, HeadKind::Distribution { .. });
    let mut variance = Vec::with_capacity(examples.len());
    let mut opposition = Vec::with_capacity(if is_dist { examples.len() } else { 0 });
    for ex in examples {
        let pred = model.forward(&ex.features)?;
        variance.push(prediction_variance(&pred, model.config.head));
        if let Prediction::Distribution(d) = &pred {
            opposition.push(opposition_index(d, &default_segmentation(d.scale()))?);
        }
    }
    Ok(Predictions {
        variance,
        opposition: is_dist.then_some(opposition),
    })
}

fn optional_spearman(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    match spearman(a, b) {
        Ok(r) => Ok(Some(r)),
        Err(Error::CorrelationUndefined(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Trains and scores one (loss kind, seed) cell.
pub fn run_cell(
    dataset: &Dataset,
    manifest: &ExperimentManifest,
    kind: &LossKind,
    seed: u64,
) -> Result<CellOutcome> {
    let wrap = |e: Error| Error::Run {
        loss: kind.name().into(),
        seed,
        source: Box::new(e),
    };
    (|| {
        let splits = make_splits(
            &dataset.ids(),
            &SplitSpec {
                ratios: manifest.split_ratios,
                seed,
            },
        )?;
        let train_set = dataset.select(&splits.train)?;
        let val_set = dataset.select(&splits.validation)?;
        let test_set = dataset.select(&splits.test)?;
        if test_set.is_empty() {
            return Err(Error::EmptySplit("test"));
        }
        let train_cfg = TrainConfig {
            seed,
            ..manifest.train.clone()
        };
        let model_cfg = manifest.model_config(dataset, kind);
        let result = train(&model_cfg, &train_cfg, &train_set, &val_set, kind)?;
        let model = result.best;

        let val_pred = predict(&model, &val_set)?;
        let val_target: Vec<f64> = val_set.iter().map(|e| e.unbiased_variance).collect();
        let threshold = calibrate_threshold(&val_pred.variance, &val_target)?;

        let test_pred = predict(&model, &test_set)?;
        let test_target: Vec<f64> = test_set.iter().map(|e| e.unbiased_variance).collect();
        let test = evaluate(&test_pred.variance, &test_target, threshold)?;
        let opposition_spearman = match &test_pred.opposition {
            Some(pred) => {
                let emp: Vec<f64> = test_set.iter().map(|e| e.opposition).collect();
                optional_spearman(pred, &emp)?
            }
            None => None,
        };
        let latent = if test_set.iter().all(|e| e.latent.is_some()) {
            let truth: Vec<_> = test_set
                .iter()
                .map(|e| e.latent.as_ref().expect("checked"))
                .collect();
            let lat_var: Vec<f64> = truth.iter().map(|t| t.variance).collect();
            let lat_opp: Vec<f64> = truth.iter().map(|t| t.opposition).collect();
            Some(LatentEval {
                variance: evaluate(&test_pred.variance, &lat_var, threshold)?,
                opposition_spearman: match &test_pred.opposition {
                    Some(pred) => optional_spearman(pred, &lat_opp)?,
                    None => None,
                },
            })
        } else {
            None
        };

        let best_validation_loss = result
            .history
            .iter()
            .find(|h| h.epoch == result.best_epoch)
            .map(|h| h.validation_loss)
            .unwrap_or(result.initial_validation_loss);
        Ok(CellOutcome {
            summary: CellSummary {
                loss: *kind,
                seed,
                best_epoch: result.best_epoch,
                epochs_run: result.history.len(),
                initial_validation_loss: result.initial_validation_loss,
                best_validation_loss,
                test,
                opposition_spearman,
                latent,
            },
            model,
            splits,
            history: result.history,
        })
    })()
    .map_err(wrap)
}

/// A loss kind's metrics aggregated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub loss: LossKind,
    pub label: String,
    pub n_seeds: usize,
    pub var_mse: Aggregate,
    pub var_corr: Aggregate,
    pub disagree_f1: Aggregate,
    pub threshold: Aggregate,
    pub latent_var_mse: Option<Aggregate>,
    pub latent_var_corr: Option<Aggregate>,
    /// Free-form caveats, e.g. how a variance was derived from a binary head.
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub manifest: ExperimentManifest,
    pub n_items: usize,
    pub k_levels: usize,
    pub rows: Vec<ReportRow>,
    pub cells: Vec<CellSummary>,
}

fn aggregate_by(cells: &[&CellSummary], f: impl Fn(&CellSummary) -> f64) -> Result<Aggregate> {
    Aggregate::from_values(cells.iter().map(|c| f(c)).collect())
}

/// Aggregates cell summaries into one row per loss kind (mean and sample std).
pub fn aggregate_rows(manifest: &ExperimentManifest, cells: &[CellSummary]) -> Result<Vec<ReportRow>> {
    manifest
        .loss_kinds
        .iter()
        .map(|kind| {
            let mine: Vec<&CellSummary> = cells.iter().filter(|c| c.loss == *kind).collect();
            let latent = mine.iter().all(|c| c.latent.is_some()) && !mine.is_empty();
            let mut notes = Vec::new();
            if *kind == LossKind::BinaryCe {
                notes.push(
                    "variance from binary head via Bernoulli-extremes mapping p(1-p)(K-1)^2".into(),
                );
            }
            if mine.len() == 1 {
                notes.push("single seed: std reported as 0".into());
            }
            Ok(ReportRow {
                dataset: manifest.dataset_name.clone(),
                loss: *kind,
                label: kind.label().into(),
                n_seeds: mine.len(),
                var_mse: aggregate_by(&mine, |c| c.test.var_mse)?,
                var_corr: aggregate_by(&mine, |c| c.test.var_spearman)?,
                disagree_f1: aggregate_by(&mine, |c| c.test.disagree_f1)?,
                threshold: aggregate_by(&mine, |c| c.test.threshold_used)?,
                latent_var_mse: if latent {
                    Some(aggregate_by(&mine, |c| c.latent.as_ref().expect("checked").variance.var_mse)?)
                } else {
                    None
                },
                latent_var_corr: if latent {
                    Some(aggregate_by(&mine, |c| {
                        c.latent.as_ref().expect("checked").variance.var_spearman
                    })?)
                } else {
                    None
                },
                notes,
            })
        })
        .collect()
}

/// Runs the full grid of loss kinds x seeds.
pub fn run_experiment(dataset: &Dataset, manifest: &ExperimentManifest) -> Result<(ExperimentReport, Vec<CellOutcome>)> {
    manifest.validate()?;
    let grid: Vec<(LossKind, u64)> = manifest
        .loss_kinds
        .iter()
        .flat_map(|k| manifest.seeds.iter().map(move |s| (*k, *s)))
        .collect();
    let outcomes: Vec<CellOutcome> = grid
        .par_iter()
        .map(|(kind, seed)| run_cell(dataset, manifest, kind, *seed))
        .collect::<Result<_>>()?;
    let cells: Vec<CellSummary> = outcomes.iter().map(|o| o.summary.clone()).collect();
    let report = ExperimentReport {
        manifest: manifest.clone(),
        n_items: dataset.examples.len(),
        k_levels: dataset.scale.k(),
        rows: aggregate_rows(manifest, &cells)?,
        cells,
    };
    Ok((report, outcomes))
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        to_json_bytes(self)
    }

    /// One row per loss kind with MSE, correlation and F1 columns.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "dataset,model,n_seeds,var_mse_mean,var_mse_std,var_corr_mean,var_corr_std,disagree_f1_mean,disagree_f1_std\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.dataset,
                r.label,
                r.n_seeds,
                r.var_mse.mean,
                r.var_mse.std,
                r.var_corr.mean,
                r.var_corr.std,
                r.disagree_f1.mean,
                r.disagree_f1.std
            );
        }
        out
    }

    /// Human-readable table with `mean ± std` cells.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<10} {:>18} {:>18} {:>20}\n",
            "Model", "Var_MSE", "Var_Corr", "Disagree_F1"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<10} {:>18} {:>18} {:>20}",
                r.label,
                r.var_mse.display(3),
                r.var_corr.display(3),
                r.disagree_f1.display(4)
            );
        }
        out
    }
}

pub fn cell_dir_name(kind: &LossKind, seed: u64) -> String {
    format!("{}_seed{}", kind.name(), seed)
}

/// Writes `report.json`, `report.csv` and one directory per cell with its
/// checkpoint, splits, summary and training history.
pub fn write_experiment(out_dir: &Path, report: &ExperimentReport, outcomes: &[CellOutcome]) -> Result<()> {
    write_atomic(&out_dir.join("report.json"), &report.to_json()?)?;
    write_atomic(&out_dir.join("report.csv"), report.to_csv().as_bytes())?;
    for o in outcomes {
        let dir = out_dir
            .join("cells")
            .join(cell_dir_name(&o.summary.loss, o.summary.seed));
        write_cell(&dir, o)?;
    }
    Ok(())
}

pub fn write_cell(dir: &Path, o: &CellOutcome) -> Result<()> {
    o.model.save(&dir.join("checkpoint.bin"))?;
    write_atomic(&dir.join("splits.json"), &to_json_bytes(&o.splits)?)?;
    write_atomic(&dir.join("cell.json"), &to_json_bytes(&o.summary)?)?;
    write_atomic(&dir.join("history.json"), &to_json_bytes(&o.history)?)?;
    Ok(())
}

/// What the bin analyses compare predictions against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisTarget {
    /// Unbiased variance and opposition index of the observed ratings.
    Empirical,
    /// Synthetic ground truth.
    Latent,
}

#[derive(Debug)]
pub struct Analysis {
    pub variance: BinTable,
    /// `Err(NotApplicable)` for scalar and binary heads.
    pub opposition: Result<BinTable>,
}

/// Variance-bin and opposition-bin tables of a model on a set of items.
pub fn analyze(
    model: &Mlp,
    examples: &[&Example],
    target: AnalysisTarget,
    var_bins: usize,
    opp_bins: usize,
) -> Result<Analysis> {
    if examples.is_empty() {
        return Err(Error::EmptySplit("analysis"));
    }
    let scale = examples[0].distribution.scale();
    let pred = predict(model, examples)?;
    let (var_t, opp_t): (Vec<f64>, Vec<f64>) = match target {
        AnalysisTarget::Empirical => examples
            .iter()
            .map(|e| (e.unbiased_variance, e.opposition))
            .unzip(),
        AnalysisTarget::Latent => examples
            .iter()
            .map(|e| {
                e.latent
                    .as_ref()
                    .map(|l| (l.variance, l.opposition))
                    .ok_or_else(|| Error::NotApplicable("n/a: items carry no latent truth".into()))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip(),
    };
    let variance = bin_analysis(
        &var_t,
        &pred.variance,
        &default_variance_edges(scale, var_bins, &var_t)?,
    )?;
    let opposition = match &pred.opposition {
        Some(p) => bin_analysis(&opp_t, p, &default_opposition_edges(opp_bins)?),
        None => Err(Error::NotApplicable(
            "n/a: opposition analysis needs a distribution head".into(),
        )),
    };
    Ok(Analysis {
        variance,
        opposition,
    })
}
