use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use disagree_core::eval::{BinTable, DEFAULT_OPP_BINS, DEFAULT_VAR_BINS};
use disagree_core::experiment::{
    analyze, run_cell, run_experiment, write_cell, write_experiment, AnalysisTarget,
    ExperimentManifest,
};
use disagree_core::ingest::{
    group_and_filter, load_embeddings, parse_annotations, summarize, write_annotations_jsonl,
    AnnotationFormat, Corpus, EmbeddingStore, IngestConfig, DEFAULT_SUMMARY_BINS,
};
use disagree_core::io::{to_json_bytes, write_atomic};
use disagree_core::losses::{EmdPower, LossKind, DEFAULT_LAMBDA_MEAN};
use disagree_core::model::{Activation, Mlp, DEFAULT_HIDDEN};
use disagree_core::synth::{
    generate_corpus, latent_to_jsonl, load_latent, to_embedding_store, to_latent_records,
    to_records, Mixture, SynthConfig, DEFAULT_FEATURE_DIM,
};
use disagree_core::trainer::{Dataset, OptimizerKind, Splits};
use disagree_core::Error;
use serde::Serialize;
use serde_json::json;

use crate::args::{AnalyzeArgs, ExperimentArgs, IngestArgs, ModelArgs, SynthArgs, Tables, TrainArgs};
use crate::config::{pick, FileConfig};
use crate::manifest::RunManifest;

pub const CORPUS_FILE: &str = "corpus.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const LATENT_FILE: &str = "latent.jsonl";

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidConfig(msg.into()).into()
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(invalid(format!("no such file: {}", path.display())))
    }
}

/// "5" or "3-7".
pub fn parse_annotator_range(s: &str) -> Result<(usize, usize)> {
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| invalid(format!("bad annotator count '{s}'")))
    };
    match s.split_once('-') {
        Some((lo, hi)) => Ok((parse(lo)?, parse(hi)?)),
        None => {
            let n = parse(s)?;
            Ok((n, n))
        }
    }
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn parse_enum<T: serde::de::DeserializeOwned>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(json!(s)).map_err(|_| invalid(format!("unknown {what} '{s}'")))
}

pub fn synth(args: SynthArgs, file: &FileConfig) -> Result<()> {
    let d = SynthConfig::default();
    let annotators = match args.annotators.or(file.annotators.clone()) {
        Some(s) => parse_annotator_range(&s)?,
        None => d.annotators_per_item,
    };
    let mixture = match args.mixture.or(file.mixture.clone()) {
        Some(s) => s.parse::<Mixture>()?,
        None => d.mixture,
    };
    let cfg = SynthConfig {
        n_items: pick(args.n_items, file.n_items, d.n_items),
        k_levels: pick(args.k, file.k, d.k_levels),
        annotators_per_item: annotators,
        mixture,
        noise_temp: pick(args.noise_temp, file.noise_temp, d.noise_temp),
        feature_dim: pick(args.dim, file.feature_dim, DEFAULT_FEATURE_DIM),
        seed: pick(args.seed, file.seed, d.seed),
    };
    cfg.validate()?;
    let items = generate_corpus(&cfg)?;
    let out = &args.out;
    write_atomic(
        &out.join("annotations.jsonl"),
        &write_annotations_jsonl(&to_records(&items))?,
    )?;
    write_atomic(&out.join(EMBEDDINGS_FILE), &to_embedding_store(&items)?.to_bytes())?;
    write_atomic(&out.join(LATENT_FILE), &latent_to_jsonl(&to_latent_records(&items))?)?;
    RunManifest::new("synth", &cfg, vec![cfg.seed])?.finish(out)?;
    eprintln!("wrote {} items to {}", items.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct ResolvedIngest {
    #[serde(flatten)]
    ingest: IngestConfig,
    summary_bins: usize,
}

pub fn ingest(args: IngestArgs, file: &FileConfig) -> Result<()> {
    let cfg = IngestConfig {
        k_levels: pick(args.k, file.k, 5),
        min_annotators: pick(args.min_annotators, file.min_annotators, 2),
        merge_duplicate_texts: args.merge_duplicates || file.merge_duplicates.unwrap_or(false),
    };
    let bins = pick(args.bins, file.summary_bins, DEFAULT_SUMMARY_BINS);
    let scale = cfg.validate()?;
    require_file(&args.annotations)?;
    require_file(&args.embeddings)?;

    let parsed = parse_annotations(
        &args.annotations,
        AnnotationFormat::from_path(&args.annotations)?,
        scale,
    )?;
    let items = group_and_filter(&parsed.records, &cfg)?;
    if items.is_empty() {
        bail!(invalid(format!(
            "no items left after requiring {} annotators",
            cfg.min_annotators
        )));
    }
    let store = load_embeddings(&args.embeddings)?;
    store.check_covers(items.iter().map(|it| it.item_id.as_str()))?;
    let mut aligned = EmbeddingStore::new(store.dim());
    for it in &items {
        aligned.insert(it.item_id.clone(), store.get(&it.item_id).expect("coverage checked"))?;
    }

    let out = &args.out;
    let corpus = Corpus::from_items(scale, &items);
    write_atomic(&out.join(CORPUS_FILE), &to_json_bytes(&corpus)?)?;
    write_atomic(&out.join(EMBEDDINGS_FILE), &aligned.to_bytes())?;
    if let Some(latent_path) = &args.latent {
        require_file(latent_path)?;
        let keep: std::collections::HashSet<&str> =
            items.iter().map(|it| it.item_id.as_str()).collect();
        let latent: Vec<_> = load_latent(latent_path)?
            .into_iter()
            .filter(|r| keep.contains(r.item_id.as_str()))
            .collect();
        write_atomic(&out.join(LATENT_FILE), &latent_to_jsonl(&latent)?)?;
    }

    let summary = summarize(&items, bins)?;
    write_atomic(&out.join("summary.json"), &to_json_bytes(&summary)?)?;
    write_atomic(
        &out.join("summary_mean.csv"),
        summary.mean_histogram.to_csv().as_bytes(),
    )?;
    let var_csv = summary
        .variance_histogram
        .as_ref()
        .map(|h| h.to_csv())
        .unwrap_or_else(|| "bin_lo,bin_hi,density\n".into());
    write_atomic(&out.join("summary_variance.csv"), var_csv.as_bytes())?;
    write_atomic(&out.join("ingest_errors.json"), &to_json_bytes(&parsed.errors)?)?;

    let mut manifest = RunManifest::new(
        "ingest",
        ResolvedIngest {
            ingest: cfg,
            summary_bins: bins,
        },
        vec![],
    )?
    .input(&args.annotations)?
    .input(&args.embeddings)?;
    if let Some(p) = &args.latent {
        manifest = manifest.input(p)?;
    }
    manifest.finish(out)?;
    eprintln!(
        "kept {} items ({} ratings, {} malformed lines skipped)",
        summary.n_items,
        summary.n_ratings,
        parsed.errors.len()
    );
    Ok(())
}

/// Loads an ingest output directory, attaching latent truth when present.
pub fn load_data(dir: &Path) -> Result<(Dataset, Vec<PathBuf>)> {
    let corpus_path = dir.join(CORPUS_FILE);
    let emb_path = dir.join(EMBEDDINGS_FILE);
    require_file(&corpus_path)?;
    require_file(&emb_path)?;
    let corpus = Corpus::load(&corpus_path)?;
    let store = load_embeddings(&emb_path)?;
    let mut ds = Dataset::from_items(&corpus.annotations()?, &store)?;
    let mut inputs = vec![corpus_path, emb_path];
    let latent_path = dir.join(LATENT_FILE);
    if latent_path.is_file() {
        ds.attach_latent(&load_latent(&latent_path)?)?;
        inputs.push(latent_path);
    }
    Ok((ds, inputs))
}

fn parse_splits(s: &str) -> Result<[f64; 3]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| invalid(format!("bad split ratios '{s}'")))?;
    <[f64; 3]>::try_from(v).map_err(|_| invalid("--splits needs three ratios"))
}

pub fn parse_list<T: std::str::FromStr>(what: &str, s: &str) -> Result<Vec<T>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|_| invalid(format!("bad {what} '{p}'")))
        })
        .collect()
}

/// Applies model and optimization flags over `base`.
fn apply_model_args(
    base: &mut ExperimentManifest,
    args: &ModelArgs,
    file: &FileConfig,
) -> Result<()> {
    if let Some(s) = &args.splits {
        base.split_ratios = parse_splits(s)?;
    } else if let Some(v) = &file.splits {
        base.split_ratios = <[f64; 3]>::try_from(v.clone())
            .map_err(|_| invalid("splits needs three ratios"))?;
    }
    if let Some(s) = &args.hidden {
        base.hidden_dims = parse_list("hidden size", s)?;
    } else if let Some(v) = &file.hidden {
        base.hidden_dims = v.clone();
    }
    if let Some(s) = args.activation.as_ref().or(file.activation.as_ref()) {
        base.activation = parse_enum::<Activation>("activation", s)?;
    }
    if let Some(s) = args.optimizer.as_ref().or(file.optimizer.as_ref()) {
        base.train.optimizer = parse_enum::<OptimizerKind>("optimizer", s)?;
    }
    let t = &mut base.train;
    t.patience = pick(args.patience, file.patience, t.patience);
    t.learning_rate = pick(args.lr, file.learning_rate, t.learning_rate);
    t.batch_size = pick(args.batch_size, file.batch_size, t.batch_size);
    t.max_epochs = pick(args.max_epochs, file.max_epochs, t.max_epochs);
    if let Some(name) = args.dataset_name.clone().or(file.dataset_name.clone()) {
        base.dataset_name = name;
    }
    Ok(())
}

fn loss_hyper(args: &ModelArgs, file: &FileConfig) -> Result<(f64, EmdPower)> {
    let lambda = pick(args.lambda_mean, file.lambda_mean, DEFAULT_LAMBDA_MEAN);
    let power = EmdPower::try_from(pick(args.emd_power, file.emd_power, 2))?;
    Ok((lambda, power))
}

fn default_dataset_name(data: &Path) -> String {
    data.file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("dataset")
        .to_string()
}

pub fn train(args: TrainArgs, file: &FileConfig) -> Result<()> {
    let (lambda, power) = loss_hyper(&args.model, file)?;
    let loss_name = args
        .loss
        .clone()
        .or(file.loss.clone())
        .unwrap_or_else(|| "emd".into());
    let kind = LossKind::parse_with(&loss_name, lambda, power)?;
    let seed = pick(args.seed, file.seed, 1);
    let mut manifest = ExperimentManifest {
        dataset_name: default_dataset_name(&args.data),
        hidden_dims: DEFAULT_HIDDEN.to_vec(),
        loss_kinds: vec![kind],
        seeds: vec![seed],
        ..Default::default()
    };
    apply_model_args(&mut manifest, &args.model, file)?;
    manifest.validate()?;
    let (ds, inputs) = load_data(&args.data)?;
    let outcome = run_cell(&ds, &manifest, &kind, seed)?;
    let out = &args.out;
    write_cell(out, &outcome)?;
    write_atomic(&out.join("experiment.json"), &to_json_bytes(&manifest)?)?;
    let mut rm = RunManifest::new("train", &manifest, vec![seed])?;
    for p in &inputs {
        rm = rm.input(p)?;
    }
    rm.finish(out)?;
    let s = &outcome.summary;
    emit(&format!(
        "{}\n",
        serde_json::to_string_pretty(&json!({
            "loss": kind.name(),
            "seed": seed,
            "best_epoch": s.best_epoch,
            "epochs_run": s.epochs_run,
            "test": s.test,
            "latent": s.latent,
        }))?
    ));
    Ok(())
}

pub fn experiment(args: ExperimentArgs, file: &FileConfig) -> Result<()> {
    let mut manifest = match &args.manifest {
        Some(p) => {
            require_file(p)?;
            serde_json::from_slice::<ExperimentManifest>(&std::fs::read(p)?)
                .map_err(|e| invalid(format!("{}: {e}", p.display())))?
        }
        None => ExperimentManifest {
            dataset_name: default_dataset_name(&args.data),
            ..Default::default()
        },
    };
    apply_model_args(&mut manifest, &args.model, file)?;
    let losses_given = args.losses.is_some()
        || file.losses.is_some()
        || args.model.lambda_mean.is_some()
        || args.model.emd_power.is_some()
        || args.manifest.is_none();
    if losses_given {
        let (lambda, power) = loss_hyper(&args.model, file)?;
        let names: Vec<String> = match (&args.losses, &file.losses) {
            (Some(s), _) => parse_list("loss", s)?,
            (None, Some(v)) => v.clone(),
            (None, None) => match &args.manifest {
                Some(_) => manifest.loss_kinds.iter().map(|k| k.name().to_string()).collect(),
                None => vec!["all".into()],
            },
        };
        manifest.loss_kinds = if names.len() == 1 && names[0].eq_ignore_ascii_case("all") {
            LossKind::all(lambda, power)
        } else {
            names
                .iter()
                .map(|n| LossKind::parse_with(n, lambda, power))
                .collect::<disagree_core::Result<_>>()?
        };
    }
    if let Some(s) = &args.seeds {
        manifest.seeds = parse_list("seed", s)?;
    } else if let Some(v) = &file.seeds {
        manifest.seeds = v.clone();
    }
    manifest.validate()?;

    let (ds, inputs) = load_data(&args.data)?;
    let (report, outcomes) = run_experiment(&ds, &manifest)?;
    let out = &args.out;
    write_experiment(out, &report, &outcomes)?;
    write_atomic(&out.join("experiment.json"), &to_json_bytes(&manifest)?)?;
    let mut rm = RunManifest::new("experiment", &manifest, manifest.seeds.clone())?;
    for p in &inputs {
        rm = rm.input(p)?;
    }
    rm.finish(out)?;
    emit(&report.to_table());
    Ok(())
}

#[derive(Serialize)]
struct ResolvedAnalyze {
    var_bins: usize,
    opp_bins: usize,
    target: AnalysisTarget,
    tables: Tables,
}

#[derive(Serialize)]
struct AnalysisSummary {
    cell: String,
    n_items: usize,
    variance: BinTable,
    /// Either the table or an "n/a: ..." note.
    opposition: serde_json::Value,
}

fn list_cells(run: &Path) -> Result<Vec<(String, PathBuf)>> {
    let cells_dir = run.join("cells");
    if !cells_dir.is_dir() {
        return Ok(vec![(String::new(), run.to_path_buf())]);
    }
    let mut v: Vec<(String, PathBuf)> = std::fs::read_dir(&cells_dir)?
        .map(|e| e.map(|e| (e.file_name().to_string_lossy().into_owned(), e.path())))
        .collect::<std::io::Result<_>>()?;
    v.retain(|(_, p)| p.join("checkpoint.bin").is_file());
    v.sort();
    Ok(v)
}

pub fn analyze_cmd(args: AnalyzeArgs, file: &FileConfig) -> Result<()> {
    let var_bins = pick(args.var_bins, file.var_bins, DEFAULT_VAR_BINS);
    let opp_bins = pick(args.opp_bins, file.opp_bins, DEFAULT_OPP_BINS);
    let target = match args.target.as_ref().or(file.target.as_ref()) {
        Some(s) => parse_enum::<AnalysisTarget>("analysis target", s)?,
        None => AnalysisTarget::Empirical,
    };
    let (ds, mut inputs) = load_data(&args.data)?;
    let cells = list_cells(&args.run)?;
    if cells.is_empty() {
        bail!(invalid(format!("no checkpoints under {}", args.run.display())));
    }

    let mut summaries = Vec::new();
    for (name, dir) in &cells {
        let ckpt = dir.join("checkpoint.bin");
        let splits_path = dir.join("splits.json");
        require_file(&ckpt)?;
        require_file(&splits_path)?;
        let model = Mlp::load(&ckpt)?;
        let splits: Splits = serde_json::from_slice(&std::fs::read(&splits_path)?)?;
        let test = ds.select(&splits.test)?;
        let analysis = analyze(&model, &test, target, var_bins, opp_bins)?;
        let label = if name.is_empty() { dir.display().to_string() } else { name.clone() };

        let out = if name.is_empty() { args.out.clone() } else { args.out.join(name) };
        if args.tables.wants_variance() {
            write_atomic(&out.join("variance_bins.csv"), analysis.variance.to_csv().as_bytes())?;
        }
        let opposition = match analysis.opposition {
            Ok(t) => {
                if args.tables.wants_opposition() {
                    write_atomic(&out.join("opposition_bins.csv"), t.to_csv().as_bytes())?;
                }
                serde_json::to_value(&t)?
            }
            Err(Error::NotApplicable(msg)) if args.tables == Tables::Opposition => {
                bail!(Error::NotApplicable(format!("{label}: {msg}")))
            }
            Err(Error::NotApplicable(msg)) => json!(msg),
            Err(e) => return Err(e.into()),
        };
        let opp_note = match &opposition {
            serde_json::Value::String(note) => note.clone(),
            _ if args.tables.wants_opposition() => "opposition_bins.csv".into(),
            _ => "opposition skipped".into(),
        };
        emit(&format!("{label}: {} test items; {opp_note}\n", test.len()));
        summaries.push(AnalysisSummary {
            cell: label,
            n_items: test.len(),
            variance: analysis.variance,
            opposition,
        });
        inputs.push(ckpt);
        inputs.push(splits_path);
    }
    write_atomic(&args.out.join("analysis.json"), &to_json_bytes(&summaries)?)?;
    let mut rm = RunManifest::new(
        "analyze",
        ResolvedAnalyze {
            var_bins,
            opp_bins,
            target,
            tables: args.tables,
        },
        vec![],
    )?;
    for p in &inputs {
        rm = rm.input(p)?;
    }
    rm.finish(&args.out)?;
    Ok(())
}
