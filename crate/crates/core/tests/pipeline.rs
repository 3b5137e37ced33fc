mod common;

use std::fs;

use common::{synthetic_dataset, two_pass_variance};
use disagree_core::eval::*;
use disagree_core::experiment::*;
use disagree_core::ingest::*;
use disagree_core::losses::{EmdPower, LossKind};
use disagree_core::model::Mlp;
use disagree_core::stats::*;
use disagree_core::synth::*;
use disagree_core::trainer::TrainConfig;
use disagree_core::Error;
use proptest::prelude::*;

fn records() -> impl Strategy<Value = Vec<AnnotationRecord>> {
    prop::collection::vec((0u8..12, 0u8..4, 0u32..5), 0..80).prop_map(|rows| {
        rows.into_iter()
            .map(|(id, text, rating)| AnnotationRecord {
                item_id: format!("item{id}"),
                text: Some(format!("text {}", (id as u32 + text as u32) % 7)),
                rating,
                annotator_id: None,
            })
            .collect()
    })
}

fn items_to_records(items: &[ItemAnnotations]) -> Vec<AnnotationRecord> {
    items
        .iter()
        .flat_map(|it| {
            it.ratings.iter().map(move |&r| AnnotationRecord {
                item_id: it.item_id.clone(),
                text: None,
                rating: r,
                annotator_id: None,
            })
        })
        .collect()
}

proptest! {
    #[test]
    fn grouping_conserves_ratings_and_filtering_is_idempotent(recs in records(), min in 1usize..6, merge in any::<bool>()) {
        let cfg = IngestConfig { k_levels: 5, min_annotators: min, merge_duplicate_texts: merge };
        let grouped = group_records(&recs, &cfg).unwrap();
        prop_assert_eq!(grouped.iter().map(|i| i.n()).sum::<usize>(), recs.len());
        let kept = group_and_filter(&recs, &cfg).unwrap();
        prop_assert!(kept.len() <= grouped.len());
        prop_assert!(kept.iter().all(|i| i.n() >= min));
        let again = group_and_filter(&items_to_records(&kept), &cfg).unwrap();
        prop_assert_eq!(again, kept);
    }

    #[test]
    fn merging_never_increases_item_count(recs in records()) {
        let plain = IngestConfig { k_levels: 5, min_annotators: 1, merge_duplicate_texts: false };
        let merged = IngestConfig { merge_duplicate_texts: true, ..plain.clone() };
        prop_assert!(group_records(&recs, &merged).unwrap().len() <= group_records(&recs, &plain).unwrap().len());
    }

    #[test]
    fn spearman_is_rank_invariant(xs in prop::collection::vec(-5.0..5.0f64, 3..40), ys in prop::collection::vec(-5.0..5.0f64, 40)) {
        let ys = &ys[..xs.len()];
        if let Ok(r) = spearman(&xs, ys) {
            let tx: Vec<f64> = xs.iter().map(|x| x.exp() * 3.0 + 1.0).collect();
            let ty: Vec<f64> = ys.iter().map(|y| y.powi(3)).collect();
            prop_assert!((spearman(&tx, &ty).unwrap() - r).abs() < 1e-12);
        }
    }

    #[test]
    fn mse_is_symmetric(xs in prop::collection::vec(0.0..5.0f64, 1..30), ys in prop::collection::vec(0.0..5.0f64, 30)) {
        let ys = &ys[..xs.len()];
        prop_assert_eq!(var_mse(&xs, ys).unwrap(), var_mse(ys, &xs).unwrap());
    }

    #[test]
    fn recall_never_rises_with_threshold(pred in prop::collection::vec(0.0..3.0f64, 1..30), target in prop::collection::vec(prop_oneof![Just(0.0), 0.1..3.0f64], 30), a in 0.0..3.0f64, b in 0.0..3.0f64) {
        let target = &target[..pred.len()];
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let r_lo = disagree_f1_detail(&pred, target, lo).unwrap().recall;
        let r_hi = disagree_f1_detail(&pred, target, hi).unwrap().recall;
        prop_assert!(r_hi <= r_lo);
    }

    #[test]
    fn bins_partition_items(target in prop::collection::vec(0.0..4.0f64, 1..60), n_bins in 1usize..8) {
        let pred: Vec<f64> = target.iter().map(|t| t * 0.5).collect();
        let edges = default_variance_edges(RatingScale::new(5).unwrap(), n_bins, &target).unwrap();
        let table = bin_analysis(&target, &pred, &edges).unwrap();
        prop_assert_eq!(table.n_items(), target.len());
        for row in &table.rows {
            if let Some(m) = row.mean_target {
                prop_assert!(m >= row.bin_lo - 1e-12 && m <= row.bin_hi + 1e-12);
            }
        }
    }
}

#[test]
fn jsonl_and_csv_parse_to_the_same_items() {
    let dir = tempfile::tempdir().unwrap();
    let jsonl = dir.path().join("a.jsonl");
    let csv = dir.path().join("a.csv");
    fs::write(
        &jsonl,
        "{\"item_id\":\"a\",\"rating\":0}\n{\"item_id\":\"a\",\"rating\":4,\"annotator_id\":\"w1\"}\n{\"item_id\":\"b\",\"rating\":2,\"text\":\"hi\"}\n",
    )
    .unwrap();
    fs::write(&csv, "item_id,rating,annotator_id,text\na,0,,\na,4,w1,\nb,2,,hi\n").unwrap();
    let scale = RatingScale::new(5).unwrap();
    let a = parse_annotations(&jsonl, AnnotationFormat::Jsonl, scale).unwrap();
    let b = parse_annotations(&csv, AnnotationFormat::Csv, scale).unwrap();
    assert!(a.errors.is_empty() && b.errors.is_empty());
    assert_eq!(a.records, b.records);
}

#[test]
fn malformed_lines_abort_past_one_percent() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.jsonl");
    let scale = RatingScale::new(5).unwrap();
    let mut body = String::new();
    for i in 0..199 {
        body.push_str(&format!("{{\"item_id\":\"i{}\",\"rating\":{}}}\n", i % 50, i % 5));
    }
    body.push_str("not json\n");
    fs::write(&path, &body).unwrap();
    let ok = parse_annotations(&path, AnnotationFormat::Jsonl, scale).unwrap();
    assert_eq!(ok.records.len(), 199);
    assert_eq!(ok.errors.len(), 1);
    assert_eq!(ok.errors[0].line, 200);

    body.push_str("{\"item_id\":\"z\",\"rating\":9}\n{\"rating\":1}\n");
    fs::write(&path, &body).unwrap();
    let err = parse_annotations(&path, AnnotationFormat::Jsonl, scale).unwrap_err();
    assert!(matches!(err, Error::TooManyMalformed { bad: 3, total: 202, .. }), "{err}");
}

#[test]
fn synthetic_corpus_round_trips_through_files() {
    let cfg = SynthConfig { n_items: 200, annotators_per_item: (3, 7), seed: 8, ..Default::default() };
    let items = generate_corpus(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("ann.jsonl");
    let emb = dir.path().join("emb.bin");
    fs::write(&ann, write_annotations_jsonl(&to_records(&items)).unwrap()).unwrap();
    let store = to_embedding_store(&items).unwrap();
    let mut f = fs::File::create(&emb).unwrap();
    store.write_to(&mut f).unwrap();
    drop(f);

    let scale = RatingScale::new(5).unwrap();
    let parsed = parse_annotations(&ann, AnnotationFormat::Jsonl, scale).unwrap();
    let cfg_in = IngestConfig { k_levels: 5, min_annotators: 2, merge_duplicate_texts: false };
    let grouped = group_and_filter(&parsed.records, &cfg_in).unwrap();
    assert_eq!(grouped.len(), items.len());
    for (g, it) in grouped.iter().zip(&items) {
        assert_eq!(g.item_id, it.item_id);
        assert_eq!(g.ratings, it.ratings);
    }
    let loaded = load_embeddings(&emb).unwrap();
    assert_eq!(loaded, store);
    for it in &items {
        assert_eq!(loaded.get(&it.item_id).unwrap(), it.features.as_slice());
    }
}

#[test]
fn corpus_generation_is_reproducible() {
    let cfg = SynthConfig { n_items: 10_000, seed: 3, ..Default::default() };
    let a = generate_corpus(&cfg).unwrap();
    assert_eq!(a, generate_corpus(&cfg).unwrap());
    let b = generate_corpus(&SynthConfig { seed: 4, ..cfg.clone() }).unwrap();
    assert_ne!(a, b);
    for p in Profile::ALL {
        assert!(a.iter().any(|it| it.profile == p), "{p} never drawn");
    }
}

#[test]
fn large_samples_match_the_latent() {
    let latent = LikertDistribution::new(vec![0.2, 0.6, 0.2]).unwrap();
    let draws = sample_annotations(&latent, 1_000_000, 17);
    let ann = ItemAnnotations::new("x", draws, latent.scale()).unwrap();
    let emp = build_distribution(&ann).unwrap();
    for (e, l) in emp.probs().iter().zip(latent.probs()) {
        assert!((e - l).abs() < 0.01);
    }
    assert!((unbiased_variance(&ann).unwrap() - distribution_variance(&latent)).abs() < 0.01);
}

#[test]
fn small_sample_variance_is_unbiased() {
    let latent = LikertDistribution::new(vec![0.3, 0.1, 0.1, 0.2, 0.3]).unwrap();
    let truth = distribution_variance(&latent);
    let n = 10_000;
    let mean = (0..n as u64)
        .map(|s| two_pass_variance(&sample_annotations(&latent, 5, s)))
        .sum::<f64>()
        / n as f64;
    assert!((mean - truth).abs() / truth < 0.02, "{mean} vs {truth}");
}

#[test]
fn empirical_opposition_converges() {
    let latent = LikertDistribution::new(vec![0.4, 0.05, 0.1, 0.05, 0.4]).unwrap();
    let seg = default_segmentation(latent.scale());
    let truth = opposition_index(&latent, &seg).unwrap();
    let err_at = |n: usize| {
        (0..2000u64)
            .map(|s| {
                let ann = ItemAnnotations::new("x", sample_annotations(&latent, n, s), latent.scale()).unwrap();
                (opposition_index(&build_distribution(&ann).unwrap(), &seg).unwrap() - truth).abs()
            })
            .sum::<f64>()
            / 2000.0
    };
    let errs = [err_at(5), err_at(25), err_at(125)];
    assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
}

fn quick_manifest() -> ExperimentManifest {
    ExperimentManifest {
        dataset_name: "synthetic".into(),
        hidden_dims: vec![16],
        train: TrainConfig { max_epochs: 8, ..Default::default() },
        loss_kinds: vec![
            LossKind::VarReg,
            LossKind::EmdMse { lambda_mean: 1.0, emd_power: EmdPower::L2 },
            LossKind::BinaryCe,
        ],
        seeds: vec![1, 2],
        ..Default::default()
    }
}

#[test]
fn experiment_writes_reproducible_outputs() {
    let ds = synthetic_dataset(&SynthConfig { n_items: 240, feature_dim: 8, seed: 5, ..Default::default() });
    let m = quick_manifest();
    let (report, outcomes) = run_experiment(&ds, &m).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert_eq!(report.cells.len(), 6);
    assert!(report.rows.iter().all(|r| r.n_seeds == 2 && r.var_mse.values.len() == 2));
    assert!(report.rows[2].notes.iter().any(|n| n.contains("Bernoulli")));
    assert!(report.cells.iter().all(|c| c.latent.is_some()));
    assert!(report.cells.iter().all(|c| c.loss.uses_distribution_head() == c.opposition_spearman.is_some()));

    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_experiment(a.path(), &report, &outcomes).unwrap();
    let (again, outcomes2) = run_experiment(&ds, &m).unwrap();
    write_experiment(b.path(), &again, &outcomes2).unwrap();
    for rel in ["report.json", "report.csv", "cells/emd_mse_seed2/checkpoint.bin", "cells/var_reg_seed1/splits.json"] {
        assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel}");
    }
    let csv = fs::read_to_string(a.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().nth(2).unwrap().starts_with("synthetic,EMD+MSE,2,"));

    let model = Mlp::load(&a.path().join("cells/emd_mse_seed1/checkpoint.bin")).unwrap();
    assert_eq!(model.params, outcomes[2].model.params);
}

#[test]
fn analysis_marks_non_distribution_heads() {
    let ds = synthetic_dataset(&SynthConfig { n_items: 160, feature_dim: 8, seed: 6, ..Default::default() });
    let m = ExperimentManifest { seeds: vec![1], ..quick_manifest() };
    let (_, outcomes) = run_experiment(&ds, &m).unwrap();
    let test = ds.select(&outcomes[0].splits.test).unwrap();
    for o in &outcomes {
        let an = analyze(&o.model, &test, AnalysisTarget::Latent, 6, 5).unwrap();
        assert_eq!(an.variance.n_items(), test.len());
        assert_eq!(an.variance.rows.len(), 6);
        match (&o.summary.loss, &an.opposition) {
            (LossKind::EmdMse { .. }, Ok(t)) => assert_eq!(t.n_items(), test.len()),
            (LossKind::EmdMse { .. }, Err(e)) => panic!("{e}"),
            (_, Err(Error::NotApplicable(msg))) => assert!(msg.starts_with("n/a")),
            (_, other) => panic!("expected n/a, got {other:?}"),
        }
    }
}

#[test]
fn aggregation_matches_hand_computation() {
    let a = Aggregate::from_values(vec![0.19, 0.20, 0.21, 0.20, 0.20]).unwrap();
    assert!((a.mean - 0.2).abs() < 1e-12);
    assert!((a.std - (0.0002f64 / 4.0).sqrt()).abs() < 1e-12);
    assert_eq!(a.display(3), "0.200 ± 0.007");
    let one = Aggregate::from_values(vec![0.3]).unwrap();
    assert!(one.single_seed && one.std == 0.0);
}
