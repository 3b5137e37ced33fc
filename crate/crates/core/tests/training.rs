mod common;

use common::{all_kinds, random_example, synthetic_dataset};
use disagree_core::losses::{EmdPower, LossKind};
use disagree_core::model::{Activation, Mlp, ModelConfig, MlpParams};
use disagree_core::stats::RatingScale;
use disagree_core::synth::SynthConfig;
use disagree_core::trainer::*;
use disagree_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_cfg(dim: usize, kind: &LossKind, k: usize) -> ModelConfig {
    ModelConfig {
        input_dim: dim,
        hidden_dims: vec![16],
        activation: Activation::Relu,
        head: head_for(kind, RatingScale::new(k).unwrap()),
    }
}

fn small_synth(n: usize, seed: u64) -> Dataset {
    synthetic_dataset(&SynthConfig {
        n_items: n,
        feature_dim: 8,
        seed,
        ..Default::default()
    })
}

#[test]
fn single_item_step_descends_for_every_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for kind in all_kinds() {
        for i in 0..20u64 {
            let ex = random_example(&mut rng, 5, 6);
            let cfg = small_cfg(6, &kind, 5);
            let mut mlp = Mlp::init(cfg.clone(), i).unwrap();
            let before = mean_loss(&mlp, &kind, &[&ex]).unwrap();
            let mut opt = Optimizer::new(OptimizerKind::Sgd, mlp.params.len());
            let mut grads = MlpParams::zeros(&cfg);
            gradient_step(&mut mlp, &kind, &[&ex], &mut opt, 1e-4, &mut grads).unwrap();
            let after = mean_loss(&mlp, &kind, &[&ex]).unwrap();
            let moved = grads.values().any(|g| *g != 0.0);
            assert!(
                after < before || !moved,
                "{kind} item {i}: {before} -> {after}"
            );
        }
    }
}

#[test]
fn training_is_deterministic_and_best_epoch_is_minimal() {
    let ds = small_synth(300, 2);
    let splits = make_splits(&ds.ids(), &SplitSpec { seed: 4, ..Default::default() }).unwrap();
    let tr = ds.select(&splits.train).unwrap();
    let va = ds.select(&splits.validation).unwrap();
    let kind = LossKind::EmdMse { lambda_mean: 1.0, emd_power: EmdPower::L2 };
    let cfg = small_cfg(8, &kind, 5);
    let tc = TrainConfig { seed: 9, max_epochs: 30, ..Default::default() };
    let a = train(&cfg, &tc, &tr, &va, &kind).unwrap();
    let b = train(&cfg, &tc, &tr, &va, &kind).unwrap();
    assert_eq!(a.best.params.to_flat(), b.best.params.to_flat());
    assert_eq!(a.history, b.history);
    assert_eq!(a.best_epoch, b.best_epoch);

    let best = a.history.iter().find(|h| h.epoch == a.best_epoch).unwrap();
    assert!(a.history.iter().all(|h| best.validation_loss <= h.validation_loss));
    assert_eq!(
        mean_loss(&a.best, &kind, &va).unwrap().to_bits(),
        best.validation_loss.to_bits()
    );

    let other = train(&cfg, &TrainConfig { seed: 10, ..tc.clone() }, &tr, &va, &kind).unwrap();
    assert_ne!(a.best.params.to_flat(), other.best.params.to_flat());
}

#[test]
fn variance_regression_learns_synthetic_task() {
    let ds = small_synth(600, 3);
    let splits = make_splits(&ds.ids(), &SplitSpec { seed: 1, ..Default::default() }).unwrap();
    let tr = ds.select(&splits.train).unwrap();
    let va = ds.select(&splits.validation).unwrap();
    let kind = LossKind::VarReg;
    let tc = TrainConfig { seed: 1, max_epochs: 60, ..Default::default() };
    let r = train(&small_cfg(8, &kind, 5), &tc, &tr, &va, &kind).unwrap();
    let best = r.history.iter().find(|h| h.epoch == r.best_epoch).unwrap();
    assert!(best.validation_loss < r.initial_validation_loss);
}

#[test]
fn every_loss_trains_without_error() {
    let ds = small_synth(200, 4);
    let splits = make_splits(&ds.ids(), &SplitSpec { seed: 2, ..Default::default() }).unwrap();
    let tr = ds.select(&splits.train).unwrap();
    let va = ds.select(&splits.validation).unwrap();
    for kind in all_kinds() {
        let tc = TrainConfig { seed: 3, max_epochs: 5, ..Default::default() };
        let r = train(&small_cfg(8, &kind, 5), &tc, &tr, &va, &kind).unwrap();
        assert!(!r.history.is_empty() && r.history.len() <= 5, "{kind}");
    }
}

#[test]
fn non_finite_features_report_divergence() {
    let mut ds = small_synth(40, 5);
    ds.examples[0].features[0] = f64::NAN;
    let all = ds.ids();
    let tr = ds.select(&all[..30]).unwrap();
    let va = ds.select(&all[30..]).unwrap();
    let kind = LossKind::Emd { emd_power: EmdPower::L2 };
    let err = train(&small_cfg(8, &kind, 5), &TrainConfig::default(), &tr, &va, &kind).unwrap_err();
    assert!(matches!(err, Error::Diverged { epoch: 1 }), "{err}");
}

#[test]
fn empty_splits_are_rejected() {
    let ds = small_synth(10, 6);
    let tr = ds.select(&ds.ids()).unwrap();
    let kind = LossKind::VarReg;
    let cfg = small_cfg(8, &kind, 5);
    assert!(matches!(
        train(&cfg, &TrainConfig::default(), &tr, &[], &kind),
        Err(Error::EmptySplit("validation"))
    ));
    assert!(matches!(
        train(&cfg, &TrainConfig::default(), &[], &tr, &kind),
        Err(Error::EmptySplit("train"))
    ));
}

#[test]
fn splits_never_share_items() {
    for n in [3usize, 10, 101, 997] {
        let ids: Vec<String> = (0..n).map(|i| format!("i{i}")).collect();
        for seed in 0..5 {
            let s = make_splits(&ids, &SplitSpec { seed, ..Default::default() }).unwrap();
            s.check_disjoint().unwrap();
            let (a, b, c) = s.sizes();
            assert_eq!(a + b + c, n);
            assert!((a as f64 - 0.5 * n as f64).abs() <= 1.0);
            assert!((b as f64 - 0.25 * n as f64).abs() <= 1.0);
        }
    }
}
