#![allow(dead_code)]

use disagree_core::losses::{aggregate_binary, EmdPower, LossKind};
use disagree_core::model::{Activation, HeadKind, Mlp, ModelConfig};
use disagree_core::stats::{ItemAnnotations, LikertDistribution, RatingScale};
use disagree_core::synth::{generate_corpus, to_embedding_store, to_latent_records, SynthConfig};
use disagree_core::trainer::{head_for, objective, Dataset, Example};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_DENOM_FLOOR: f64 = 1e-6;

/// Two-pass sample variance, written independently of the library.
pub fn two_pass_variance(xs: &[u32]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().map(|&x| x as f64).sum::<f64>() / n;
    xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Sample variance as the mean squared half-difference over all ordered pairs.
pub fn pairwise_variance(xs: &[u32]) -> f64 {
    let n = xs.len();
    let mut s = 0i64;
    for i in 0..n {
        for j in 0..n {
            let d = xs[i] as i64 - xs[j] as i64;
            s += d * d;
        }
    }
    s as f64 / (2.0 * n as f64 * (n as f64 - 1.0))
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_DENOM_FLOOR)
}

pub fn random_ratings(rng: &mut ChaCha8Rng, k: usize, n: usize) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(0..k as u32)).collect()
}

/// Random distribution; about a third of the draws zero out some categories.
pub fn random_distribution(rng: &mut ChaCha8Rng, k: usize) -> LikertDistribution {
    let sparse = rng.random_bool(0.3);
    let mut w: Vec<f64> = (0..k)
        .map(|_| if sparse && rng.random_bool(0.5) { 0.0 } else { rng.random::<f64>() })
        .collect();
    if w.iter().all(|&x| x == 0.0) {
        w[rng.random_range(0..k)] = 1.0;
    }
    LikertDistribution::from_weights(&w).unwrap()
}

/// Strictly positive random distribution, for points away from clamps.
pub fn interior_distribution(rng: &mut ChaCha8Rng, k: usize) -> LikertDistribution {
    let w: Vec<f64> = (0..k).map(|_| 0.05 + rng.random::<f64>()).collect();
    LikertDistribution::from_weights(&w).unwrap()
}

pub fn all_kinds() -> Vec<LossKind> {
    let mut kinds = LossKind::all(1.0, EmdPower::L2);
    kinds.push(LossKind::Emd { emd_power: EmdPower::L1 });
    kinds.push(LossKind::EmdMse { lambda_mean: 0.5, emd_power: EmdPower::L1 });
    kinds
}

pub fn random_example(rng: &mut ChaCha8Rng, k: usize, dim: usize) -> Example {
    let distribution = interior_distribution(rng, k);
    Example {
        item_id: "x".into(),
        features: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        binary_target: aggregate_binary(&distribution),
        unbiased_variance: rng.random_range(0.0..((k - 1) as f64).powi(2) / 2.0),
        opposition: 0.0,
        distribution,
        latent: None,
    }
}

fn objective_value(mlp: &Mlp, kind: &LossKind, ex: &Example) -> f64 {
    let trace = mlp.trace(&ex.features).unwrap();
    objective(kind, &trace, ex).unwrap().value
}

/// Worst relative error between analytic and central-difference gradients,
/// both at the head pre-activation and at every network parameter.
pub fn gradient_check(kind: &LossKind, k: usize, seed: u64, rng: &mut ChaCha8Rng) -> f64 {
    let scale = RatingScale::new(k).unwrap();
    let head = head_for(kind, scale);
    let cfg = ModelConfig {
        input_dim: 4,
        hidden_dims: vec![6],
        activation: Activation::Tanh,
        head,
    };
    let mut mlp = Mlp::init(cfg, seed).unwrap();
    let ex = random_example(rng, k, 4);
    let trace = mlp.trace(&ex.features).unwrap();
    let eval = objective(kind, &trace, &ex).unwrap();
    let mut worst: f64 = 0.0;

    // head pre-activation, through a bias shift on the last layer
    let last = mlp.params.layers.len() - 1;
    for j in 0..head.output_dim() {
        let b0 = mlp.params.layers[last].bias[j];
        mlp.params.layers[last].bias[j] = b0 + FD_STEP;
        let up = objective_value(&mlp, kind, &ex);
        mlp.params.layers[last].bias[j] = b0 - FD_STEP;
        let down = objective_value(&mlp, kind, &ex);
        mlp.params.layers[last].bias[j] = b0;
        worst = worst.max(rel_err(eval.grad[j], (up - down) / (2.0 * FD_STEP)));
    }

    let analytic = mlp.backward(&ex.features, &eval.grad).unwrap().to_flat();
    let flat = mlp.params.to_flat();
    for i in 0..flat.len() {
        let mut p = flat.clone();
        p[i] = flat[i] + FD_STEP;
        mlp.params.set_flat(&p).unwrap();
        let up = objective_value(&mlp, kind, &ex);
        p[i] = flat[i] - FD_STEP;
        mlp.params.set_flat(&p).unwrap();
        let down = objective_value(&mlp, kind, &ex);
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * FD_STEP)));
    }
    mlp.params.set_flat(&flat).unwrap();
    worst
}

pub fn head_name(h: HeadKind) -> &'static str {
    match h {
        HeadKind::Distribution { .. } => "distribution",
        HeadKind::ScalarNonNeg => "scalar",
        HeadKind::BinaryProb { .. } => "binary",
    }
}

/// Synthetic corpus turned into a training dataset with latent truth attached.
pub fn synthetic_dataset(cfg: &SynthConfig) -> Dataset {
    let items = generate_corpus(cfg).unwrap();
    let scale = RatingScale::new(cfg.k_levels).unwrap();
    let anns: Vec<ItemAnnotations> = items
        .iter()
        .map(|it| ItemAnnotations::new(it.item_id.clone(), it.ratings.clone(), scale).unwrap())
        .collect();
    let mut ds = Dataset::from_items(&anns, &to_embedding_store(&items).unwrap()).unwrap();
    ds.attach_latent(&to_latent_records(&items)).unwrap();
    ds
}
