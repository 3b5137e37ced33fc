//! Fixed-architecture feed-forward predictor over frozen item features.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{distribution_variance, LikertDistribution, RatingScale};

pub const DEFAULT_HIDDEN: [usize; 2] = [256, 64];

const CHECKPOINT_MAGIC: &[u8; 7] = b"LKMLP1\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z < 0.0 {
                    0.0
                } else {
                    z
                }
            }
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation and the activation value.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// What the output layer predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "snake_case")]
pub enum HeadKind {
    /// Softmax over the K rating categories.
    Distribution { k_levels: usize },
    /// Softplus of a single raw output: a non-negative variance.
    ScalarNonNeg,
    /// Sigmoid of a single raw output: the aggregated positive-class probability.
    /// `k_levels` is kept so the probability can be mapped back to a variance.
    BinaryProb { k_levels: usize },
}

impl HeadKind {
    pub fn output_dim(self) -> usize {
        match self {
            HeadKind::Distribution { k_levels } => k_levels,
            HeadKind::ScalarNonNeg | HeadKind::BinaryProb { .. } => 1,
        }
    }

    fn validate(self) -> Result<()> {
        match self {
            HeadKind::Distribution { k_levels } | HeadKind::BinaryProb { k_levels } => {
                RatingScale::new(k_levels).map(|_| ())
            }
            HeadKind::ScalarNonNeg => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    pub head: HeadKind,
}

impl ModelConfig {
    pub fn new(input_dim: usize, head: HeadKind) -> Self {
        Self {
            input_dim,
            hidden_dims: DEFAULT_HIDDEN.to_vec(),
            activation: Activation::Relu,
            head,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("input_dim must be positive".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidConfig(
                "hidden_dims must be non-empty and positive".into(),
            ));
        }
        self.head.validate()
    }

    /// `(fan_in, fan_out)` of every dense layer, head last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.head.output_dim());
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|(i, o)| i * o + o)
            .sum()
    }
}

/// One dense layer; `weights` is row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>())
            .collect()
    }
}

/// Weights of every layer in declaration order; also used as a gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
}

impl MlpParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            layers: cfg
                .layer_shapes()
                .into_iter()
                .map(|(i, o)| Dense::zeros(i, o))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All values in declaration order: layer 0 weights, layer 0 bias, layer 1 weights, ...
    pub fn values(&self) -> impl Iterator<Item = &f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                actual: flat.len(),
            });
        }
        for (dst, src) in self.values_mut().zip(flat) {
            *dst = *src;
        }
        Ok(())
    }

    pub fn fill_zero(&mut self) {
        self.values_mut().for_each(|v| *v = 0.0);
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }
}

/// A head output after its normalization map.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Distribution(LikertDistribution),
    Variance(f64),
    Probability(f64),
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Inputs to each dense layer; `inputs[0]` is the feature vector.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each dense layer; the last entry is the head pre-activation.
    preacts: Vec<Vec<f64>>,
    pub prediction: Prediction,
}

impl Trace {
    pub fn head_preact(&self) -> &[f64] {
        self.preacts.last().expect("at least one layer")
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Variance implied by a binary-head probability, placing mass `p` on the top
/// rating and `1 - p` on rating 0.
pub fn bernoulli_extremes_variance(p: f64, k_levels: usize) -> f64 {
    let span = (k_levels - 1) as f64;
    p * (1.0 - p) * span * span
}

/// A configured network together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub config: ModelConfig,
    pub params: MlpParams,
}

impl Mlp {
    /// Fan-in scaled uniform weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = MlpParams::zeros(&config);
        for layer in &mut params.layers {
            let bound = 1.0 / (layer.in_dim as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: MlpParams) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes();
        let ok = shapes.len() == params.layers.len()
            && shapes.iter().zip(&params.layers).all(|(&(i, o), l)| {
                l.in_dim == i && l.out_dim == o && l.weights.len() == i * o && l.bias.len() == o
            });
        if !ok {
            return Err(Error::DimensionMismatch {
                expected: config.parameter_count(),
                actual: params.len(),
            });
        }
        Ok(Self { config, params })
    }

    pub fn trace(&self, features: &[f64]) -> Result<Trace> {
        if features.len() != self.config.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.input_dim,
                actual: features.len(),
            });
        }
        let n_layers = self.params.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut preacts = Vec::with_capacity(n_layers);
        let mut x = features.to_vec();
        for (i, layer) in self.params.layers.iter().enumerate() {
            let z = layer.affine(&x);
            let next = if i + 1 < n_layers {
                z.iter().map(|&v| self.config.activation.apply(v)).collect()
            } else {
                Vec::new()
            };
            inputs.push(std::mem::replace(&mut x, next));
            preacts.push(z);
        }
        let head = preacts.last().expect("at least one layer");
        let prediction = match self.config.head {
            HeadKind::Distribution { .. } => {
                // Floor keeps the output strictly positive even for extreme logits.
                let mut p = softmax(head);
                for v in &mut p {
                    *v = v.max(f64::MIN_POSITIVE);
                }
                Prediction::Distribution(LikertDistribution::from_weights(&p)?)
            }
            HeadKind::ScalarNonNeg => Prediction::Variance(softplus(head[0])),
            HeadKind::BinaryProb { .. } => Prediction::Probability(sigmoid(head[0])),
        };
        Ok(Trace {
            inputs,
            preacts,
            prediction,
        })
    }

    pub fn forward(&self, features: &[f64]) -> Result<Prediction> {
        Ok(self.trace(features)?.prediction)
    }

    /// Adds `d loss / d params` into `grads`, given the gradient with respect to
    /// the head pre-activation.
    pub fn accumulate_gradients(
        &self,
        trace: &Trace,
        upstream: &[f64],
        grads: &mut MlpParams,
    ) -> Result<()> {
        let out_dim = self.config.head.output_dim();
        if upstream.len() != out_dim {
            return Err(Error::DimensionMismatch {
                expected: out_dim,
                actual: upstream.len(),
            });
        }
        let mut delta = upstream.to_vec();
        for li in (0..self.params.layers.len()).rev() {
            let layer = &self.params.layers[li];
            let input = &trace.inputs[li];
            let g = &mut grads.layers[li];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (gw, x) in row.iter_mut().zip(input) {
                    *gw += d * x;
                }
            }
            if li == 0 {
                break;
            }
            let mut prev = vec![0.0; layer.in_dim];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            let z_prev = &trace.preacts[li - 1];
            for ((p, &z), &a) in prev.iter_mut().zip(z_prev).zip(input) {
                *p *= self.config.activation.derivative(z, a);
            }
            delta = prev;
        }
        Ok(())
    }

    /// Exact gradients of a loss with respect to every parameter for one item.
    pub fn backward(&self, features: &[f64], upstream: &[f64]) -> Result<MlpParams> {
        let trace = self.trace(features)?;
        let mut grads = MlpParams::zeros(&self.config);
        self.accumulate_gradients(&trace, upstream, &mut grads)?;
        Ok(grads)
    }

    /// Predicted annotation variance for one item, whatever the head.
    pub fn predict_variance(&self, features: &[f64]) -> Result<f64> {
        Ok(prediction_variance(&self.forward(features)?, self.config.head))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + self.params.len() * 8);
        self.write_to(&mut buf)?;
        crate::io::write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    /// Checkpoint layout: magic, u32 LE config-JSON length, config JSON,
    /// u64 LE parameter count, then every parameter as f64 LE in declaration order.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let json = serde_json::to_vec(&self.config)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for v in self.params.values() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let truncated = |e: std::io::Error| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Format("truncated checkpoint".into())
            } else {
                Error::Io(e)
            }
        };
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("checkpoint magic mismatch".into()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(truncated)?;
        let mut json = vec![0u8; u32::from_le_bytes(u32buf) as usize];
        r.read_exact(&mut json).map_err(truncated)?;
        let config: ModelConfig = serde_json::from_slice(&json)?;
        config.validate()?;
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf).map_err(truncated)?;
        let count = u64::from_le_bytes(u64buf) as usize;
        if count != config.parameter_count() {
            return Err(Error::Format(format!(
                "checkpoint holds {count} parameters, config needs {}",
                config.parameter_count()
            )));
        }
        let mut params = MlpParams::zeros(&config);
        for v in params.values_mut() {
            r.read_exact(&mut u64buf).map_err(truncated)?;
            *v = f64::from_le_bytes(u64buf);
        }
        if !params.all_finite() {
            return Err(Error::Format("checkpoint contains non-finite values".into()));
        }
        Ok(Self { config, params })
    }
}

/// Variance implied by any head output.
pub fn prediction_variance(pred: &Prediction, head: HeadKind) -> f64 {
    match (pred, head) {
        (Prediction::Distribution(d), _) => distribution_variance(d),
        (Prediction::Variance(v), _) => *v,
        (Prediction::Probability(p), HeadKind::BinaryProb { k_levels }) => {
            bernoulli_extremes_variance(*p, k_levels)
        }
        (Prediction::Probability(p), _) => bernoulli_extremes_variance(*p, 2),
    }
}
