//! Minimal feed-forward networks with hand-written backpropagation.
//!
//! A [`Network`] is a chain of layers over one flat parameter vector. Training
//! is plain minibatch SGD on cross-entropy plus an l2 penalty, with early
//! stopping on validation accuracy; see [`train`].

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{EmbeddingTable, Instance, PADDING};
use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("layer {layer} takes {expected} inputs but the previous layer yields {found}")]
    BadChain {
        layer: usize,
        expected: usize,
        found: usize,
    },
    #[error("embedding layers are only allowed first")]
    MisplacedEmbedding,
    #[error("token id {0} out of range")]
    TokenOutOfRange(usize),
    #[error("invalid target class {0}")]
    InvalidTarget(usize),
    #[error("loss became non-finite in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("training and validation sets must be non-empty")]
    EmptyData,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Mean of token embeddings. Token [`PADDING`] is a constant zero vector
    /// and owns no parameters.
    EmbeddingMean { vocab: usize, dim: usize },
    Dense {
        inputs: usize,
        outputs: usize,
        activation: Activation,
    },
}

impl LayerSpec {
    fn param_count(&self) -> usize {
        match *self {
            LayerSpec::EmbeddingMean { vocab, dim } => vocab.saturating_sub(1) * dim,
            LayerSpec::Dense {
                inputs, outputs, ..
            } => inputs * outputs + outputs,
        }
    }

    fn outputs(&self) -> usize {
        match *self {
            LayerSpec::EmbeddingMean { dim, .. } => dim,
            LayerSpec::Dense { outputs, .. } => outputs,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Input<'a> {
    Dense(&'a [f64]),
    Tokens(&'a [usize]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetworkRepr", into = "NetworkRepr")]
pub struct Network {
    layers: Vec<LayerSpec>,
    offsets: Vec<usize>,
    params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct NetworkRepr {
    layers: Vec<LayerSpec>,
    params: Vec<f64>,
}

impl From<Network> for NetworkRepr {
    fn from(n: Network) -> Self {
        Self {
            layers: n.layers,
            params: n.params,
        }
    }
}

impl TryFrom<NetworkRepr> for Network {
    type Error = NnError;
    fn try_from(r: NetworkRepr) -> Result<Self, NnError> {
        let mut net = Network::zeroed(r.layers)?;
        if r.params.len() != net.params.len() {
            return Err(NnError::DimensionMismatch {
                expected: net.params.len(),
                found: r.params.len(),
            });
        }
        net.params = r.params;
        Ok(net)
    }
}

impl Network {
    /// All-zero parameters.
    pub fn zeroed(layers: Vec<LayerSpec>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::InvalidConfig("network needs at least one layer".into()));
        }
        let mut offsets = Vec::with_capacity(layers.len() + 1);
        let mut total = 0;
        let mut width = None;
        for (i, layer) in layers.iter().enumerate() {
            match *layer {
                LayerSpec::EmbeddingMean { .. } if i > 0 => return Err(NnError::MisplacedEmbedding),
                LayerSpec::Dense { inputs, .. } => {
                    if let Some(w) = width {
                        if w != inputs {
                            return Err(NnError::BadChain {
                                layer: i,
                                expected: inputs,
                                found: w,
                            });
                        }
                    }
                }
                _ => {}
            }
            width = Some(layer.outputs());
            offsets.push(total);
            total += layer.param_count();
        }
        offsets.push(total);
        Ok(Self {
            layers,
            offsets,
            params: vec![0.0; total],
        })
    }

    /// Uniform(-r, r) initialization with r = sqrt(6 / (fan_in + fan_out)).
    pub fn new(layers: Vec<LayerSpec>, seed: u64) -> Result<Self, NnError> {
        let mut net = Self::zeroed(layers)?;
        let mut rng = seed::rng(seed::derive(seed, "nn-init"));
        for l in 0..net.layers.len() {
            let (fan_in, fan_out, biases) = match net.layers[l] {
                LayerSpec::EmbeddingMean { dim, .. } => (1, dim, 0),
                LayerSpec::Dense {
                    inputs, outputs, ..
                } => (inputs, outputs, outputs),
            };
            let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let range = net.layer_range(l);
            let weights_end = range.end - biases;
            for p in &mut net.params[range.start..weights_end] {
                *p = rng.gen_range(-r..r);
            }
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer_range(&self, layer: usize) -> Range<usize> {
        self.offsets[layer]..self.offsets[layer + 1]
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(LayerSpec::outputs).unwrap_or(0)
    }

    /// A copy of the first `n` layers.
    pub fn truncated(&self, n: usize) -> Network {
        let n = n.clamp(1, self.layers.len());
        Network {
            layers: self.layers[..n].to_vec(),
            offsets: self.offsets[..=n].to_vec(),
            params: self.params[..self.offsets[n]].to_vec(),
        }
    }

    /// Copies pretrained vectors into the leading embedding layer.
    pub fn load_embeddings(&mut self, table: &EmbeddingTable) -> Result<(), NnError> {
        match self.layers.first() {
            Some(&LayerSpec::EmbeddingMean { vocab, dim }) => {
                if vocab != table.len() || dim != table.dim() {
                    return Err(NnError::DimensionMismatch {
                        expected: vocab * dim,
                        found: table.len() * table.dim(),
                    });
                }
                let range = self.layer_range(0);
                self.params[range].copy_from_slice(&table.vectors()[dim..]);
                Ok(())
            }
            _ => Err(NnError::InvalidConfig("first layer is not an embedding".into())),
        }
    }

    pub fn forward(&self, input: Input<'_>) -> Result<Vec<f64>, NnError> {
        let mut trace = self.trace(input)?;
        Ok(trace.pop().unwrap_or_default())
    }

    /// Outputs of every layer, first to last.
    pub fn trace(&self, input: Input<'_>) -> Result<Vec<Vec<f64>>, NnError> {
        self.trace_with(&self.params, input)
    }

    /// [`Network::trace`] with parameters taken from the front of `params`
    /// instead of the network's own store.
    pub fn trace_with(&self, params: &[f64], input: Input<'_>) -> Result<Vec<Vec<f64>>, NnError> {
        if params.len() < self.params.len() {
            return Err(NnError::DimensionMismatch {
                expected: self.params.len(),
                found: params.len(),
            });
        }
        let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let p = &params[self.layer_range(l)];
            let out = match *layer {
                LayerSpec::EmbeddingMean { vocab, dim } => {
                    let tokens = match input {
                        Input::Tokens(t) => t,
                        Input::Dense(d) => {
                            return Err(NnError::DimensionMismatch {
                                expected: 0,
                                found: d.len(),
                            })
                        }
                    };
                    let mut mean = vec![0.0; dim];
                    for &t in tokens {
                        if t >= vocab {
                            return Err(NnError::TokenOutOfRange(t));
                        }
                        if t == PADDING {
                            continue;
                        }
                        let row = &p[(t - 1) * dim..t * dim];
                        for (m, v) in mean.iter_mut().zip(row) {
                            *m += v;
                        }
                    }
                    if !tokens.is_empty() {
                        let n = tokens.len() as f64;
                        mean.iter_mut().for_each(|m| *m /= n);
                    }
                    mean
                }
                LayerSpec::Dense {
                    inputs,
                    outputs: width,
                    activation,
                } => {
                    let x: &[f64] = match outputs.last() {
                        Some(prev) => prev,
                        None => match input {
                            Input::Dense(d) => d,
                            Input::Tokens(t) => {
                                return Err(NnError::DimensionMismatch {
                                    expected: inputs,
                                    found: t.len(),
                                })
                            }
                        },
                    };
                    if x.len() != inputs {
                        return Err(NnError::DimensionMismatch {
                            expected: inputs,
                            found: x.len(),
                        });
                    }
                    let (w, b) = p.split_at(inputs * width);
                    (0..width)
                        .map(|o| {
                            let z = b[o] + crate::data::dot(&w[o * inputs..(o + 1) * inputs], x);
                            match activation {
                                Activation::Tanh => z.tanh(),
                                Activation::Linear => z,
                            }
                        })
                        .collect()
                }
            };
            outputs.push(out);
        }
        Ok(outputs)
    }

    /// Backpropagates `d_output` (gradient w.r.t. the last layer's output)
    /// through a trace of `input`, adding parameter gradients into `grad`.
    /// `grad` may be a slice of a larger buffer starting at this network's
    /// first parameter.
    pub fn backprop(&self, input: Input<'_>, trace: &[Vec<f64>], d_output: &[f64], grad: &mut [f64]) {
        self.backprop_with(&self.params, input, trace, d_output, grad)
    }

    /// [`Network::backprop`] for a trace produced by [`Network::trace_with`].
    pub fn backprop_with(
        &self,
        params: &[f64],
        input: Input<'_>,
        trace: &[Vec<f64>],
        d_output: &[f64],
        grad: &mut [f64],
    ) {
        let mut delta = d_output.to_vec();
        for l in (0..self.layers.len()).rev() {
            let range = self.layer_range(l);
            match self.layers[l] {
                LayerSpec::Dense {
                    inputs,
                    outputs,
                    activation,
                } => {
                    if activation == Activation::Tanh {
                        for (d, y) in delta.iter_mut().zip(&trace[l]) {
                            *d *= 1.0 - y * y;
                        }
                    }
                    let x: &[f64] = if l == 0 {
                        match input {
                            Input::Dense(d) => d,
                            Input::Tokens(_) => unreachable!("validated by trace"),
                        }
                    } else {
                        &trace[l - 1]
                    };
                    let p = &params[range.clone()];
                    let g = &mut grad[range.clone()];
                    let (gw, gb) = g.split_at_mut(inputs * outputs);
                    for o in 0..outputs {
                        let d = delta[o];
                        gb[o] += d;
                        if d != 0.0 {
                            for (gwi, xi) in gw[o * inputs..(o + 1) * inputs].iter_mut().zip(x) {
                                *gwi += d * xi;
                            }
                        }
                    }
                    if l > 0 {
                        let mut next = vec![0.0; inputs];
                        for o in 0..outputs {
                            let d = delta[o];
                            if d != 0.0 {
                                for (n, w) in next.iter_mut().zip(&p[o * inputs..(o + 1) * inputs]) {
                                    *n += d * w;
                                }
                            }
                        }
                        delta = next;
                    }
                }
                LayerSpec::EmbeddingMean { dim, .. } => {
                    let tokens = match input {
                        Input::Tokens(t) => t,
                        Input::Dense(_) => unreachable!("validated by trace"),
                    };
                    let scale = 1.0 / tokens.len().max(1) as f64;
                    let g = &mut grad[range];
                    for &t in tokens {
                        if t == PADDING {
                            continue;
                        }
                        for (gi, d) in g[(t - 1) * dim..t * dim].iter_mut().zip(&delta) {
                            *gi += d * scale;
                        }
                    }
                }
            }
        }
    }

    /// Cross-entropy of softmax(output) against `target` plus (l2/2)·||θ||².
    pub fn loss(&self, input: Input<'_>, target: usize, l2: f64) -> Result<f64, NnError> {
        let scores = self.forward(input)?;
        if target >= scores.len() {
            return Err(NnError::InvalidTarget(target));
        }
        Ok(cross_entropy(&scores, target) + 0.5 * l2 * self.params.iter().map(|p| p * p).sum::<f64>())
    }

    /// Gradient of [`Network::loss`] with respect to every parameter.
    pub fn backward(&self, input: Input<'_>, target: usize, l2: f64) -> Result<Vec<f64>, NnError> {
        let trace = self.trace(input)?;
        let scores = trace.last().expect("at least one layer");
        if target >= scores.len() {
            return Err(NnError::InvalidTarget(target));
        }
        let mut d = softmax(scores);
        d[target] -= 1.0;
        let mut grad: Vec<f64> = self.params.iter().map(|p| l2 * p).collect();
        self.backprop(input, &trace, &d, &mut grad);
        Ok(grad)
    }
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn cross_entropy(scores: &[f64], target: usize) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    lse - scores[target]
}

/// Index of the largest score; ties resolve to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub l2: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            l2: 1e-4,
            max_epochs: 50,
            patience: 5,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NnError::InvalidConfig("learning rate must be positive".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(NnError::InvalidConfig("l2 must be non-negative".into()));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(NnError::InvalidConfig("epochs and batch size must be positive".into()));
        }
        if self.patience > self.max_epochs {
            return Err(NnError::InvalidConfig("patience exceeds max epochs".into()));
        }
        Ok(())
    }
}

/// Something [`train`] can optimize.
pub trait Trainable {
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    /// Adds the gradient of one example's data loss into `grad`; returns the loss.
    fn accumulate(&self, example: &Instance, grad: &mut [f64]) -> Result<f64, NnError>;
    fn predict(&self, features: &[usize]) -> usize;
    /// Parameters held fixed: no updates and no l2.
    fn frozen(&self) -> Range<usize> {
        0..0
    }
    /// Extra penalty terms; adds their gradient into `grad` and returns their value.
    fn penalty(&self, _grad: &mut [f64]) -> f64 {
        0.0
    }
}

pub fn accuracy<M: Trainable + ?Sized>(model: &M, data: &[Instance]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let hits = data
        .iter()
        .filter(|x| model.predict(&x.features) == x.label)
        .count();
    hits as f64 / data.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

/// Minibatch SGD. Restores the parameters from the epoch with the best
/// validation accuracy and stops once `patience` epochs pass without
/// improvement.
pub fn train<M: Trainable>(
    model: &mut M,
    train_set: &[Instance],
    val_set: &[Instance],
    config: &TrainConfig,
) -> Result<TrainLog, NnError> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(NnError::EmptyData);
    }
    let mut rng = seed::rng(seed::derive(config.seed, "sgd"));
    let frozen = model.frozen();
    let n_params = model.params().len();
    let mut grad = vec![0.0; n_params];
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best = (f64::NEG_INFINITY, 0, model.params().to_vec());
    let mut since_best = 0;
    let mut epochs = Vec::new();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut loss = 0.0;
            for &i in batch {
                loss += model.accumulate(&train_set[i], &mut grad)?;
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            loss *= scale;
            let params = model.params();
            let mut l2 = 0.0;
            for (i, (g, p)) in grad.iter_mut().zip(params).enumerate() {
                if !frozen.contains(&i) {
                    *g += config.l2 * p;
                    l2 += p * p;
                }
            }
            loss += 0.5 * config.l2 * l2 + model.penalty(&mut grad);
            if !loss.is_finite() {
                return Err(NnError::NonFiniteLoss { epoch });
            }
            let lr = config.learning_rate;
            for (i, (p, g)) in model.params_mut().iter_mut().zip(&grad).enumerate() {
                if !frozen.contains(&i) {
                    *p -= lr * g;
                }
            }
            epoch_loss += loss;
            batches += 1;
        }
        let val_accuracy = accuracy(model, val_set);
        epochs.push(EpochStats {
            epoch,
            train_loss: epoch_loss / batches as f64,
            val_accuracy,
        });
        if val_accuracy > best.0 {
            best = (val_accuracy, epoch, model.params().to_vec());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > config.patience {
                break;
            }
        }
    }
    model.params_mut().copy_from_slice(&best.2);
    Ok(TrainLog {
        epochs,
        best_epoch: best.1,
        best_val_accuracy: best.0,
    })
}
