//! Task models and the prototype model.
//!
//! Both expose a [`Classifier`] over encoded instances (`&[usize]`: category
//! indices for tabular data, token ids for text).

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Domain, EmbeddingTable, FeatureSpace, Instance, TabularSchema, PADDING};
use crate::nn::{self, Activation, Input, LayerSpec, Network, NnError, TrainConfig, TrainLog, Trainable};
use crate::perturb::ConditionalImputer;
use crate::seed;

/// Per-feature imputers, indexed by feature.
pub type ConditionalImputerSlice<'a> = &'a [ConditionalImputer];

/// Width of every hidden layer.
pub const HIDDEN: usize = 50;
pub const TEXT_PROTOTYPES_PER_CLASS: usize = 40;
pub const TABULAR_PROTOTYPES_PER_CLASS: usize = 20;
/// Importance scores below this magnitude are not displayed.
pub const IMPORTANCE_THRESHOLD: f64 = 0.05;
pub const MAX_DISPLAYED_IMPORTANCES: usize = 6;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("class {class} has {have} training instances but needs {need} prototypes")]
    InsufficientClassData { class: usize, have: usize, need: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("imputer models feature {found}, expected feature {expected}")]
    ImputerMismatch { expected: usize, found: usize },
    #[error("expected a {expected} input")]
    DomainMismatch { expected: Domain },
}

/// A binary classifier over encoded instances.
pub trait Classifier: Send + Sync {
    fn scores(&self, x: &[usize]) -> [f64; 2];

    fn predict(&self, x: &[usize]) -> usize {
        let s = self.scores(x);
        usize::from(s[1] > s[0])
    }

    /// Positive minus negative class score.
    fn margin(&self, x: &[usize]) -> f64 {
        let s = self.scores(x);
        s[1] - s[0]
    }

    /// Softmax probability of the positive class.
    fn probability(&self, x: &[usize]) -> f64 {
        nn::softmax(&self.scores(x))[1]
    }
}

pub trait LatentClassifier: Classifier {
    fn latent(&self, x: &[usize]) -> Vec<f64>;
}

impl<T: Classifier + ?Sized> Classifier for &T {
    fn scores(&self, x: &[usize]) -> [f64; 2] {
        (**self).scores(x)
    }
    fn predict(&self, x: &[usize]) -> usize {
        (**self).predict(x)
    }
    fn margin(&self, x: &[usize]) -> f64 {
        (**self).margin(x)
    }
    fn probability(&self, x: &[usize]) -> f64 {
        (**self).probability(x)
    }
}

impl<T: LatentClassifier + ?Sized> LatentClassifier for &T {
    fn latent(&self, x: &[usize]) -> Vec<f64> {
        (**self).latent(x)
    }
}

/// How encoded instances become network input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Encoder {
    OneHot { cardinalities: Vec<usize> },
    Tokens { vocab: usize },
}

impl Encoder {
    pub fn domain(&self) -> Domain {
        match self {
            Encoder::OneHot { .. } => Domain::Tabular,
            Encoder::Tokens { .. } => Domain::Text,
        }
    }

    pub fn one_hot(cardinalities: &[usize], x: &[usize]) -> Vec<f64> {
        let mut v = vec![0.0; cardinalities.iter().sum()];
        let mut offset = 0;
        for (&c, &value) in cardinalities.iter().zip(x) {
            v[offset + value] = 1.0;
            offset += c;
        }
        v
    }

    fn with<R>(&self, x: &[usize], f: impl FnOnce(Input<'_>) -> R) -> R {
        match self {
            Encoder::OneHot { cardinalities } => f(Input::Dense(&Self::one_hot(cardinalities, x))),
            Encoder::Tokens { .. } => f(Input::Tokens(x)),
        }
    }

    fn check(&self, x: &[usize]) -> Result<(), ModelError> {
        match self {
            Encoder::OneHot { cardinalities } => {
                if x.len() != cardinalities.len() {
                    return Err(NnError::DimensionMismatch {
                        expected: cardinalities.len(),
                        found: x.len(),
                    }
                    .into());
                }
                for (&v, &c) in x.iter().zip(cardinalities) {
                    if v >= c {
                        return Err(ModelError::IndexOutOfRange { index: v, len: c });
                    }
                }
            }
            Encoder::Tokens { vocab } => {
                if let Some(&t) = x.iter().find(|&&t| t >= *vocab) {
                    return Err(NnError::TokenOutOfRange(t).into());
                }
            }
        }
        Ok(())
    }
}

/// A feature extractor g followed by a linear head producing two class scores.
/// The latent vector is the output of the last extractor layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskModel {
    encoder: Encoder,
    net: Network,
}

/// One-hot input, two tanh layers of width [`HIDDEN`], linear head.
pub fn build_tabular_task_model(schema: &TabularSchema, seed: u64) -> Result<TaskModel, ModelError> {
    let width = schema.one_hot_width();
    let net = Network::new(
        vec![
            LayerSpec::Dense {
                inputs: width,
                outputs: HIDDEN,
                activation: Activation::Tanh,
            },
            LayerSpec::Dense {
                inputs: HIDDEN,
                outputs: HIDDEN,
                activation: Activation::Tanh,
            },
            LayerSpec::Dense {
                inputs: HIDDEN,
                outputs: 2,
                activation: Activation::Linear,
            },
        ],
        seed,
    )?;
    Ok(TaskModel {
        encoder: Encoder::OneHot {
            cardinalities: schema.cardinalities(),
        },
        net,
    })
}

/// Mean of (trainable, pretrained-initialized) token embeddings, one tanh
/// layer of width [`HIDDEN`], linear head.
pub fn build_text_task_model(embeddings: &EmbeddingTable, seed: u64) -> Result<TaskModel, ModelError> {
    let mut net = Network::new(
        vec![
            LayerSpec::EmbeddingMean {
                vocab: embeddings.len(),
                dim: embeddings.dim(),
            },
            LayerSpec::Dense {
                inputs: embeddings.dim(),
                outputs: HIDDEN,
                activation: Activation::Tanh,
            },
            LayerSpec::Dense {
                inputs: HIDDEN,
                outputs: 2,
                activation: Activation::Linear,
            },
        ],
        seed,
    )?;
    net.load_embeddings(embeddings)?;
    Ok(TaskModel {
        encoder: Encoder::Tokens {
            vocab: embeddings.len(),
        },
        net,
    })
}

impl TaskModel {
    pub fn from_parts(encoder: Encoder, net: Network) -> Result<Self, ModelError> {
        if net.output_dim() != 2 || net.layers().len() < 2 {
            return Err(NnError::InvalidConfig("task model needs an extractor and a 2-way head".into()).into());
        }
        Ok(Self { encoder, net })
    }

    pub fn domain(&self) -> Domain {
        self.encoder.domain()
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    /// The extractor g as a standalone network.
    pub fn extractor(&self) -> Network {
        self.net.truncated(self.net.layers().len() - 1)
    }

    pub fn latent_dim(&self) -> usize {
        match self.net.layers()[self.net.layers().len() - 2] {
            LayerSpec::EmbeddingMean { dim, .. } => dim,
            LayerSpec::Dense { outputs, .. } => outputs,
        }
    }

    pub fn try_scores(&self, x: &[usize]) -> Result<[f64; 2], ModelError> {
        self.encoder.check(x)?;
        let s = self.encoder.with(x, |input| self.net.forward(input))?;
        Ok([s[0], s[1]])
    }

    pub fn train(&mut self, train: &[Instance], val: &[Instance], config: &TrainConfig) -> Result<TrainLog, ModelError> {
        Ok(nn::train(self, train, val, config)?)
    }
}

impl Classifier for TaskModel {
    fn scores(&self, x: &[usize]) -> [f64; 2] {
        self.try_scores(x).expect("input matches the model")
    }
}

impl LatentClassifier for TaskModel {
    fn latent(&self, x: &[usize]) -> Vec<f64> {
        let mut trace = self
            .encoder
            .with(x, |input| self.net.trace(input))
            .expect("input matches the model");
        trace.swap_remove(trace.len() - 2)
    }
}

impl Trainable for TaskModel {
    fn params(&self) -> &[f64] {
        self.net.params()
    }

    fn params_mut(&mut self) -> &mut [f64] {
        self.net.params_mut()
    }

    fn accumulate(&self, example: &Instance, grad: &mut [f64]) -> Result<f64, NnError> {
        self.encoder.with(&example.features, |input| {
            let trace = self.net.trace(input)?;
            let scores = trace.last().expect("non-empty network");
            let mut d = nn::softmax(scores);
            d[example.label] -= 1.0;
            self.net.backprop(input, &trace, &d, grad);
            Ok(nn::cross_entropy(scores, example.label))
        })
    }

    fn predict(&self, features: &[usize]) -> usize {
        Classifier::predict(self, features)
    }
}

pub fn accuracy<C: Classifier + ?Sized>(model: &C, data: &[Instance]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    data.iter().filter(|x| model.predict(&x.features) == x.label).count() as f64 / data.len() as f64
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
}

/// Sum of squared distances from each point to its nearest centroid.
pub fn kmeans_objective(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .map(|p| centroids.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
        .sum()
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> KMeans {
    assert!(k >= 1 && k <= points.len(), "need 1 <= k <= n");
    let mut rng = seed::rng(seed::derive(seed, "kmeans"));
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while centroids.len() < k {
        let total: f64 = (0..n).filter(|&i| !chosen[i]).map(|i| nearest[i]).sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for i in (0..n).filter(|&i| !chosen[i]) {
                target -= nearest[i];
                if target <= 0.0 && nearest[i] > 0.0 {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| (0..n).rev().find(|&i| !chosen[i] && nearest[i] > 0.0).unwrap())
        } else {
            let rest: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            rest[rng.gen_range(0..rest.len())]
        };
        chosen[pick] = true;
        for (i, p) in points.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(p, &points[pick]));
        }
        centroids.push(points[pick].clone());
    }

    let dim = points[0].len();
    let mut assignments = vec![usize::MAX; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d = sq_dist(p, centroid);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    KMeans { centroids, assignments }
}

/// Weights of the prototype training objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeLoss {
    /// l1 penalty on off-class classifier weights.
    pub lambda_l1: f64,
    /// Weight on the (negated) distance to the nearest out-of-class prototype.
    pub lambda_sep: f64,
}

impl Default for PrototypeLoss {
    fn default() -> Self {
        Self {
            lambda_l1: 1e-4,
            lambda_sep: 1e-2,
        }
    }
}

/// Classifies by Gaussian-kernel similarity to learned prototype vectors:
/// the score of class c is the largest activation exp(-||z - p||^2) over
/// the prototypes of class c, where z is the standardized latent vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeModel {
    encoder: Encoder,
    extractor: Network,
    /// Latent standardization: z = (g(x) - shift) / scale.
    shift: Vec<f64>,
    scale: f64,
    dim: usize,
    /// Row-major, one row of `dim` values per prototype.
    prototypes: Vec<f64>,
    classes: Vec<usize>,
    /// Row-major (prototype, class) classifier weights used by the training loss.
    weights: Vec<f64>,
    freeze_extractor: bool,
}

/// Copies the task model's extractor, standardizes its latent space over
/// `train`, and seeds each class's prototypes with k-means centroids of that
/// class's latent vectors. Classifier weights start at +1 for a prototype's
/// own class and -0.5 for the other.
pub fn init_prototype_model(
    task: &TaskModel,
    train: &[Instance],
    counts: [usize; 2],
    freeze_extractor: bool,
    seed: u64,
) -> Result<PrototypeModel, ModelError> {
    let extractor = task.extractor();
    let raw: Vec<Vec<f64>> = train
        .iter()
        .map(|x| {
            task.encoder.check(&x.features)?;
            let mut t = task.encoder.with(&x.features, |input| extractor.trace(input))?;
            Ok(t.pop().expect("non-empty extractor"))
        })
        .collect::<Result<_, ModelError>>()?;
    for (class, &need) in counts.iter().enumerate() {
        let have = train.iter().filter(|x| x.label == class).count();
        if have < need || need == 0 {
            return Err(ModelError::InsufficientClassData { class, have, need });
        }
    }
    let dim = task.latent_dim();
    let n = raw.len() as f64;
    let shift: Vec<f64> = (0..dim).map(|j| raw.iter().map(|h| h[j]).sum::<f64>() / n).collect();
    let total_var: f64 = raw.iter().map(|h| sq_dist(h, &shift)).sum::<f64>() / n;
    let scale = if total_var > 1e-12 { total_var.sqrt() } else { 1.0 };

    let mut prototypes = Vec::new();
    let mut classes = Vec::new();
    for (class, &k) in counts.iter().enumerate() {
        let points: Vec<Vec<f64>> = raw
            .iter()
            .zip(train)
            .filter(|(_, x)| x.label == class)
            .map(|(h, _)| h.iter().zip(&shift).map(|(v, m)| (v - m) / scale).collect())
            .collect();
        let km = kmeans(&points, k, seed::derive_index(seed, "prototype-class", class as u64));
        for c in km.centroids {
            prototypes.extend(c);
            classes.push(class);
        }
    }
    let weights = classes
        .iter()
        .flat_map(|&c| (0..2).map(move |j| if j == c { 1.0 } else { -0.5 }))
        .collect();
    Ok(PrototypeModel {
        encoder: task.encoder.clone(),
        extractor,
        shift,
        scale,
        dim,
        prototypes,
        classes,
        weights,
        freeze_extractor,
    })
}

/// Per-input quantities shared by scoring and training.
struct Evaluation {
    trace: Vec<Vec<f64>>,
    z: Vec<f64>,
    activations: Vec<f64>,
}

impl PrototypeModel {
    /// Assembles a model from explicit parts; latent standardization is the identity.
    pub fn from_parts(
        encoder: Encoder,
        extractor: Network,
        prototypes: Vec<Vec<f64>>,
        classes: Vec<usize>,
        freeze_extractor: bool,
    ) -> Result<Self, ModelError> {
        let dim = extractor.output_dim();
        if prototypes.len() != classes.len() || classes.iter().any(|&c| c > 1) {
            return Err(NnError::InvalidConfig("every prototype needs a class in {0,1}".into()).into());
        }
        if let Some(p) = prototypes.iter().find(|p| p.len() != dim) {
            return Err(NnError::DimensionMismatch {
                expected: dim,
                found: p.len(),
            }
            .into());
        }
        let weights = classes
            .iter()
            .flat_map(|&c| (0..2).map(move |j| if j == c { 1.0 } else { -0.5 }))
            .collect();
        Ok(Self {
            encoder,
            extractor,
            shift: vec![0.0; dim],
            scale: 1.0,
            dim,
            prototypes: prototypes.concat(),
            classes,
            weights,
            freeze_extractor,
        })
    }

    pub fn domain(&self) -> Domain {
        self.encoder.domain()
    }

    pub fn extractor(&self) -> &Network {
        &self.extractor
    }

    pub fn freeze_extractor(&self) -> bool {
        self.freeze_extractor
    }

    pub fn num_prototypes(&self) -> usize {
        self.classes.len()
    }

    pub fn prototype(&self, k: usize) -> &[f64] {
        &self.prototypes[k * self.dim..(k + 1) * self.dim]
    }

    pub fn class_of(&self, k: usize) -> usize {
        self.classes[k]
    }

    pub fn weight(&self, k: usize, class: usize) -> f64 {
        self.weights[k * 2 + class]
    }

    pub fn counts(&self) -> [usize; 2] {
        let ones = self.classes.iter().filter(|&&c| c == 1).count();
        [self.classes.len() - ones, ones]
    }

    fn evaluate_with(&self, ext: &[f64], protos: &[f64], x: &[usize]) -> Result<Evaluation, ModelError> {
        self.encoder.check(x)?;
        let trace = self.encoder.with(x, |input| self.extractor.trace_with(ext, input))?;
        let h = trace.last().expect("non-empty extractor");
        let z: Vec<f64> = h.iter().zip(&self.shift).map(|(v, m)| (v - m) / self.scale).collect();
        let activations = protos.chunks(self.dim).map(|p| (-sq_dist(&z, p)).exp()).collect();
        Ok(Evaluation { trace, z, activations })
    }

    fn evaluate(&self, x: &[usize]) -> Evaluation {
        self.evaluate_with(self.extractor.params(), &self.prototypes, x)
            .expect("input matches the model")
    }

    /// Kernel activation of every prototype.
    pub fn activations(&self, x: &[usize]) -> Vec<f64> {
        self.evaluate(x).activations
    }

    /// The most activated prototype; ties go to the lowest index.
    pub fn winner(&self, x: &[usize]) -> usize {
        argmax_first(&self.activations(x))
    }

    /// Max-pooled activations weighted by the classifier weights; the
    /// quantity whose softmax the training cross-entropy scores.
    pub fn logits(&self, x: &[usize]) -> [f64; 2] {
        let a = self.activations(x);
        logits_from(&a, &self.classes, &self.weights)
    }

    /// Negated squared distance from the latent vector of `x` to the nearest
    /// prototype not of class `label`.
    pub fn separation(&self, x: &[usize], label: usize) -> f64 {
        let z = self.evaluate(x).z;
        -(0..self.num_prototypes())
            .filter(|&k| self.classes[k] != label)
            .map(|k| sq_dist(&z, self.prototype(k)))
            .fold(f64::INFINITY, f64::min)
    }

    /// Per-example training loss: cross-entropy plus the weighted separation term.
    pub fn example_loss(&self, x: &[usize], label: usize, lambda_sep: f64) -> f64 {
        nn::cross_entropy(&self.logits(x), label) + lambda_sep * self.separation(x, label)
    }

    /// Trainable parameters laid out as extractor, prototypes, classifier weights.
    pub fn flat_params(&self) -> Vec<f64> {
        [self.extractor.params(), &self.prototypes, &self.weights].concat()
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<(), ModelError> {
        let n_ext = self.extractor.param_count();
        let n_proto = self.prototypes.len();
        let expected = n_ext + n_proto + self.weights.len();
        if params.len() != expected {
            return Err(NnError::DimensionMismatch {
                expected,
                found: params.len(),
            }
            .into());
        }
        self.extractor.params_mut().copy_from_slice(&params[..n_ext]);
        self.prototypes.copy_from_slice(&params[n_ext..n_ext + n_proto]);
        self.weights.copy_from_slice(&params[n_ext + n_proto..]);
        Ok(())
    }

    /// [`Self::example_loss`] and its gradient in the [`Self::flat_params`]
    /// layout. Extractor entries stay zero when the extractor is frozen.
    pub fn example_gradient(&self, example: &Instance, loss: PrototypeLoss) -> Result<(f64, Vec<f64>), ModelError> {
        let trainer = PrototypeTrainer {
            model: self,
            params: self.flat_params(),
            n_ext: self.extractor.param_count(),
            n_proto: self.prototypes.len(),
            loss,
        };
        let mut grad = vec![0.0; trainer.params.len()];
        let value = trainer.accumulate(example, &mut grad)?;
        Ok((value, grad))
    }

    pub fn train(
        &mut self,
        train: &[Instance],
        val: &[Instance],
        loss: PrototypeLoss,
        config: &TrainConfig,
    ) -> Result<TrainLog, ModelError> {
        train_prototype(self, train, val, loss, config)
    }
}

fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Index of each class's most activated prototype (lowest index on ties).
fn class_winners(activations: &[f64], classes: &[usize]) -> [Option<usize>; 2] {
    let mut best: [Option<usize>; 2] = [None, None];
    for (k, (&a, &c)) in activations.iter().zip(classes).enumerate() {
        match best[c] {
            Some(b) if activations[b] >= a => {}
            _ => best[c] = Some(k),
        }
    }
    best
}

fn logits_from(activations: &[f64], classes: &[usize], weights: &[f64]) -> [f64; 2] {
    let mut logits = [0.0; 2];
    for k in class_winners(activations, classes).into_iter().flatten() {
        for (c, l) in logits.iter_mut().enumerate() {
            *l += weights[k * 2 + c] * activations[k];
        }
    }
    logits
}

impl Classifier for PrototypeModel {
    fn scores(&self, x: &[usize]) -> [f64; 2] {
        let a = self.activations(x);
        let w = class_winners(&a, &self.classes);
        [w[0].map_or(0.0, |k| a[k]), w[1].map_or(0.0, |k| a[k])]
    }

    /// The class of the globally most activated prototype.
    fn predict(&self, x: &[usize]) -> usize {
        self.classes[self.winner(x)]
    }
}

impl LatentClassifier for PrototypeModel {
    fn latent(&self, x: &[usize]) -> Vec<f64> {
        self.evaluate(x).z
    }
}

/// Optimizes extractor (unless frozen), prototypes and classifier weights as
/// one flat vector laid out as `[extractor | prototypes | weights]`.
struct PrototypeTrainer<'a> {
    model: &'a PrototypeModel,
    params: Vec<f64>,
    n_ext: usize,
    n_proto: usize,
    loss: PrototypeLoss,
}

impl PrototypeTrainer<'_> {
    fn split(&self) -> (&[f64], &[f64], &[f64]) {
        let (ext, rest) = self.params.split_at(self.n_ext);
        let (protos, weights) = rest.split_at(self.n_proto);
        (ext, protos, weights)
    }
}

impl Trainable for PrototypeTrainer<'_> {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn accumulate(&self, example: &Instance, grad: &mut [f64]) -> Result<f64, NnError> {
        let m = self.model;
        let (ext, protos, weights) = self.split();
        let eval = m
            .evaluate_with(ext, protos, &example.features)
            .map_err(|e| match e {
                ModelError::Nn(e) => e,
                other => NnError::InvalidConfig(other.to_string()),
            })?;
        let (g_ext, rest) = grad.split_at_mut(self.n_ext);
        let (g_protos, g_weights) = rest.split_at_mut(self.n_proto);
        let dim = m.dim;
        let a = &eval.activations;
        let z = &eval.z;
        let mut dz = vec![0.0; dim];

        let logits = logits_from(a, &m.classes, weights);
        let mut delta = nn::softmax(&logits);
        delta[example.label] -= 1.0;
        let mut loss = nn::cross_entropy(&logits, example.label);
        for k in class_winners(a, &m.classes).into_iter().flatten() {
            let mut d_act = 0.0;
            for c in 0..2 {
                g_weights[k * 2 + c] += a[k] * delta[c];
                d_act += weights[k * 2 + c] * delta[c];
            }
            // d a / d z = -2 a (z - p), d a / d p = 2 a (z - p)
            let p = &protos[k * dim..(k + 1) * dim];
            for j in 0..dim {
                let t = 2.0 * a[k] * (z[j] - p[j]) * d_act;
                dz[j] -= t;
                g_protos[k * dim + j] += t;
            }
        }

        if self.loss.lambda_sep != 0.0 {
            let nearest = (0..m.classes.len())
                .filter(|&k| m.classes[k] != example.label)
                .map(|k| (k, sq_dist(z, &protos[k * dim..(k + 1) * dim])))
                .fold(None, |best: Option<(usize, f64)>, (k, d)| match best {
                    Some((_, bd)) if bd <= d => best,
                    _ => Some((k, d)),
                });
            if let Some((k, d)) = nearest {
                let lam = self.loss.lambda_sep;
                loss -= lam * d;
                let p = &protos[k * dim..(k + 1) * dim];
                for j in 0..dim {
                    let t = 2.0 * lam * (z[j] - p[j]);
                    dz[j] -= t;
                    g_protos[k * dim + j] += t;
                }
            }
        }

        if !m.freeze_extractor {
            let dh: Vec<f64> = dz.iter().map(|d| d / m.scale).collect();
            m.encoder.with(&example.features, |input| {
                m.extractor.backprop_with(ext, input, &eval.trace, &dh, g_ext)
            });
        }
        Ok(loss)
    }

    fn predict(&self, features: &[usize]) -> usize {
        let (ext, protos, _) = self.split();
        let a = self
            .model
            .evaluate_with(ext, protos, features)
            .expect("input matches the model")
            .activations;
        self.model.classes[argmax_first(&a)]
    }

    fn frozen(&self) -> std::ops::Range<usize> {
        if self.model.freeze_extractor {
            0..self.n_ext
        } else {
            0..0
        }
    }

    fn penalty(&self, grad: &mut [f64]) -> f64 {
        let (_, _, weights) = self.split();
        let offset = self.n_ext + self.n_proto;
        let lam = self.loss.lambda_l1;
        let mut total = 0.0;
        for (k, &class) in self.model.classes.iter().enumerate() {
            let i = k * 2 + (1 - class);
            let w = weights[i];
            total += w.abs();
            grad[offset + i] += lam * w.signum() * f64::from(u8::from(w != 0.0));
        }
        lam * total
    }
}

/// Minimizes cross-entropy over [`PrototypeModel::logits`] plus the l1 and
/// separation terms, with early stopping on validation accuracy.
pub fn train_prototype(
    model: &mut PrototypeModel,
    train: &[Instance],
    val: &[Instance],
    loss: PrototypeLoss,
    config: &TrainConfig,
) -> Result<TrainLog, ModelError> {
    let params = [model.extractor.params(), &model.prototypes, &model.weights].concat();
    let mut trainer = PrototypeTrainer {
        model,
        params,
        n_ext: model.extractor.param_count(),
        n_proto: model.prototypes.len(),
        loss,
    };
    let log = nn::train(&mut trainer, train, val, config)?;
    let PrototypeTrainer {
        params, n_ext, n_proto, ..
    } = trainer;
    model.extractor.params_mut().copy_from_slice(&params[..n_ext]);
    model.prototypes.copy_from_slice(&params[n_ext..n_ext + n_proto]);
    model.weights.copy_from_slice(&params[n_ext + n_proto..]);
    Ok(log)
}

/// Drop in the winning prototype's activation when the token at `position`
/// is replaced by padding (a zero embedding).
pub fn importance_text(model: &PrototypeModel, x: &[usize], position: usize) -> Result<f64, ModelError> {
    if model.domain() != Domain::Text {
        return Err(ModelError::DomainMismatch { expected: Domain::Text });
    }
    if position >= x.len() {
        return Err(ModelError::IndexOutOfRange {
            index: position,
            len: x.len(),
        });
    }
    model.encoder.check(x)?;
    let a = model.activations(x);
    let k = argmax_first(&a);
    let mut omitted = x.to_vec();
    omitted[position] = PADDING;
    Ok(a[k] - model.activations(&omitted)[k])
}

/// Winning-prototype activation minus its expectation when feature `feature`
/// is redrawn from the imputer's conditional distribution.
pub fn importance_tabular(
    model: &PrototypeModel,
    x: &[usize],
    feature: usize,
    imputer: &ConditionalImputer,
) -> Result<f64, ModelError> {
    if model.domain() != Domain::Tabular {
        return Err(ModelError::DomainMismatch {
            expected: Domain::Tabular,
        });
    }
    if feature >= x.len() {
        return Err(ModelError::IndexOutOfRange {
            index: feature,
            len: x.len(),
        });
    }
    if imputer.feature() != feature {
        return Err(ModelError::ImputerMismatch {
            expected: feature,
            found: imputer.feature(),
        });
    }
    model.encoder.check(x)?;
    let a = model.activations(x);
    let k = argmax_first(&a);
    let probs = imputer.predict(x);
    let mut alt = x.to_vec();
    let mut expected = 0.0;
    for (v, p) in probs.iter().enumerate() {
        alt[feature] = v;
        expected += p * model.activations(&alt)[k];
    }
    Ok(a[k] - expected)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature: usize,
    pub label: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeExplanation {
    pub instance: Vec<usize>,
    pub predicted_class: usize,
    /// Activation of the winning prototype, the predicted class's score.
    pub score: f64,
    pub prototype: usize,
    /// Index into the training set of the example nearest the prototype.
    pub example: usize,
    pub example_text: String,
    /// At most six, each at least the display threshold, largest magnitude first.
    pub importances: Vec<FeatureImportance>,
}

/// Index of the training example whose latent vector is nearest prototype `k`.
pub fn nearest_training_example(model: &PrototypeModel, k: usize, train: &[Instance]) -> Option<usize> {
    let p = model.prototype(k);
    let mut best: Option<(usize, f64)> = None;
    for (i, x) in train.iter().enumerate() {
        let d = sq_dist(&model.latent(&x.features), p);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

/// Builds the displayed prototype explanation. `imputers[j]` must model
/// feature j for tabular data; it is ignored for text.
pub fn render_prototype_explanation(
    model: &PrototypeModel,
    x: &[usize],
    train: &[Instance],
    space: &FeatureSpace,
    imputers: &[ConditionalImputer],
) -> Result<PrototypeExplanation, ModelError> {
    model.encoder.check(x)?;
    let a = model.activations(x);
    let k = argmax_first(&a);
    let mut importances = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        let score = match model.domain() {
            Domain::Text => importance_text(model, x, j)?,
            Domain::Tabular => {
                let imputer = imputers.get(j).ok_or(ModelError::IndexOutOfRange {
                    index: j,
                    len: imputers.len(),
                })?;
                importance_tabular(model, x, j, imputer)?
            }
        };
        importances.push(FeatureImportance {
            feature: j,
            label: space.describe(j, x[j]),
            score,
        });
    }
    let importances = select_importances(importances);
    let example = nearest_training_example(model, k, train).ok_or(ModelError::IndexOutOfRange { index: 0, len: 0 })?;
    Ok(PrototypeExplanation {
        instance: x.to_vec(),
        predicted_class: model.classes[k],
        score: a[k],
        prototype: k,
        example,
        example_text: space.render(&train[example].features),
        importances,
    })
}

/// Keeps scores meeting the display threshold, largest magnitude first
/// (lower feature index on ties), at most six.
pub fn select_importances(mut all: Vec<FeatureImportance>) -> Vec<FeatureImportance> {
    all.retain(|f| f.score.abs() >= IMPORTANCE_THRESHOLD);
    all.sort_by(|a, b| b.score.abs().total_cmp(&a.score.abs()).then(a.feature.cmp(&b.feature)));
    all.truncate(MAX_DISPLAYED_IMPORTANCES);
    all
}
