//! Local perturbation distributions D(·|x), conditional imputers, and
//! counterfactual sampling.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{EmbeddingTable, Instance, PADDING};
use crate::models::{Classifier, Encoder};
use crate::par::{self, Parallelism};

/// Draw budget for counterfactual sampling and boundary search.
pub const SAMPLE_BUDGET: usize = 10_000;

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("feature {feature} takes a single value in the training data")]
    DegenerateFeature { feature: usize },
    #[error("none of {draws} perturbations had the requested prediction")]
    NoMatchingPerturbation { draws: usize },
    #[error("invalid perturbation config: {0}")]
    InvalidConfig(String),
    #[error("line {line} of the tag file is malformed")]
    MalformedTagLine { line: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    pub min_edits: usize,
    pub max_edits: usize,
    /// Cap on substituted tokens per text perturbation.
    pub max_text_edits: usize,
    /// Nearest embedding neighbors considered as substitutes.
    pub neighbor_pool: usize,
    /// Per-token edit probability is min(1, length_decay / sentence length).
    pub length_decay: f64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            min_edits: 1,
            max_edits: 3,
            max_text_edits: 5,
            neighbor_pool: 15,
            length_decay: 2.5,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<(), PerturbError> {
        if self.min_edits < 1 || self.min_edits > self.max_edits {
            return Err(PerturbError::InvalidConfig("need 1 <= min edits <= max edits".into()));
        }
        if self.neighbor_pool < 1 || self.max_text_edits < 1 {
            return Err(PerturbError::InvalidConfig("neighbor pool and text edit cap must be positive".into()));
        }
        if !(self.length_decay > 0.0) {
            return Err(PerturbError::InvalidConfig("length decay must be positive".into()));
        }
        Ok(())
    }

    /// Probability that any one editable token is selected for substitution.
    pub fn edit_probability(&self, len: usize) -> f64 {
        (self.length_decay / len.max(1) as f64).min(1.0)
    }
}

/// Changes between `min_edits` and `max_edits` features (capped at the
/// feature count), chosen without replacement, each to a different value
/// drawn uniformly.
pub fn perturb_tabular<R: Rng + ?Sized>(
    x: &[usize],
    cardinalities: &[usize],
    config: &PerturbationConfig,
    rng: &mut R,
) -> Vec<usize> {
    let n = x.len();
    let hi = config.max_edits.min(n);
    let lo = config.min_edits.min(hi);
    let edits = rng.gen_range(lo..=hi);
    let mut out = x.to_vec();
    for j in index::sample(rng, n, edits) {
        let card = cardinalities[j];
        let v = rng.gen_range(0..card - 1);
        out[j] = if v >= x[j] { v + 1 } else { v };
    }
    out
}

const FUNCTION_WORDS: &[&str] = &[
    // determiners and articles
    "a", "an", "the", "this", "that", "these", "those", "some", "any", "each", "every", "no", "either", "neither",
    "all", "both", "another", "such", "what", "which", "whose",
    // pronouns
    "i", "me", "my", "mine", "myself", "you", "your", "yours", "yourself", "yourselves", "he", "him", "his",
    "himself", "she", "her", "hers", "herself", "it", "its", "itself", "we", "us", "our", "ours", "ourselves", "they",
    "them", "their", "theirs", "themselves", "who", "whom", "one", "someone", "anyone", "everyone", "something",
    "anything", "everything", "nothing", "nobody",
    // conjunctions
    "and", "or", "but", "nor", "so", "yet", "because", "although", "though", "if", "unless", "while", "whereas",
    "since", "whether", "than", "as", "when", "where",
    // punctuation
    ".", ",", "!", "?", ";", ":", "'", "\"", "-", "--", "(", ")", "...", "'s", "n't",
];

/// Which tokens may be substituted in text perturbations. Unknown tokens are
/// editable; a built-in list of function words and punctuation is not.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    blocked: HashSet<String>,
    overrides: HashMap<String, bool>,
}

impl Default for Lexicon {
    fn default() -> Self {
        Self {
            blocked: FUNCTION_WORDS.iter().map(|w| w.to_string()).collect(),
            overrides: HashMap::new(),
        }
    }
}

impl Lexicon {
    /// Overrides the built-in list with `token<TAB>0|1` lines.
    pub fn with_tag_file(mut self, path: &Path) -> Result<Self, PerturbError> {
        let text = std::fs::read_to_string(path)?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (token, flag) = line
                .split_once('\t')
                .ok_or(PerturbError::MalformedTagLine { line: i + 1 })?;
            let editable = match flag.trim() {
                "1" => true,
                "0" => false,
                _ => return Err(PerturbError::MalformedTagLine { line: i + 1 }),
            };
            self.overrides.insert(token.to_lowercase(), editable);
        }
        Ok(self)
    }

    pub fn is_editable(&self, token: &str) -> bool {
        match self.overrides.get(token) {
            Some(&e) => e,
            None => !self.blocked.contains(token),
        }
    }
}

/// Cached nearest-neighbor pools keyed by token id; misses are computed on demand.
#[derive(Clone, Debug)]
pub struct NeighborIndex {
    embeddings: Arc<EmbeddingTable>,
    pool: usize,
    cache: HashMap<usize, Vec<(usize, f64)>>,
}

impl NeighborIndex {
    /// Precomputes pools for every token id in `tokens`.
    pub fn build(embeddings: Arc<EmbeddingTable>, pool: usize, tokens: impl IntoIterator<Item = usize>, mode: Parallelism) -> Self {
        let mut ids: Vec<usize> = tokens.into_iter().filter(|&t| t != PADDING).collect();
        ids.sort_unstable();
        ids.dedup();
        let pools = par::map_slice(mode, &ids, |&id| embeddings.nearest(id, pool));
        Self {
            cache: ids.into_iter().zip(pools).collect(),
            embeddings,
            pool,
        }
    }

    pub fn embeddings(&self) -> &Arc<EmbeddingTable> {
        &self.embeddings
    }

    pub fn neighbors(&self, id: usize) -> std::borrow::Cow<'_, [(usize, f64)]> {
        match self.cache.get(&id) {
            Some(v) => std::borrow::Cow::Borrowed(v),
            None => std::borrow::Cow::Owned(self.embeddings.nearest(id, self.pool)),
        }
    }
}

/// Text perturbation: substitutes editable tokens with embedding neighbors.
#[derive(Clone, Debug)]
pub struct TextPerturber {
    neighbors: NeighborIndex,
    editable: Vec<bool>,
    config: PerturbationConfig,
}

impl TextPerturber {
    pub fn new(neighbors: NeighborIndex, lexicon: &Lexicon, config: PerturbationConfig) -> Result<Self, PerturbError> {
        config.validate()?;
        let emb = neighbors.embeddings();
        let editable = (0..emb.len())
            .map(|id| id != PADDING && lexicon.is_editable(emb.token(id)))
            .collect();
        Ok(Self {
            neighbors,
            editable,
            config,
        })
    }

    pub fn is_editable(&self, token: usize) -> bool {
        self.editable.get(token).copied().unwrap_or(false)
    }

    pub fn neighbors(&self) -> &NeighborIndex {
        &self.neighbors
    }

    pub fn config(&self) -> &PerturbationConfig {
        &self.config
    }

    /// Substitution candidates for `token` with sampling weights max(cos, 0).
    pub fn candidates(&self, token: usize) -> Vec<(usize, f64)> {
        self.neighbors
            .neighbors(token)
            .iter()
            .map(|&(t, s)| (t, s.max(0.0)))
            .collect()
    }

    /// Each editable token is selected with probability
    /// [`PerturbationConfig::edit_probability`] and replaced by a neighbor
    /// drawn proportionally to its clamped cosine similarity. If more than
    /// `max_text_edits` tokens changed, a uniformly chosen subset of that many
    /// substitutions is kept.
    pub fn perturb<R: Rng + ?Sized>(&self, x: &[usize], rng: &mut R) -> Vec<usize> {
        let p = self.config.edit_probability(x.len());
        let mut edits: Vec<(usize, usize)> = Vec::new();
        for (pos, &token) in x.iter().enumerate() {
            if !self.is_editable(token) || rng.gen::<f64>() >= p {
                continue;
            }
            let cands = self.candidates(token);
            let total: f64 = cands.iter().map(|c| c.1).sum();
            if total <= 0.0 {
                continue;
            }
            let mut target = rng.gen::<f64>() * total;
            let mut pick = cands[cands.len() - 1].0;
            for &(t, w) in &cands {
                if w > 0.0 && target < w {
                    pick = t;
                    break;
                }
                target -= w;
            }
            if pick != token {
                edits.push((pos, pick));
            }
        }
        if edits.len() > self.config.max_text_edits {
            let mut keep = index::sample(rng, edits.len(), self.config.max_text_edits).into_vec();
            keep.sort_unstable();
            edits = keep.into_iter().map(|i| edits[i]).collect();
        }
        let mut out = x.to_vec();
        for (pos, t) in edits {
            out[pos] = t;
        }
        out
    }
}

/// A perturbation distribution for one domain.
#[derive(Clone, Debug)]
pub enum Perturber {
    Tabular {
        cardinalities: Vec<usize>,
        config: PerturbationConfig,
    },
    Text(TextPerturber),
}

impl Perturber {
    pub fn tabular(cardinalities: Vec<usize>, config: PerturbationConfig) -> Result<Self, PerturbError> {
        config.validate()?;
        if cardinalities.iter().any(|&c| c < 2) {
            return Err(PerturbError::InvalidConfig("every feature needs at least two values".into()));
        }
        Ok(Perturber::Tabular { cardinalities, config })
    }

    pub fn sample<R: Rng + ?Sized>(&self, x: &[usize], rng: &mut R) -> Vec<usize> {
        match self {
            Perturber::Tabular { cardinalities, config } => perturb_tabular(x, cardinalities, config, rng),
            Perturber::Text(t) => t.perturb(x, rng),
        }
    }

    /// Whether position `j` of `x` can ever change under this distribution.
    pub fn can_change(&self, x: &[usize], j: usize) -> bool {
        match self {
            Perturber::Tabular { .. } => true,
            Perturber::Text(t) => t.is_editable(x[j]),
        }
    }
}

/// Draws up to [`SAMPLE_BUDGET`] perturbations of `x` and returns the first
/// one that differs from `x` and whose prediction differs from (`want_flip`)
/// or matches the prediction on `x`. Since draws are independent, this is a
/// uniform choice among the qualifying draws.
pub fn sample_counterfactual<C: Classifier + ?Sized, R: Rng + ?Sized>(
    x: &[usize],
    model: &C,
    perturber: &Perturber,
    want_flip: bool,
    rng: &mut R,
) -> Result<Vec<usize>, PerturbError> {
    let original = model.predict(x);
    for _ in 0..SAMPLE_BUDGET {
        let candidate = perturber.sample(x, rng);
        if candidate == x {
            continue;
        }
        if (model.predict(&candidate) != original) == want_flip {
            return Ok(candidate);
        }
    }
    Err(PerturbError::NoMatchingPerturbation { draws: SAMPLE_BUDGET })
}

/// p(x_j | x_-j): multinomial logistic regression on the one-hot encoding of
/// every other feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalImputer {
    feature: usize,
    cardinalities: Vec<usize>,
    /// Row per category of `feature`: input weights followed by a bias.
    weights: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputerFit {
    pub l2: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for ImputerFit {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            max_iterations: 500,
            tolerance: 1e-6,
        }
    }
}

impl ConditionalImputer {
    pub fn fit(data: &[Instance], cardinalities: &[usize], feature: usize) -> Result<Self, PerturbError> {
        Self::fit_with(data, cardinalities, feature, ImputerFit::default())
    }

    /// Full-batch gradient ascent with backtracking on the mean log-likelihood
    /// minus (l2/2)·||W||².
    pub fn fit_with(
        data: &[Instance],
        cardinalities: &[usize],
        feature: usize,
        fit: ImputerFit,
    ) -> Result<Self, PerturbError> {
        let k = cardinalities[feature];
        let observed: HashSet<usize> = data.iter().map(|x| x.features[feature]).collect();
        if observed.len() < 2 {
            return Err(PerturbError::DegenerateFeature { feature });
        }
        let mut imputer = Self {
            feature,
            cardinalities: cardinalities.to_vec(),
            weights: vec![vec![0.0; Self::width(cardinalities, feature) + 1]; k],
        };
        let inputs: Vec<Vec<usize>> = data.iter().map(|x| imputer.active(&x.features)).collect();
        let targets: Vec<usize> = data.iter().map(|x| x.features[feature]).collect();
        let n = data.len() as f64;

        let objective = |w: &[Vec<f64>]| -> f64 {
            let mut ll = 0.0;
            for (a, &y) in inputs.iter().zip(&targets) {
                let logits: Vec<f64> = w.iter().map(|row| a.iter().map(|&i| row[i]).sum()).collect();
                ll -= crate::nn::cross_entropy(&logits, y);
            }
            let sq: f64 = w.iter().flatten().map(|v| v * v).sum();
            ll / n - 0.5 * fit.l2 * sq
        };

        let mut step = 1.0;
        let mut current = objective(&imputer.weights);
        for _ in 0..fit.max_iterations {
            let mut grad: Vec<Vec<f64>> = imputer.weights.iter().map(|row| row.iter().map(|v| -fit.l2 * v).collect()).collect();
            for (a, &y) in inputs.iter().zip(&targets) {
                let logits: Vec<f64> = imputer.weights.iter().map(|row| a.iter().map(|&i| row[i]).sum()).collect();
                let p = crate::nn::softmax(&logits);
                for c in 0..k {
                    let r = (f64::from(u8::from(c == y)) - p[c]) / n;
                    for &i in a {
                        grad[c][i] += r;
                    }
                }
            }
            let norm_sq: f64 = grad.iter().flatten().map(|g| g * g).sum();
            if norm_sq.sqrt() < fit.tolerance {
                break;
            }
            loop {
                let trial: Vec<Vec<f64>> = imputer
                    .weights
                    .iter()
                    .zip(&grad)
                    .map(|(row, g)| row.iter().zip(g).map(|(w, g)| w + step * g).collect())
                    .collect();
                let value = objective(&trial);
                if value >= current + 0.5 * step * norm_sq {
                    imputer.weights = trial;
                    current = value;
                    step *= 2.0;
                    break;
                }
                step *= 0.5;
                if step < 1e-12 {
                    return Ok(imputer);
                }
            }
        }
        Ok(imputer)
    }

    /// An imputer with given weights: one row per category of `feature`,
    /// each the one-hot weights of the other features in order, then a bias.
    pub fn from_weights(feature: usize, cardinalities: Vec<usize>, weights: Vec<Vec<f64>>) -> Result<Self, PerturbError> {
        let k = *cardinalities
            .get(feature)
            .ok_or_else(|| PerturbError::InvalidConfig(format!("feature {feature} out of range")))?;
        let width = Self::width(&cardinalities, feature) + 1;
        if weights.len() != k || weights.iter().any(|row| row.len() != width) {
            return Err(PerturbError::InvalidConfig(format!(
                "imputer weights must be {k} rows of {width} values"
            )));
        }
        Ok(Self {
            feature,
            cardinalities,
            weights,
        })
    }

    fn width(cardinalities: &[usize], feature: usize) -> usize {
        cardinalities.iter().enumerate().filter(|&(j, _)| j != feature).map(|(_, c)| c).sum()
    }

    /// Indices of the active one-hot inputs for `x`, bias last.
    fn active(&self, x: &[usize]) -> Vec<usize> {
        let mut out = Vec::with_capacity(x.len());
        let mut offset = 0;
        for (j, (&c, &v)) in self.cardinalities.iter().zip(x).enumerate() {
            if j == self.feature {
                continue;
            }
            out.push(offset + v);
            offset += c;
        }
        out.push(offset);
        out
    }

    pub fn feature(&self) -> usize {
        self.feature
    }

    /// Distribution over the categories of the imputed feature given the
    /// other features of `x`; the value of `x` at that feature is ignored.
    pub fn predict(&self, x: &[usize]) -> Vec<f64> {
        let a = self.active(x);
        let logits: Vec<f64> = self.weights.iter().map(|row| a.iter().map(|&i| row[i]).sum()).collect();
        crate::nn::softmax(&logits)
    }
}

/// Fits one imputer per feature.
pub fn fit_imputers(data: &[Instance], cardinalities: &[usize], mode: Parallelism) -> Result<Vec<ConditionalImputer>, PerturbError> {
    par::map_indexed(mode, cardinalities.len(), |j| ConditionalImputer::fit(data, cardinalities, j))
        .into_iter()
        .collect()
}

/// The perturbation distribution matching a model's input encoding.
pub fn perturber_for(encoder: &Encoder, text: Option<&TextPerturber>, config: &PerturbationConfig) -> Result<Perturber, PerturbError> {
    match encoder {
        Encoder::OneHot { cardinalities } => Perturber::tabular(cardinalities.clone(), config.clone()),
        Encoder::Tokens { .. } => text
            .cloned()
            .map(Perturber::Text)
            .ok_or_else(|| PerturbError::InvalidConfig("text perturbation needs embedding neighbors".into())),
    }
}
