//! Local linear surrogate explanations.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ExplainError;
use crate::data::{FeatureSpace, Instance, PADDING};
use crate::models::Classifier;
use crate::par::{self, Parallelism};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimeConfig {
    pub samples: usize,
    pub max_features: usize,
    /// Kernel width is this factor times sqrt(number of features).
    pub kernel_width_factor: f64,
    /// Tabular only: chance that a feature keeps its value in a sample.
    pub keep_probability: f64,
}

impl Default for LimeConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            max_features: 5,
            kernel_width_factor: 0.75,
            keep_probability: 0.5,
        }
    }
}

/// How neighborhood samples are drawn in the interpretable space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LimeSpace {
    /// Mask a uniformly chosen number of token positions to padding.
    Text,
    /// Resample features from their training marginals.
    Tabular { marginals: Vec<Vec<f64>> },
}

impl LimeSpace {
    pub fn tabular(train: &[Instance], cardinalities: &[usize]) -> Self {
        let mut counts: Vec<Vec<f64>> = cardinalities.iter().map(|&c| vec![0.0; c]).collect();
        for x in train {
            for (j, &v) in x.features.iter().enumerate() {
                counts[j][v] += 1.0;
            }
        }
        for row in &mut counts {
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter_mut().for_each(|c| *c /= total);
            } else {
                let n = row.len() as f64;
                row.iter_mut().for_each(|c| *c = 1.0 / n);
            }
        }
        LimeSpace::Tabular { marginals: counts }
    }

    /// One neighborhood sample and its binary representation (1 = as in `x`).
    fn sample<R: Rng + ?Sized>(&self, x: &[usize], keep: f64, rng: &mut R) -> (Vec<usize>, Vec<f64>) {
        let d = x.len();
        match self {
            LimeSpace::Text => {
                let k = rng.gen_range(1..=d);
                let mut z = x.to_vec();
                let mut b = vec![1.0; d];
                for pos in index::sample(rng, d, k) {
                    z[pos] = PADDING;
                    b[pos] = 0.0;
                }
                (z, b)
            }
            LimeSpace::Tabular { marginals } => {
                let mut z = x.to_vec();
                for (j, m) in marginals.iter().enumerate() {
                    if rng.gen::<f64>() < keep {
                        continue;
                    }
                    let mut u = rng.gen::<f64>();
                    let mut v = m.len() - 1;
                    for (c, p) in m.iter().enumerate() {
                        if u < *p {
                            v = c;
                            break;
                        }
                        u -= p;
                    }
                    z[j] = v;
                }
                let b = z.iter().zip(x).map(|(a, b)| f64::from(u8::from(a == b))).collect();
                (z, b)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimeFeature {
    pub feature: usize,
    pub label: String,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimeExplanation {
    pub instance: Vec<usize>,
    /// Selected features, largest |weight| first.
    pub features: Vec<LimeFeature>,
    pub intercept: f64,
    /// Intercept plus every selected weight: the surrogate's value at the instance.
    pub weight_sum: f64,
    /// Positive-class probability the model assigns to the instance.
    pub predicted: f64,
    /// Weighted R² of the surrogate on its neighborhood.
    pub r_squared: f64,
    pub samples: usize,
    /// Every sampled output was identical, so only an intercept was fitted.
    pub degenerate: bool,
}

/// Weighted least squares on centered data; returns (coefficients, intercept, weighted SSE).
fn fit(cols: &[usize], b: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>) -> (Vec<f64>, f64, f64) {
    let total: f64 = w.sum();
    let k = cols.len();
    let mean_y = w.dot(y) / total;
    let means: Vec<f64> = cols.iter().map(|&j| w.dot(&b.column(j)) / total).collect();
    let mut a = DMatrix::<f64>::zeros(k, k);
    let mut c = DVector::<f64>::zeros(k);
    for i in 0..b.nrows() {
        let wi = w[i];
        if wi == 0.0 {
            continue;
        }
        let yc = y[i] - mean_y;
        for (p, &jp) in cols.iter().enumerate() {
            let xp = b[(i, jp)] - means[p];
            c[p] += wi * xp * yc;
            for (q, &jq) in cols.iter().enumerate().take(p + 1) {
                a[(p, q)] += wi * xp * (b[(i, jq)] - means[q]);
            }
        }
    }
    for p in 0..k {
        for q in 0..p {
            a[(q, p)] = a[(p, q)];
        }
        a[(p, p)] += 1e-9 * total;
    }
    let beta = a.cholesky().map(|ch| ch.solve(&c)).unwrap_or_else(|| DVector::zeros(k));
    let intercept = mean_y - beta.iter().zip(&means).map(|(b, m)| b * m).sum::<f64>();
    let mut sse = 0.0;
    for i in 0..b.nrows() {
        let pred = intercept + cols.iter().zip(beta.iter()).map(|(&j, bj)| bj * b[(i, j)]).sum::<f64>();
        sse += w[i] * (y[i] - pred).powi(2);
    }
    (beta.iter().copied().collect(), intercept, sse)
}

/// Fits a sparse weighted linear model to the positive-class probability on
/// a neighborhood of `x`. The first sample is `x` itself; sample weights are
/// exp(-D²/σ²) where D counts features differing from `x` in the binary
/// representation. Features are added by forward selection.
pub fn explain_lime<C: Classifier + ?Sized>(
    model: &C,
    x: &[usize],
    space: &LimeSpace,
    features: &FeatureSpace,
    config: &LimeConfig,
    seed: u64,
    mode: Parallelism,
) -> Result<LimeExplanation, ExplainError> {
    if config.samples < 100 {
        return Err(ExplainError::InvalidConfig("LIME needs at least 100 samples".into()));
    }
    let d = x.len();
    if d == 0 {
        return Err(ExplainError::InvalidConfig("cannot explain an empty instance".into()));
    }
    let n = config.samples;
    let rows = par::map_indexed(mode, n, |i| {
        let (z, b) = if i == 0 {
            (x.to_vec(), vec![1.0; d])
        } else {
            space.sample(x, config.keep_probability, &mut seed::stream(seed, i as u64))
        };
        (b, model.probability(&z))
    });
    let predicted = rows[0].1;
    let sigma = config.kernel_width_factor * (d as f64).sqrt();
    let b = DMatrix::from_fn(n, d, |i, j| rows[i].0[j]);
    let y = DVector::from_iterator(n, rows.iter().map(|r| r.1));
    let w = DVector::from_iterator(
        n,
        rows.iter().map(|(bits, _)| {
            let dist = d as f64 - bits.iter().sum::<f64>();
            (-(dist * dist) / (sigma * sigma)).exp()
        }),
    );

    let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi - lo <= 1e-12 {
        return Ok(LimeExplanation {
            instance: x.to_vec(),
            features: Vec::new(),
            intercept: predicted,
            weight_sum: predicted,
            predicted,
            r_squared: 0.0,
            samples: n,
            degenerate: true,
        });
    }

    let mut selected: Vec<usize> = Vec::new();
    for _ in 0..config.max_features.min(d) {
        let mut best: Option<(usize, f64)> = None;
        for j in (0..d).filter(|j| !selected.contains(j)) {
            let mut cols = selected.clone();
            cols.push(j);
            let (_, _, sse) = fit(&cols, &b, &y, &w);
            if best.is_none_or(|(_, s)| sse < s) {
                best = Some((j, sse));
            }
        }
        selected.push(best.expect("a remaining feature").0);
    }
    let (beta, intercept, sse) = fit(&selected, &b, &y, &w);
    let total = w.sum();
    let mean_y = w.dot(&y) / total;
    let sst: f64 = y.iter().zip(w.iter()).map(|(v, wi)| wi * (v - mean_y).powi(2)).sum();
    let r_squared = if sst > 0.0 { 1.0 - sse / sst } else { 0.0 };

    let mut feats: Vec<LimeFeature> = selected
        .iter()
        .zip(&beta)
        .map(|(&j, &weight)| LimeFeature {
            feature: j,
            label: features.describe(j, x[j]),
            weight,
        })
        .collect();
    feats.sort_by(|a, b| b.weight.abs().total_cmp(&a.weight.abs()).then(a.feature.cmp(&b.feature)));
    Ok(LimeExplanation {
        instance: x.to_vec(),
        weight_sum: intercept + beta.iter().sum::<f64>(),
        features: feats,
        intercept,
        predicted,
        r_squared,
        samples: n,
        degenerate: false,
    })
}
