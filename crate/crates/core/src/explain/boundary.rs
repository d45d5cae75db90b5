//! Decision-boundary explanations: a nearby input with the opposite
//! prediction and a one-edit-at-a-time path to it.

use serde::{Deserialize, Serialize};

use super::ExplainError;
use crate::data::FeatureSpace;
use crate::models::{Classifier, LatentClassifier};
use crate::par::{self, Parallelism};
use crate::perturb::Perturber;
use crate::seed;

/// Path steps shown to users; longer paths show only their tail.
pub const DISPLAYED_STEPS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Counterfactual {
    pub instance: Vec<usize>,
    /// Position of the chosen perturbation in the sample set.
    pub sample_index: usize,
    pub distance: f64,
}

/// The perturbation set searched by [`find_counterfactual`].
pub fn draw_samples(perturber: &Perturber, x: &[usize], n: usize, seed: u64, mode: Parallelism) -> Vec<Vec<usize>> {
    par::map_indexed(mode, n, |i| perturber.sample(x, &mut seed::stream(seed, i as u64)))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Among `n` perturbations with a flipped prediction, the one minimizing
/// (features changed) + ||g(x) - g(x')||² / (1 + largest such latent
/// distance over the flipped set), so latent distance only breaks ties.
/// Remaining ties go to the earliest sample.
pub fn find_counterfactual<C: LatentClassifier + ?Sized>(
    model: &C,
    x: &[usize],
    perturber: &Perturber,
    n: usize,
    seed: u64,
    mode: Parallelism,
) -> Result<Counterfactual, ExplainError> {
    let samples = draw_samples(perturber, x, n, seed, mode);
    let original = model.predict(x);
    let zx = model.latent(x);
    let evals: Vec<Option<(usize, f64)>> = par::map_slice(mode, &samples, |s| {
        if model.predict(s) == original {
            return None;
        }
        let edits = s.iter().zip(x).filter(|(a, b)| a != b).count();
        Some((edits, sq_dist(&model.latent(s), &zx)))
    });
    let max_latent = evals.iter().flatten().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
    if max_latent == f64::NEG_INFINITY {
        return Err(ExplainError::NoCounterfactualFound);
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, e) in evals.iter().enumerate() {
        if let Some((edits, lat)) = e {
            let d = *edits as f64 + lat / (1.0 + max_latent);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
    }
    let (i, distance) = best.expect("non-empty flipped set");
    Ok(Counterfactual {
        instance: samples[i].clone(),
        sample_index: i,
        distance,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edit {
    pub feature: usize,
    pub from: usize,
    pub to: usize,
    pub from_label: String,
    pub to_label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathStep {
    #[serde(flatten)]
    pub edit: Edit,
    /// Evidence margin after this edit.
    pub margin: f64,
    pub prediction: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryExplanation {
    pub instance: Vec<usize>,
    pub original_margin: f64,
    pub original_prediction: usize,
    /// The full path; only the last [`DISPLAYED_STEPS`] are shown.
    pub steps: Vec<PathStep>,
    pub counterfactual: Vec<usize>,
}

/// All edits of a boundary path applied at once.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryBundle {
    pub instance: Vec<usize>,
    pub original_margin: f64,
    pub original_prediction: usize,
    pub edits: Vec<Edit>,
    pub margin: f64,
    pub prediction: usize,
    pub counterfactual: Vec<usize>,
}

impl BoundaryExplanation {
    pub fn displayed(&self) -> &[PathStep] {
        &self.steps[self.steps.len().saturating_sub(DISPLAYED_STEPS)..]
    }

    pub fn bundle(&self) -> BoundaryBundle {
        let last = self.steps.last();
        BoundaryBundle {
            instance: self.instance.clone(),
            original_margin: self.original_margin,
            original_prediction: self.original_prediction,
            edits: self.steps.iter().map(|s| s.edit.clone()).collect(),
            margin: last.map_or(self.original_margin, |s| s.margin),
            prediction: last.map_or(self.original_prediction, |s| s.prediction),
            counterfactual: self.counterfactual.clone(),
        }
    }
}

/// Applies the edits turning `x` into `target` one at a time, each time
/// choosing the remaining edit that changes the evidence margin least in
/// absolute value (lower feature index on ties). The path ends at the first
/// input whose prediction differs from that of `x`.
pub fn build_path<C: Classifier + ?Sized>(
    model: &C,
    x: &[usize],
    target: &[usize],
    space: &FeatureSpace,
) -> BoundaryExplanation {
    let original_prediction = model.predict(x);
    let original_margin = model.margin(x);
    let mut remaining: Vec<usize> = (0..x.len()).filter(|&j| x[j] != target[j]).collect();
    let mut current = x.to_vec();
    let mut margin = original_margin;
    let mut steps = Vec::with_capacity(remaining.len());
    while !remaining.is_empty() {
        let mut best: Option<(usize, f64, f64)> = None;
        for (r, &j) in remaining.iter().enumerate() {
            let mut candidate = current.clone();
            candidate[j] = target[j];
            let m = model.margin(&candidate);
            let change = (m - margin).abs();
            if best.is_none_or(|(_, c, _)| change < c) {
                best = Some((r, change, m));
            }
        }
        let (r, _, m) = best.expect("remaining edits");
        let j = remaining.remove(r);
        current[j] = target[j];
        margin = m;
        let prediction = model.predict(&current);
        steps.push(PathStep {
            edit: Edit {
                feature: j,
                from: x[j],
                to: target[j],
                from_label: space.describe(j, x[j]),
                to_label: space.describe(j, target[j]),
            },
            margin,
            prediction,
        });
        if prediction != original_prediction {
            break;
        }
    }
    BoundaryExplanation {
        instance: x.to_vec(),
        original_margin,
        original_prediction,
        steps,
        counterfactual: current,
    }
}
