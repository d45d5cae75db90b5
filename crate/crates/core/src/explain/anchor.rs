//! Rule ("anchor") explanations found by beam search over feature predicates.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::ExplainError;
use crate::data::FeatureSpace;
use crate::models::Classifier;
use crate::par::{self, Parallelism};
use crate::perturb::Perturber;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    /// Required precision τ.
    pub threshold: f64,
    pub beam_width: usize,
    /// Perturbations drawn per precision estimate.
    pub samples: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            threshold: 0.95,
            beam_width: 2,
            samples: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub feature: usize,
    pub value: usize,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorExplanation {
    pub instance: Vec<usize>,
    pub prediction: usize,
    /// Conditions that all hold on the instance, by feature index.
    pub predicates: Vec<Predicate>,
    /// Precision re-estimated on fresh samples when the rule was accepted.
    pub precision: f64,
    pub samples: usize,
    /// False when even the rule pinning every changeable feature fell below
    /// the threshold and is returned anyway.
    pub verified: bool,
}

/// Fraction of perturbations of `x`, with the features in `rule` pinned back
/// to their values in `x`, that keep the prediction `target`.
pub fn rule_precision<C: Classifier + ?Sized>(
    model: &C,
    x: &[usize],
    target: usize,
    rule: &BTreeSet<usize>,
    perturber: &Perturber,
    samples: usize,
    seed: u64,
    mode: Parallelism,
) -> f64 {
    let hits = par::map_indexed(mode, samples, |i| {
        let mut z = perturber.sample(x, &mut seed::stream(seed, i as u64));
        for &j in rule {
            z[j] = x[j];
        }
        model.predict(&z) == target
    });
    hits.iter().filter(|&&h| h).count() as f64 / samples as f64
}

/// Bottom-up beam search from the empty rule. Each round extends every beam
/// rule by one more predicate, estimates precision under the perturbation
/// distribution, and accepts the best candidates whose estimate meets the
/// threshold once a fresh estimate confirms it.
pub fn explain_anchor<C: Classifier + ?Sized>(
    model: &C,
    x: &[usize],
    perturber: &Perturber,
    space: &FeatureSpace,
    config: &AnchorConfig,
    seed: u64,
    mode: Parallelism,
) -> Result<AnchorExplanation, ExplainError> {
    if !(config.threshold > 0.5 && config.threshold <= 1.0) {
        return Err(ExplainError::InvalidConfig("anchor threshold must lie in (0.5, 1]".into()));
    }
    if config.beam_width == 0 || config.samples == 0 {
        return Err(ExplainError::InvalidConfig("beam width and samples must be positive".into()));
    }
    let target = model.predict(x);
    let estimate = |rule: &BTreeSet<usize>, label: &str| {
        let s = seed::derive(seed, &format!("{label}{rule:?}"));
        rule_precision(model, x, target, rule, perturber, config.samples, s, mode)
    };
    let finish = |rule: &BTreeSet<usize>, precision: f64, verified: bool| AnchorExplanation {
        instance: x.to_vec(),
        prediction: target,
        predicates: rule
            .iter()
            .map(|&j| Predicate {
                feature: j,
                value: x[j],
                label: space.describe(j, x[j]),
            })
            .collect(),
        precision,
        samples: config.samples,
        verified,
    };

    let free: Vec<usize> = (0..x.len()).filter(|&j| perturber.can_change(x, j)).collect();
    let empty = BTreeSet::new();
    if estimate(&empty, "estimate") >= config.threshold {
        let fresh = estimate(&empty, "validate");
        if fresh >= config.threshold {
            return Ok(finish(&empty, fresh, true));
        }
    }
    let mut beam = vec![empty];
    for _ in 0..free.len() {
        let candidates: BTreeSet<BTreeSet<usize>> = beam
            .iter()
            .flat_map(|rule| {
                free.iter().filter(|j| !rule.contains(j)).map(move |&j| {
                    let mut r = rule.clone();
                    r.insert(j);
                    r
                })
            })
            .collect();
        let mut scored: Vec<(BTreeSet<usize>, f64)> =
            candidates.into_iter().map(|r| (r.clone(), estimate(&r, "estimate"))).collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for (rule, p) in &scored {
            if *p < config.threshold {
                break;
            }
            let fresh = estimate(rule, "validate");
            if fresh >= config.threshold {
                return Ok(finish(rule, fresh, true));
            }
        }
        beam = scored.into_iter().take(config.beam_width).map(|(r, _)| r).collect();
    }
    let full: BTreeSet<usize> = free.into_iter().collect();
    let fresh = estimate(&full, "validate");
    Ok(finish(&full, fresh, fresh >= config.threshold))
}
