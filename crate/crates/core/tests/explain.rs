mod common;

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simbench_core::data::{Domain, Feature, FeatureSpace, TabularSchema};
use simbench_core::explain::{
    build_path, draw_samples, explain_anchor, explain_lime, find_counterfactual, render, rule_precision, AnchorConfig,
    ExplainError, Explanation, LimeConfig, LimeSpace, Method, DISPLAYED_STEPS,
};
use simbench_core::models::{Classifier, LatentClassifier};
use simbench_core::par::Parallelism;
use simbench_core::perturb::{PerturbationConfig, Perturber};
use simbench_core::seed;

const SEQ: Parallelism = Parallelism::Sequential;

fn space(cards: &[usize]) -> FeatureSpace {
    FeatureSpace::Tabular(
        TabularSchema::new(
            cards
                .iter()
                .enumerate()
                .map(|(i, &c)| Feature {
                    name: format!("f{i}"),
                    values: (0..c).map(|v| format!("v{v}")).collect(),
                })
                .collect(),
        )
        .unwrap(),
    )
}

fn uniform(cards: &[usize]) -> LimeSpace {
    LimeSpace::Tabular {
        marginals: cards.iter().map(|&c| vec![1.0 / c as f64; c]).collect(),
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// P(positive) = σ(bias + Σ β_j·[z_j = anchor_j]).
struct Logistic {
    anchor: Vec<usize>,
    beta: Vec<f64>,
    bias: f64,
}

impl Classifier for Logistic {
    fn scores(&self, z: &[usize]) -> [f64; 2] {
        let eta: f64 = self.bias
            + z.iter()
                .zip(&self.anchor)
                .zip(&self.beta)
                .map(|((a, b), w)| if a == b { *w } else { 0.0 })
                .sum::<f64>();
        [0.0, eta]
    }
}

/// P(positive) is exactly linear in the binary representation around `anchor`.
struct Linear {
    anchor: Vec<usize>,
    coef: Vec<f64>,
    base: f64,
}

impl Classifier for Linear {
    fn scores(&self, z: &[usize]) -> [f64; 2] {
        let p: f64 = self.base
            + z.iter()
                .zip(&self.anchor)
                .zip(&self.coef)
                .map(|((a, b), c)| if a == b { *c } else { 0.0 })
                .sum::<f64>();
        [0.0, logit(p)]
    }
}

struct Constant;

impl Classifier for Constant {
    fn scores(&self, _: &[usize]) -> [f64; 2] {
        [0.3, 0.7]
    }
}

#[test]
fn lime_recovers_logistic_coefficient_ranking() {
    let cards = vec![3, 4, 3, 5, 4, 3, 4, 3];
    let beta: [f64; 8] = [-0.9, 2.4, 0.15, -1.8, 0.6, -0.05, 1.2, 0.3];
    let mut truth: Vec<usize> = (0..beta.len()).collect();
    truth.sort_by(|&a, &b| beta[b].abs().total_cmp(&beta[a].abs()));
    let top = &truth[..5];
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut hits = 0;
    for run in 0..100 {
        let x: Vec<usize> = cards.iter().map(|&c| rng.gen_range(0..c)).collect();
        let model = Logistic {
            anchor: x.clone(),
            beta: beta.to_vec(),
            bias: -beta.iter().sum::<f64>() / 2.0,
        };
        let e = explain_lime(&model, &x, &uniform(&cards), &space(&cards), &LimeConfig::default(), run, SEQ).unwrap();
        let got: Vec<usize> = e.features.iter().map(|f| f.feature).collect();
        if got == top {
            hits += 1;
        }
        for f in &e.features {
            assert_eq!(f.weight.signum(), beta[f.feature].signum());
        }
    }
    assert!(hits >= 90, "ranking recovered in {hits}/100 runs");
}

#[test]
fn lime_is_exact_on_a_linear_blackbox() {
    let cards = [3, 4, 2, 5];
    let x = vec![2, 0, 1, 3];
    let model = Linear {
        anchor: x.clone(),
        coef: vec![0.2, -0.15, 0.05, 0.3],
        base: 0.3,
    };
    let e = explain_lime(&model, &x, &uniform(&cards), &space(&cards), &LimeConfig::default(), 4, SEQ).unwrap();
    assert!(!e.degenerate);
    assert!((e.intercept - 0.3).abs() < 1e-6);
    for f in &e.features {
        assert!((f.weight - model.coef[f.feature]).abs() < 1e-6, "{f:?}");
    }
    assert!((e.predicted - 0.7).abs() < 1e-12);
    assert!((e.weight_sum - e.predicted).abs() < 1e-6);
    assert!((e.r_squared - 1.0).abs() < 1e-9);
    let order: Vec<usize> = e.features.iter().map(|f| f.feature).collect();
    assert_eq!(order, vec![3, 0, 1, 2]);
}

#[test]
fn lime_on_a_constant_blackbox_has_zero_weights() {
    let cards = [3, 3, 3];
    let x = [0, 1, 2];
    let e = explain_lime(&Constant, &x, &uniform(&cards), &space(&cards), &LimeConfig::default(), 0, SEQ).unwrap();
    assert!(e.degenerate);
    assert!(e.features.iter().all(|f| f.weight == 0.0));
    assert_eq!(e.intercept, e.predicted);
    assert_eq!(e.weight_sum, e.predicted);
}

#[test]
fn lime_config_errors() {
    let cards = [3];
    let small = LimeConfig { samples: 10, ..Default::default() };
    assert!(matches!(
        explain_lime(&Constant, &[0], &uniform(&cards), &space(&cards), &small, 0, SEQ),
        Err(ExplainError::InvalidConfig(_))
    ));
}

#[test]
fn fixture_lime_explanations_are_consistent() {
    for domain in [Domain::Tabular, Domain::Text] {
        let wb = common::workbench(domain);
        let ex = wb.explainers();
        for &i in wb.data.split.test.iter().take(10) {
            let x = &wb.data.instances[i].features;
            let e = ex.lime(x, 7).unwrap();
            assert!(e.features.len() <= 5.min(x.len()));
            let sum: f64 = e.intercept + e.features.iter().map(|f| f.weight).sum::<f64>();
            assert!((sum - e.weight_sum).abs() < 1e-12);
            assert_eq!(e.predicted, wb.task.probability(x));
            assert!(e.features.windows(2).all(|w| w[0].weight.abs() >= w[1].weight.abs()));
            assert_eq!(e, ex.lime(x, 7).unwrap());
        }
    }
}

#[test]
fn lime_is_the_same_in_both_modes() {
    let wb = common::workbench(Domain::Tabular);
    let x = &wb.data.instances[wb.data.split.test[0]].features;
    let args = |mode| explain_lime(&wb.task, x, &wb.lime_space, &wb.data.space, &LimeConfig::default(), 9, mode).unwrap();
    assert_eq!(args(Parallelism::Sequential), args(Parallelism::Parallel));
}

/// Positive iff feature `key` keeps its value from `anchor`.
struct Depends {
    anchor: Vec<usize>,
    key: usize,
}

impl Classifier for Depends {
    fn scores(&self, z: &[usize]) -> [f64; 2] {
        if z[self.key] == self.anchor[self.key] {
            [0.0, 1.0]
        } else {
            [1.0, 0.0]
        }
    }
}

#[test]
fn anchor_finds_the_single_dependence() {
    let cards = vec![3, 4, 3, 5, 2];
    let x = vec![1, 2, 0, 4, 1];
    let p = Perturber::tabular(cards.clone(), PerturbationConfig::default()).unwrap();
    for key in 0..5 {
        let model = Depends { anchor: x.clone(), key };
        let e = explain_anchor(&model, &x, &p, &space(&cards), &AnchorConfig::default(), 2, SEQ).unwrap();
        assert!(e.verified);
        assert_eq!(e.prediction, 1);
        assert_eq!(e.predicates.len(), 1);
        assert_eq!(e.predicates[0].feature, key);
        assert_eq!(e.predicates[0].value, x[key]);
        assert_eq!(e.precision, 1.0);
    }
    let e = explain_anchor(&Constant, &x, &p, &space(&cards), &AnchorConfig::default(), 2, SEQ).unwrap();
    assert!(e.predicates.is_empty() && e.verified);
}

#[test]
fn pinning_every_feature_gives_full_precision() {
    let wb = common::workbench(Domain::Tabular);
    let x = &wb.data.instances[0].features;
    let all: BTreeSet<usize> = (0..x.len()).collect();
    let target = wb.task.predict(x);
    assert_eq!(rule_precision(&wb.task, x, target, &all, &wb.perturber, 500, 1, SEQ), 1.0);
}

#[test]
fn anchor_config_errors() {
    let p = Perturber::tabular(vec![2], PerturbationConfig::default()).unwrap();
    for config in [
        AnchorConfig { threshold: 0.4, ..Default::default() },
        AnchorConfig { beam_width: 0, ..Default::default() },
        AnchorConfig { samples: 0, ..Default::default() },
    ] {
        assert!(explain_anchor(&Constant, &[0], &p, &space(&[2]), &config, 0, SEQ).is_err());
    }
}

#[test]
fn accepted_anchors_hold_on_fresh_samples() {
    let mut sound = 0;
    let mut accepted = 0;
    for domain in [Domain::Tabular, Domain::Text] {
        let wb = common::workbench(domain);
        let ex = wb.explainers();
        for &i in wb.data.split.test.iter().take(10) {
            let x = &wb.data.instances[i].features;
            let e = ex.anchor(x, 5).unwrap();
            assert_eq!(e.prediction, wb.task.predict(x));
            assert!(e.predicates.iter().all(|p| x[p.feature] == p.value));
            if !e.verified {
                continue;
            }
            accepted += 1;
            let rule: BTreeSet<usize> = e.predicates.iter().map(|p| p.feature).collect();
            let fresh = rule_precision(&wb.task, x, e.prediction, &rule, &wb.perturber, 10_000, 0xfeed + i as u64, wb.mode);
            if fresh >= wb.config.anchor.threshold - 0.05 {
                sound += 1;
            }
        }
    }
    assert!(accepted >= 15, "only {accepted} anchors were accepted");
    assert!(sound * 100 >= accepted * 95, "{sound}/{accepted} anchors held up");
}

/// Margin grows by one per feature matching `target`; positive once six match.
struct Counting {
    target: Vec<usize>,
    weights: Vec<f64>,
}

impl Classifier for Counting {
    fn scores(&self, z: &[usize]) -> [f64; 2] {
        let m: f64 = z
            .iter()
            .zip(&self.target)
            .zip(&self.weights)
            .map(|((a, b), w)| if a == b { *w } else { 0.0 })
            .sum();
        [0.0, m - 5.5]
    }
}

#[test]
fn long_paths_show_only_the_last_steps() {
    let cards = vec![2; 6];
    let x = vec![0; 6];
    let target = vec![1; 6];
    let model = Counting {
        target: target.clone(),
        weights: vec![1.0, 0.9, 1.2, 0.95, 1.1, 1.05],
    };
    let e = build_path(&model, &x, &target, &space(&cards));
    assert_eq!(e.steps.len(), 6);
    assert_eq!(e.displayed().len(), DISPLAYED_STEPS);
    assert_eq!(e.displayed(), &e.steps[2..]);
    let order: Vec<usize> = e.steps.iter().map(|s| s.edit.feature).collect();
    assert_eq!(order, vec![1, 3, 0, 5, 4, 2]);
    assert!(e.steps[..5].iter().all(|s| s.prediction == 0));
    assert_eq!(e.steps[5].prediction, 1);
    assert_eq!(e.counterfactual, target);
    let b = e.bundle();
    assert_eq!(b.edits.len(), 6);
    assert_eq!(b.prediction, 1);
    assert!(render(&Explanation::DecisionBoundary(e)).contains("2 earlier steps"));
}

fn edits(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[test]
fn boundary_explanations_are_valid_and_minimal() {
    for domain in [Domain::Tabular, Domain::Text] {
        let wb = common::workbench(domain);
        let ex = wb.explainers();
        let n = wb.config.boundary_samples;
        let mut checked = 0;
        for &i in wb.data.split.test.iter().take(12) {
            let x = &wb.data.instances[i].features;
            let s = seed::derive(100 + i as u64, "boundary");
            let cf = match find_counterfactual(&wb.task, x, &wb.perturber, n, s, wb.mode) {
                Ok(cf) => cf,
                Err(ExplainError::NoCounterfactualFound) => continue,
                Err(e) => panic!("{e}"),
            };
            checked += 1;
            let original = wb.task.predict(x);
            let samples = draw_samples(&wb.perturber, x, n, s, SEQ);
            assert_eq!(samples[cf.sample_index], cf.instance);
            let flipped: Vec<&Vec<usize>> = samples.iter().filter(|z| wb.task.predict(z) != original).collect();
            let fewest = flipped.iter().map(|z| edits(z, x)).min().unwrap();
            assert_eq!(edits(&cf.instance, x), fewest);
            let zx = wb.task.latent(x);
            let closest = flipped
                .iter()
                .filter(|z| edits(z, x) == fewest)
                .map(|z| sq(&wb.task.latent(z), &zx))
                .fold(f64::INFINITY, f64::min);
            assert_eq!(sq(&wb.task.latent(&cf.instance), &zx), closest);

            let e = ex.boundary(x, 100 + i as u64).unwrap();
            assert_eq!(e.original_prediction, original);
            let mut current = x.clone();
            let mut margin = e.original_margin;
            for (k, step) in e.steps.iter().enumerate() {
                let remaining: Vec<usize> = (0..x.len()).filter(|&j| current[j] != cf.instance[j]).collect();
                let best = remaining
                    .iter()
                    .map(|&j| {
                        let mut c = current.clone();
                        c[j] = cf.instance[j];
                        (j, (wb.task.margin(&c) - margin).abs())
                    })
                    .fold((usize::MAX, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
                assert_eq!(step.edit.feature, best.0);
                let before = current.clone();
                current[step.edit.feature] = step.edit.to;
                assert_eq!(edits(&before, &current), 1);
                margin = wb.task.margin(&current);
                assert_eq!(step.margin, margin);
                assert_eq!(step.prediction, wb.task.predict(&current));
                let last = k + 1 == e.steps.len();
                assert_eq!(step.prediction != original, last, "flip must happen exactly at the last step");
            }
            assert_eq!(current, e.counterfactual);
        }
        assert!(checked >= 6, "{domain}: only {checked} instances had a counterfactual");
    }
}

#[test]
fn constant_model_has_no_counterfactual() {
    let p = Perturber::tabular(vec![3, 3], PerturbationConfig::default()).unwrap();
    struct Flat;
    impl Classifier for Flat {
        fn scores(&self, _: &[usize]) -> [f64; 2] {
            [1.0, 0.0]
        }
    }
    impl LatentClassifier for Flat {
        fn latent(&self, x: &[usize]) -> Vec<f64> {
            x.iter().map(|&v| v as f64).collect()
        }
    }
    assert!(matches!(
        find_counterfactual(&Flat, &[0, 1], &p, 500, 0, SEQ),
        Err(ExplainError::NoCounterfactualFound)
    ));
}

#[test]
fn composite_contains_the_individual_explanations() {
    for domain in [Domain::Tabular, Domain::Text] {
        let wb = common::workbench(domain);
        let ex = wb.explainers();
        for &i in wb.data.split.test.iter().take(4) {
            let x = &wb.data.instances[i].features;
            let c = match ex.composite(x, 11) {
                Ok(c) => c,
                Err(ExplainError::Component { method: Method::DecisionBoundary, .. }) => continue,
                Err(e) => panic!("{e}"),
            };
            assert_eq!(c.lime, ex.lime(x, 11).unwrap());
            assert_eq!(c.anchor, ex.anchor(x, 11).unwrap());
            assert_eq!(c.boundary, ex.boundary(x, 11).unwrap().bundle());
            let proto = simbench_core::models::render_prototype_explanation(
                &wb.prototype_frozen,
                x,
                &wb.train,
                &wb.data.space,
                &wb.imputers,
            )
            .unwrap();
            assert_eq!(c.prototype, proto);
            assert_eq!(c.prediction, wb.task.predict(x));
            match ex.explain(Method::Composite, x, 11).unwrap() {
                Explanation::Composite(again) => assert_eq!(again, c),
                other => panic!("wrong method {:?}", other.method()),
            }
        }
    }
}

#[test]
fn explanations_serialize_with_a_method_tag() {
    let wb = common::workbench(Domain::Tabular);
    let ex = wb.explainers();
    let x = &wb.data.instances[wb.data.split.test[1]].features;
    for method in [Method::Lime, Method::Prototype] {
        let e = ex.explain(method, x, 1).unwrap();
        let json = serde_json::to_value(&e).unwrap();
        assert_eq!(json["method"], method.as_str());
        let back: Explanation = serde_json::from_value(json).unwrap();
        assert_eq!(back, e);
        assert!(!render(&e).is_empty());
    }
    for m in Method::ALL {
        assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
    }
    assert!("nope".parse::<Method>().is_err());
}
