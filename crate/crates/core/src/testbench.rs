//! Forward and counterfactual simulation test sessions.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DatasetSplit, Domain, Instance};
use crate::explain::{ExplainError, Explainers, Explanation, Method};
use crate::models::Classifier;
use crate::par;
use crate::perturb::{sample_counterfactual, PerturbError};
use crate::seed;

pub const DEFAULT_LEARNING_ITEMS: usize = 16;
pub const DEFAULT_PREDICTION_ITEMS: usize = 32;
/// Replacement originals tried per quadrant when counterfactual sampling fails.
pub const MAX_QUADRANT_RETRIES: usize = 20;

#[derive(Debug, Error)]
pub enum TestbenchError {
    #[error("session size {0} must be a positive multiple of 4")]
    InvalidSize(usize),
    #[error("{split} split has {have} {quadrant} instances, {need} needed")]
    InsufficientQuadrant {
        quadrant: Quadrant,
        split: &'static str,
        have: usize,
        need: usize,
    },
    #[error("no counterfactual for {quadrant} items after {retries} replacements (last item {item}): {source}")]
    NoMatchingPerturbation {
        quadrant: Quadrant,
        item: String,
        retries: usize,
        #[source]
        source: PerturbError,
    },
    #[error("explaining item {item}: {source}")]
    Explain {
        item: String,
        #[source]
        source: ExplainError,
    },
    #[error("response for unknown item {item} in phase {phase}")]
    UnknownItem { item: String, phase: PhaseKind },
    #[error("duplicate response for item {item} in phase {phase}")]
    DuplicateResponse { item: String, phase: PhaseKind },
}

/// Cell of the confusion matrix with class 1 as positive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Quadrant {
    TP,
    FP,
    TN,
    FN,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant::TP, Quadrant::FP, Quadrant::TN, Quadrant::FN];

    pub fn of(gold: usize, prediction: usize) -> Self {
        match (prediction == 1, gold == prediction) {
            (true, true) => Quadrant::TP,
            (true, false) => Quadrant::FP,
            (false, true) => Quadrant::TN,
            (false, false) => Quadrant::FN,
        }
    }
}

impl fmt::Display for Quadrant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    Forward,
    Counterfactual,
}

impl fmt::Display for TestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TestKind::Forward => "forward",
            TestKind::Counterfactual => "counterfactual",
        })
    }
}

impl FromStr for TestKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "forward" => Ok(TestKind::Forward),
            "counterfactual" => Ok(TestKind::Counterfactual),
            other => Err(format!("unknown test kind {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    Learn,
    Pre,
    LearnExplain,
    Post,
}

impl fmt::Display for PhaseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhaseKind::Learn => "learn",
            PhaseKind::Pre => "pre",
            PhaseKind::LearnExplain => "learn_explain",
            PhaseKind::Post => "post",
        })
    }
}

/// What a test-taker submits for each item of a phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMode {
    /// Nothing; the phase is only read.
    None,
    Prediction,
    /// A Likert rating of the shown explanation.
    Rating,
    /// A prediction, optionally with a rating.
    PredictionAndRating,
}

impl AnswerMode {
    pub fn takes_prediction(self) -> bool {
        matches!(self, AnswerMode::Prediction | AnswerMode::PredictionAndRating)
    }

    pub fn allows_rating(self) -> bool {
        matches!(self, AnswerMode::Rating | AnswerMode::PredictionAndRating)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub kind: PhaseKind,
    pub items: Vec<String>,
    pub answers: AnswerMode,
    pub show_gold: bool,
    pub show_prediction: bool,
    pub show_explanation: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualInput {
    pub instance: Vec<usize>,
    pub text: String,
    /// Model prediction on the perturbation, fixed at generation time.
    pub prediction: usize,
    pub flipped: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ItemKind {
    ForwardLearning,
    ForwardPredict,
    Counterfactual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestItem {
    pub id: String,
    pub kind: ItemKind,
    pub instance: Vec<usize>,
    pub text: String,
    pub gold: usize,
    pub prediction: usize,
    pub quadrant: Quadrant,
    pub counterfactual: Option<CounterfactualInput>,
    /// Explains `instance` (never the perturbation).
    pub explanation: Option<Explanation>,
}

impl TestItem {
    /// The model output a test-taker must predict for this item.
    pub fn truth(&self) -> usize {
        self.counterfactual.as_ref().map_or(self.prediction, |c| c.prediction)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestSession {
    pub id: String,
    pub method: Method,
    pub domain: Domain,
    pub kind: TestKind,
    pub seed: u64,
    pub phases: Vec<Phase>,
    pub items: Vec<TestItem>,
    /// Originals replaced because no suitable counterfactual was found.
    pub retries: usize,
}

impl TestSession {
    pub fn item(&self, id: &str) -> Option<&TestItem> {
        self.items.iter().find(|i| i.id == id)
    }

    pub fn phase(&self, kind: PhaseKind) -> Option<&Phase> {
        self.phases.iter().find(|p| p.kind == kind)
    }
}

/// Everything needed to build sessions for one domain.
pub struct Bench<'a> {
    pub explainers: Explainers<'a>,
    pub data: &'a [Instance],
    pub split: &'a DatasetSplit,
    pub domain: Domain,
}

#[derive(Clone, Debug)]
struct Candidate {
    index: usize,
    id: String,
    prediction: usize,
    quadrant: Quadrant,
}

impl Bench<'_> {
    fn candidates(&self, model: &dyn Classifier, split: &'static str, pool: &[usize]) -> Vec<Candidate> {
        let preds = par::map_slice(self.explainers.mode, pool, |&i| model.predict(&self.data[i].features));
        pool.iter()
            .zip(preds)
            .map(|(&i, prediction)| Candidate {
                index: i,
                id: format!("{}-{}-{}", self.domain, split, i),
                prediction,
                quadrant: Quadrant::of(self.data[i].label, prediction),
            })
            .collect()
    }

    /// Each quadrant's candidates in a seeded random order.
    fn by_quadrant(
        &self,
        cands: Vec<Candidate>,
        need: usize,
        split: &'static str,
        rng: &mut seed::Rng,
    ) -> Result<Vec<Vec<Candidate>>, TestbenchError> {
        let mut groups = Vec::with_capacity(4);
        for q in Quadrant::ALL {
            let mut g: Vec<Candidate> = cands.iter().filter(|c| c.quadrant == q).cloned().collect();
            if g.len() < need {
                return Err(TestbenchError::InsufficientQuadrant {
                    quadrant: q,
                    split,
                    have: g.len(),
                    need,
                });
            }
            g.shuffle(rng);
            groups.push(g);
        }
        Ok(groups)
    }

    fn item(&self, c: &Candidate, kind: ItemKind) -> TestItem {
        let x = &self.data[c.index];
        TestItem {
            id: c.id.clone(),
            kind,
            text: self.explainers.space.render(&x.features),
            instance: x.features.clone(),
            gold: x.label,
            prediction: c.prediction,
            quadrant: c.quadrant,
            counterfactual: None,
            explanation: None,
        }
    }

    /// Fills every quadrant with `need` accepted items. The first `need`
    /// candidates of each quadrant are tried in parallel; each rejection is
    /// replaced by the quadrant's next candidate, which takes over the
    /// rejected slot. Slots are numbered in quadrant order.
    fn fill<F>(&self, groups: &[Vec<Candidate>], need: usize, split: &'static str, accept: F) -> Result<(Vec<TestItem>, usize), TestbenchError>
    where
        F: Fn(usize, &Candidate) -> Result<TestItem, Rejection> + Sync,
    {
        let first: Vec<(usize, &Candidate)> = groups
            .iter()
            .enumerate()
            .flat_map(|(qi, g)| g[..need].iter().enumerate().map(move |(k, c)| (qi * need + k, c)))
            .collect();
        let mut results: Vec<Option<Result<TestItem, Rejection>>> =
            par::map_slice(self.explainers.mode, &first, |&(slot, c)| Some(accept(slot, c)));
        let mut items = Vec::with_capacity(need * groups.len());
        let mut retries = 0;
        for (qi, group) in groups.iter().enumerate() {
            let mut next = need;
            let mut failures = 0;
            for k in 0..need {
                let slot = qi * need + k;
                let mut result = results[slot].take().expect("each slot read once");
                loop {
                    match result {
                        Ok(item) => {
                            items.push(item);
                            break;
                        }
                        Err(rejection) => {
                            failures += 1;
                            retries += 1;
                            if failures > MAX_QUADRANT_RETRIES {
                                return Err(rejection.into_error(Quadrant::ALL[qi], failures - 1));
                            }
                            let c = group.get(next).ok_or(TestbenchError::InsufficientQuadrant {
                                quadrant: Quadrant::ALL[qi],
                                split,
                                have: group.len() - failures,
                                need,
                            })?;
                            next += 1;
                            result = accept(slot, c);
                        }
                    }
                }
            }
        }
        Ok((items, retries))
    }

    fn explained(&self, method: Method, mut item: TestItem, seed: u64) -> Result<TestItem, Rejection> {
        let s = seed::derive(seed, &format!("explain-{}", item.id));
        match self.explainers.explain(method, &item.instance, s) {
            Ok(e) => {
                item.explanation = Some(e);
                Ok(item)
            }
            Err(e) => Err(Rejection::Explain(item.id, e)),
        }
    }

    fn balanced(
        &self,
        method: Method,
        pool: &[usize],
        split: &'static str,
        kind: ItemKind,
        n: usize,
        seed: u64,
        explain: bool,
    ) -> Result<(Vec<TestItem>, usize), TestbenchError> {
        check_size(n)?;
        let model = self.explainers.model_for(method);
        let mut rng = seed::rng(seed::derive(seed, &format!("balance-{split}")));
        let groups = self.by_quadrant(self.candidates(model, split, pool), n / 4, split, &mut rng)?;
        let (mut items, retries) = self.fill(&groups, n / 4, split, |_, c| {
            let item = self.item(c, kind);
            if explain {
                self.explained(method, item, seed)
            } else {
                Ok(item)
            }
        })?;
        items.shuffle(&mut rng);
        Ok((items, retries))
    }

    /// `n` items from `pool`, exactly n/4 per quadrant, in shuffled order.
    pub fn select_balanced(
        &self,
        method: Method,
        pool: &[usize],
        split: &'static str,
        kind: ItemKind,
        n: usize,
        seed: u64,
    ) -> Result<Vec<TestItem>, TestbenchError> {
        Ok(self.balanced(method, pool, split, kind, n, seed, false)?.0)
    }

    /// Learn, Pre, Learn+Explain, Post. Learning items come from the
    /// validation split and prediction items from the test split. A learning
    /// item whose explanation cannot be produced is replaced from its quadrant.
    pub fn make_forward_session(
        &self,
        id: &str,
        method: Method,
        n_learn: usize,
        n_predict: usize,
        seed: u64,
    ) -> Result<TestSession, TestbenchError> {
        check_size(n_learn)?;
        check_size(n_predict)?;
        let (learn, retries) =
            self.balanced(method, &self.split.validation, "val", ItemKind::ForwardLearning, n_learn, seed, true)?;
        let predict = self.select_balanced(method, &self.split.test, "test", ItemKind::ForwardPredict, n_predict, seed)?;
        let learn_ids: Vec<String> = learn.iter().map(|i| i.id.clone()).collect();
        let predict_ids: Vec<String> = predict.iter().map(|i| i.id.clone()).collect();
        let phase = |kind, items: &Vec<String>, answers, show_gold, show_explanation| Phase {
            kind,
            items: items.clone(),
            answers,
            show_gold,
            show_prediction: show_gold,
            show_explanation,
        };
        Ok(TestSession {
            id: id.to_string(),
            method,
            domain: self.domain,
            kind: TestKind::Forward,
            seed,
            phases: vec![
                phase(PhaseKind::Learn, &learn_ids, AnswerMode::None, true, false),
                phase(PhaseKind::Pre, &predict_ids, AnswerMode::Prediction, false, false),
                phase(PhaseKind::LearnExplain, &learn_ids, AnswerMode::Rating, true, true),
                phase(PhaseKind::Post, &predict_ids, AnswerMode::Prediction, false, false),
            ],
            items: learn.into_iter().chain(predict).collect(),
            retries,
        })
    }

    /// Pre and Post over the same `n` balanced test originals, each paired
    /// with a perturbation. Perturbations alternate between flipped and
    /// unchanged model predictions by slot in quadrant order, so exactly half
    /// flip. Post attaches explanations of the originals. Originals without a
    /// suitable perturbation or explanation are replaced from their quadrant.
    pub fn make_counterfactual_session(
        &self,
        id: &str,
        method: Method,
        n: usize,
        seed: u64,
    ) -> Result<TestSession, TestbenchError> {
        check_size(n)?;
        let model = self.explainers.model_for(method);
        let mut rng = seed::rng(seed::derive(seed, "balance-test"));
        let groups = self.by_quadrant(self.candidates(model, "test", &self.split.test), n / 4, "test", &mut rng)?;
        let (mut items, retries) = self.fill(&groups, n / 4, "test", |slot, c| {
            let x = &self.data[c.index].features;
            let mut cf_rng = seed::rng(seed::derive(seed, &format!("counterfactual-{}", c.id)));
            let z = sample_counterfactual(x, model, self.explainers.perturber, slot % 2 == 0, &mut cf_rng)
                .map_err(|e| Rejection::Perturb(c.id.clone(), e))?;
            let mut item = self.item(c, ItemKind::Counterfactual);
            let prediction = model.predict(&z);
            item.counterfactual = Some(CounterfactualInput {
                text: self.explainers.space.render(&z),
                instance: z,
                prediction,
                flipped: prediction != c.prediction,
            });
            self.explained(method, item, seed)
        })?;
        items.shuffle(&mut rng);
        let ids: Vec<String> = items.iter().map(|i| i.id.clone()).collect();
        Ok(TestSession {
            id: id.to_string(),
            method,
            domain: self.domain,
            kind: TestKind::Counterfactual,
            seed,
            phases: vec![
                Phase {
                    kind: PhaseKind::Pre,
                    items: ids.clone(),
                    answers: AnswerMode::Prediction,
                    show_gold: true,
                    show_prediction: true,
                    show_explanation: false,
                },
                Phase {
                    kind: PhaseKind::Post,
                    items: ids,
                    answers: AnswerMode::PredictionAndRating,
                    show_gold: true,
                    show_prediction: true,
                    show_explanation: true,
                },
            ],
            items,
            retries,
        })
    }

    pub fn make_session(
        &self,
        id: &str,
        method: Method,
        kind: TestKind,
        n: usize,
        seed: u64,
    ) -> Result<TestSession, TestbenchError> {
        match kind {
            TestKind::Forward => self.make_forward_session(id, method, DEFAULT_LEARNING_ITEMS, n, seed),
            TestKind::Counterfactual => self.make_counterfactual_session(id, method, n, seed),
        }
    }
}

/// Why a candidate item was rejected.
enum Rejection {
    Perturb(String, PerturbError),
    Explain(String, ExplainError),
}

impl Rejection {
    fn into_error(self, quadrant: Quadrant, retries: usize) -> TestbenchError {
        match self {
            Rejection::Perturb(item, source) => TestbenchError::NoMatchingPerturbation {
                quadrant,
                item,
                retries,
                source,
            },
            Rejection::Explain(item, source) => TestbenchError::Explain { item, source },
        }
    }
}

fn check_size(n: usize) -> Result<(), TestbenchError> {
    if n == 0 || n % 4 != 0 {
        return Err(TestbenchError::InvalidSize(n));
    }
    Ok(())
}

/// One answer from a test-taker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub session_id: String,
    pub item_id: String,
    pub phase: PhaseKind,
    /// Absent for rating-only answers.
    pub predicted_class: Option<usize>,
    pub rating: Option<u8>,
    pub elapsed_ms: u64,
    pub user_id: String,
    /// Server receive time, milliseconds since the Unix epoch.
    #[serde(default)]
    pub timestamp_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionScore {
    /// Items answered in both Pre and Post.
    pub items: usize,
    /// Percent correct.
    pub pre: f64,
    pub post: f64,
    /// Post minus Pre, in percentage points.
    pub change: f64,
}

/// Accuracy of predictions against the model's outputs, restricted to items
/// answered in both Pre and Post. Responses for other sessions are ignored.
pub fn score_session(session: &TestSession, responses: &[ResponseRecord]) -> Result<SessionScore, TestbenchError> {
    let mut answers: HashMap<(PhaseKind, &str), usize> = HashMap::new();
    let mut seen: HashSet<(PhaseKind, &str)> = HashSet::new();
    for r in responses.iter().filter(|r| r.session_id == session.id) {
        let in_phase = session
            .phase(r.phase)
            .is_some_and(|p| p.items.iter().any(|i| *i == r.item_id));
        if !in_phase {
            return Err(TestbenchError::UnknownItem {
                item: r.item_id.clone(),
                phase: r.phase,
            });
        }
        if !seen.insert((r.phase, r.item_id.as_str())) {
            return Err(TestbenchError::DuplicateResponse {
                item: r.item_id.clone(),
                phase: r.phase,
            });
        }
        if let (PhaseKind::Pre | PhaseKind::Post, Some(p)) = (r.phase, r.predicted_class) {
            answers.insert((r.phase, r.item_id.as_str()), p);
        }
    }
    let (mut n, mut pre, mut post) = (0usize, 0usize, 0usize);
    for item in &session.items {
        if let (Some(&a), Some(&b)) = (
            answers.get(&(PhaseKind::Pre, item.id.as_str())),
            answers.get(&(PhaseKind::Post, item.id.as_str())),
        ) {
            n += 1;
            pre += usize::from(a == item.truth());
            post += usize::from(b == item.truth());
        }
    }
    let pct = |k: usize| if n == 0 { 0.0 } else { 100.0 * k as f64 / n as f64 };
    Ok(SessionScore {
        items: n,
        pre: pct(pre),
        post: pct(post),
        change: pct(post) - pct(pre),
    })
}
