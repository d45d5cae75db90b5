//! Per-session progress: which phase is open and which items were answered.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use simbench_core::data::Domain;
use simbench_core::explain::{Explanation, Method};
use simbench_core::testbench::{AnswerMode, PhaseKind, ResponseRecord, TestKind, TestSession};

pub const RATING_PROMPT: &str = "Does this explanation show me why the system thought what it did?";
pub const RATING_MIN: u8 = 1;
pub const RATING_MAX: u8 = 7;

/// An answer as submitted by a test-taker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub item: String,
    #[serde(default)]
    pub prediction: Option<usize>,
    #[serde(default)]
    pub rating: Option<u8>,
    /// Time the test-taker spent on the item, as measured by the client.
    #[serde(default)]
    pub elapsed_ms: u64,
}

/// Why an answer or phase change was refused.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Refusal {
    Completed,
    /// The item was already answered in this phase.
    Duplicate(String),
    Invalid(String),
    /// The current phase does not allow the request.
    Conflict(String),
}

impl std::fmt::Display for Refusal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Refusal::Completed => f.write_str("session is completed"),
            Refusal::Duplicate(item) => write!(f, "item {item} was already answered in this phase"),
            Refusal::Invalid(m) | Refusal::Conflict(m) => f.write_str(m),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session: TestSession,
    pub user: String,
    pub created_ms: u64,
    /// Index into `session.phases`; never decreases.
    pub phase: usize,
    /// Items answered so far, per phase.
    pub answered: Vec<BTreeSet<String>>,
    pub completed: bool,
    pub responses: Vec<ResponseRecord>,
}

impl SessionState {
    pub fn new(session: TestSession, user: String, created_ms: u64) -> Self {
        let phases = session.phases.len();
        Self {
            session,
            user,
            created_ms,
            phase: 0,
            answered: vec![BTreeSet::new(); phases],
            completed: false,
            responses: Vec::new(),
        }
    }

    /// Validates `answer` against the open phase and records it. Completing
    /// the phase opens the next one, or completes the session after the last.
    pub fn respond(&mut self, answer: &Answer, timestamp_ms: u64) -> Result<ResponseRecord, Refusal> {
        if self.completed {
            return Err(Refusal::Completed);
        }
        let phase = &self.session.phases[self.phase];
        if !phase.items.contains(&answer.item) {
            return Err(Refusal::Invalid(format!("item {} is not part of the {} phase", answer.item, phase.kind)));
        }
        if self.answered[self.phase].contains(&answer.item) {
            return Err(Refusal::Duplicate(answer.item.clone()));
        }
        let mode = phase.answers;
        if mode == AnswerMode::None {
            return Err(Refusal::Invalid(format!("the {} phase takes no answers", phase.kind)));
        }
        match (mode.takes_prediction(), answer.prediction) {
            (true, None) => return Err(Refusal::Invalid("a prediction is required".into())),
            (true, Some(p)) if p > 1 => return Err(Refusal::Invalid(format!("prediction {p} is not a class"))),
            (false, Some(_)) => {
                return Err(Refusal::Invalid(format!("the {} phase takes no predictions", phase.kind)))
            }
            _ => {}
        }
        match (mode.allows_rating(), answer.rating) {
            (false, Some(_)) => return Err(Refusal::Invalid(format!("the {} phase takes no ratings", phase.kind))),
            (true, None) => return Err(Refusal::Invalid("a rating is required".into())),
            (true, Some(r)) if !(RATING_MIN..=RATING_MAX).contains(&r) => {
                return Err(Refusal::Invalid(format!("rating {r} is outside {RATING_MIN}-{RATING_MAX}")))
            }
            _ => {}
        }
        let record = ResponseRecord {
            session_id: self.session.id.clone(),
            item_id: answer.item.clone(),
            phase: phase.kind,
            predicted_class: answer.prediction,
            rating: answer.rating,
            elapsed_ms: answer.elapsed_ms,
            user_id: self.user.clone(),
            timestamp_ms,
        };
        let done = {
            let set = &mut self.answered[self.phase];
            set.insert(answer.item.clone());
            set.len() == phase.items.len()
        };
        self.responses.push(record.clone());
        if done {
            self.next_phase();
        }
        Ok(record)
    }

    /// Leaves a phase that takes no answers.
    pub fn advance(&mut self) -> Result<(), Refusal> {
        if self.completed {
            return Err(Refusal::Completed);
        }
        let phase = &self.session.phases[self.phase];
        if phase.answers != AnswerMode::None {
            return Err(Refusal::Conflict(format!(
                "the {} phase ends when every item is answered",
                phase.kind
            )));
        }
        self.next_phase();
        Ok(())
    }

    fn next_phase(&mut self) {
        if self.phase + 1 < self.session.phases.len() {
            self.phase += 1;
        } else {
            self.completed = true;
        }
    }

    /// What the test-taker may see now: only the open phase's items, with
    /// labels, predictions and explanations as the phase allows. The model's
    /// output on a perturbation is never shown.
    pub fn view(&self) -> PhaseView {
        let phase = &self.session.phases[self.phase];
        let items = phase
            .items
            .iter()
            .map(|id| {
                let item = self.session.item(id).expect("phase items exist");
                ItemView {
                    id: item.id.clone(),
                    text: item.text.clone(),
                    instance: item.instance.clone(),
                    gold: phase.show_gold.then_some(item.gold),
                    prediction: phase.show_prediction.then_some(item.prediction),
                    explanation: if phase.show_explanation { item.explanation.clone() } else { None },
                    perturbation: item.counterfactual.as_ref().map(|c| PerturbationView {
                        instance: c.instance.clone(),
                        text: c.text.clone(),
                    }),
                    answered: self.answered[self.phase].contains(id),
                }
            })
            .collect();
        let rates = phase.answers.allows_rating();
        PhaseView {
            session_id: self.session.id.clone(),
            kind: self.session.kind,
            method: self.session.method,
            domain: self.session.domain,
            phase: phase.kind,
            phase_index: self.phase,
            phase_count: self.session.phases.len(),
            answers: phase.answers,
            rating_prompt: rates.then(|| RATING_PROMPT.to_string()),
            rating_scale: rates.then_some([RATING_MIN, RATING_MAX]),
            items,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationView {
    pub instance: Vec<usize>,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemView {
    pub id: String,
    pub text: String,
    pub instance: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<Explanation>,
    /// The input whose model output the test-taker predicts (counterfactual tests).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<PerturbationView>,
    pub answered: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseView {
    pub session_id: String,
    pub kind: TestKind,
    pub method: Method,
    pub domain: Domain,
    pub phase: PhaseKind,
    pub phase_index: usize,
    pub phase_count: usize,
    pub answers: AnswerMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating_prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating_scale: Option<[u8; 2]>,
    pub items: Vec<ItemView>,
}
