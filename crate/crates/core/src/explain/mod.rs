//! The five explanation methods behind one interface.

mod anchor;
mod boundary;
mod lime;
mod render;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use anchor::{explain_anchor, rule_precision, AnchorConfig, AnchorExplanation, Predicate};
pub use boundary::{
    build_path, draw_samples, find_counterfactual, BoundaryBundle, BoundaryExplanation, Counterfactual, Edit,
    PathStep, DISPLAYED_STEPS,
};
pub use lime::{explain_lime, LimeConfig, LimeExplanation, LimeFeature, LimeSpace};
pub use render::render;

use crate::data::{FeatureSpace, Instance};
use crate::models::{self, Classifier, ConditionalImputerSlice, ModelError, PrototypeExplanation, PrototypeModel, TaskModel};
use crate::par::Parallelism;
use crate::perturb::Perturber;
use crate::seed;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("no sampled perturbation changes the prediction")]
    NoCounterfactualFound,
    #[error("invalid explainer config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{method} explanation failed: {source}")]
    Component {
        method: Method,
        #[source]
        source: Box<ExplainError>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lime,
    Anchor,
    Prototype,
    DecisionBoundary,
    Composite,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Lime,
        Method::Anchor,
        Method::Prototype,
        Method::DecisionBoundary,
        Method::Composite,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Lime => "lime",
            Method::Anchor => "anchor",
            Method::Prototype => "prototype",
            Method::DecisionBoundary => "decision_boundary",
            Method::Composite => "composite",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s || (s == "boundary" && *m == Method::DecisionBoundary))
            .ok_or_else(|| format!("unknown method {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositeExplanation {
    pub instance: Vec<usize>,
    pub prediction: usize,
    pub lime: LimeExplanation,
    pub anchor: AnchorExplanation,
    pub boundary: BoundaryBundle,
    pub prototype: PrototypeExplanation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Explanation {
    Lime(LimeExplanation),
    Anchor(AnchorExplanation),
    Prototype(PrototypeExplanation),
    DecisionBoundary(BoundaryExplanation),
    Composite(CompositeExplanation),
}

impl Explanation {
    pub fn method(&self) -> Method {
        match self {
            Explanation::Lime(_) => Method::Lime,
            Explanation::Anchor(_) => Method::Anchor,
            Explanation::Prototype(_) => Method::Prototype,
            Explanation::DecisionBoundary(_) => Method::DecisionBoundary,
            Explanation::Composite(_) => Method::Composite,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainConfig {
    pub lime: LimeConfig,
    pub anchor: AnchorConfig,
    /// Perturbations drawn when searching for a boundary-crossing input.
    pub boundary_samples: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            lime: LimeConfig::default(),
            anchor: AnchorConfig::default(),
            boundary_samples: crate::perturb::SAMPLE_BUDGET,
        }
    }
}

/// Everything the explainers need for one domain.
pub struct Explainers<'a> {
    pub task: &'a TaskModel,
    /// Trained end to end; explains itself under the prototype method.
    pub prototype: &'a PrototypeModel,
    /// Extractor frozen from the task model; used inside composite explanations.
    pub prototype_frozen: &'a PrototypeModel,
    pub perturber: &'a Perturber,
    pub lime_space: &'a LimeSpace,
    pub space: &'a FeatureSpace,
    pub train: &'a [Instance],
    pub imputers: ConditionalImputerSlice<'a>,
    pub config: &'a ExplainConfig,
    pub mode: Parallelism,
}

impl Explainers<'_> {
    /// The model whose behavior users simulate under `method`.
    pub fn model_for(&self, method: Method) -> &dyn Classifier {
        match method {
            Method::Prototype => self.prototype,
            _ => self.task,
        }
    }

    /// Explains `x` with `method`; sub-seeds are derived by method name, so a
    /// composite explanation contains exactly the individual explanations.
    pub fn explain(&self, method: Method, x: &[usize], seed: u64) -> Result<Explanation, ExplainError> {
        Ok(match method {
            Method::Lime => Explanation::Lime(self.lime(x, seed)?),
            Method::Anchor => Explanation::Anchor(self.anchor(x, seed)?),
            Method::Prototype => Explanation::Prototype(self.prototype_explanation(self.prototype, x)?),
            Method::DecisionBoundary => Explanation::DecisionBoundary(self.boundary(x, seed)?),
            Method::Composite => Explanation::Composite(self.composite(x, seed)?),
        })
    }

    pub fn lime(&self, x: &[usize], seed: u64) -> Result<LimeExplanation, ExplainError> {
        explain_lime(
            self.task,
            x,
            self.lime_space,
            self.space,
            &self.config.lime,
            seed::derive(seed, "lime"),
            self.mode,
        )
    }

    pub fn anchor(&self, x: &[usize], seed: u64) -> Result<AnchorExplanation, ExplainError> {
        explain_anchor(
            self.task,
            x,
            self.perturber,
            self.space,
            &self.config.anchor,
            seed::derive(seed, "anchor"),
            self.mode,
        )
    }

    pub fn boundary(&self, x: &[usize], seed: u64) -> Result<BoundaryExplanation, ExplainError> {
        let cf = find_counterfactual(
            self.task,
            x,
            self.perturber,
            self.config.boundary_samples,
            seed::derive(seed, "boundary"),
            self.mode,
        )?;
        Ok(build_path(self.task, x, &cf.instance, self.space))
    }

    fn prototype_explanation(&self, model: &PrototypeModel, x: &[usize]) -> Result<PrototypeExplanation, ExplainError> {
        Ok(models::render_prototype_explanation(
            model,
            x,
            self.train,
            self.space,
            self.imputers,
        )?)
    }

    pub fn composite(&self, x: &[usize], seed: u64) -> Result<CompositeExplanation, ExplainError> {
        let tag = |method: Method| move |e: ExplainError| ExplainError::Component {
            method,
            source: Box::new(e),
        };
        let lime = self.lime(x, seed).map_err(tag(Method::Lime))?;
        let anchor = self.anchor(x, seed).map_err(tag(Method::Anchor))?;
        let boundary = self.boundary(x, seed).map_err(tag(Method::DecisionBoundary))?.bundle();
        let prototype = self
            .prototype_explanation(self.prototype_frozen, x)
            .map_err(tag(Method::Prototype))?;
        Ok(CompositeExplanation {
            instance: x.to_vec(),
            prediction: self.task.predict(x),
            lime,
            anchor,
            boundary,
            prototype,
        })
    }
}
