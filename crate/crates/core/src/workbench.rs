//! Training, checkpointing and reloading everything one domain needs.
//!
//! A checkpoint directory holds `task.json` (task model, imputers, data
//! source and seed), `prototype.json`, `prototype_frozen.json` and
//! `metrics.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, DataError, DatasetSplit, Domain, EmbeddingTable, FeatureSpace, Instance, SplitRatios};
use crate::explain::{ExplainConfig, Explainers, LimeSpace};
use crate::fixtures;
use crate::models::{
    self, build_tabular_task_model, build_text_task_model, init_prototype_model, ModelError, PrototypeLoss,
    PrototypeModel, TaskModel, TABULAR_PROTOTYPES_PER_CLASS, TEXT_PROTOTYPES_PER_CLASS,
};
use crate::nn::{TrainConfig, TrainLog};
use crate::par::Parallelism;
use crate::perturb::{
    fit_imputers, perturber_for, ConditionalImputer, Lexicon, NeighborIndex, PerturbError, PerturbationConfig,
    Perturber, TextPerturber,
};
use crate::seed;
use crate::testbench::Bench;

pub const TASK_FILE: &str = "task.json";
pub const PROTOTYPE_FILE: &str = "prototype.json";
pub const PROTOTYPE_FROZEN_FILE: &str = "prototype_frozen.json";
pub const METRICS_FILE: &str = "metrics.json";

/// Seed used when none is given; its fixture split leaves every confusion
/// quadrant populated in the validation and test parts.
pub const DEFAULT_SEED: u64 = 3;

#[derive(Debug, Error)]
pub enum WorkbenchError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("checkpoint {0} is for a {1} model, expected {2}")]
    DomainMismatch(PathBuf, Domain, Domain),
    #[error("unknown instance {0:?}: expected an index below {1} or an id like tabular-test-17")]
    UnknownInstance(String, usize),
}

/// Where a domain's data live.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "domain", rename_all = "lowercase")]
pub enum DataSource {
    Tabular {
        schema: PathBuf,
        data: PathBuf,
    },
    Text {
        embeddings: PathBuf,
        reviews: PathBuf,
        /// Optional `token<TAB>0|1` overrides of which tokens may be edited.
        #[serde(default)]
        tags: Option<PathBuf>,
    },
}

impl DataSource {
    /// The bundled dataset for `domain`.
    pub fn fixture(domain: Domain) -> Self {
        let dir = fixtures::dir();
        match domain {
            Domain::Tabular => DataSource::Tabular {
                schema: dir.join("adult_schema.json"),
                data: dir.join("adult.csv"),
            },
            Domain::Text => DataSource::Text {
                embeddings: dir.join("embeddings.txt"),
                reviews: dir.join("reviews.tsv"),
                tags: None,
            },
        }
    }

    pub fn domain(&self) -> Domain {
        match self {
            DataSource::Tabular { .. } => Domain::Tabular,
            DataSource::Text { .. } => Domain::Text,
        }
    }
}

/// A loaded dataset with its seeded split.
pub struct Dataset {
    pub source: DataSource,
    pub space: FeatureSpace,
    pub instances: Vec<Instance>,
    pub split: DatasetSplit,
}

impl Dataset {
    pub fn load(source: DataSource, seed: u64) -> Result<Self, WorkbenchError> {
        let (space, instances) = match &source {
            DataSource::Tabular { schema, data } => {
                let schema = data::TabularSchema::from_json_file(schema)?;
                let rows = data::load_tabular(data, &schema)?;
                (FeatureSpace::Tabular(schema), rows)
            }
            DataSource::Text { embeddings, reviews, .. } => {
                let emb = data::load_embeddings(embeddings)?;
                let rows = data::load_text(reviews, &emb)?;
                (FeatureSpace::Text(Arc::new(emb)), rows)
            }
        };
        let split = data::split(instances.len(), SplitRatios::default(), seed::derive(seed, "split"))?;
        Ok(Self {
            source,
            space,
            instances,
            split,
        })
    }

    pub fn domain(&self) -> Domain {
        self.source.domain()
    }

    pub fn part(&self, indices: &[usize]) -> Vec<Instance> {
        indices.iter().map(|&i| self.instances[i].clone()).collect()
    }

    pub fn embeddings(&self) -> Option<&Arc<EmbeddingTable>> {
        match &self.space {
            FeatureSpace::Text(e) => Some(e),
            FeatureSpace::Tabular(_) => None,
        }
    }

    /// Resolves `17` or `tabular-test-17` to a dataset index.
    pub fn resolve(&self, id: &str) -> Result<usize, WorkbenchError> {
        let tail = id.rsplit('-').next().unwrap_or(id);
        match tail.parse::<usize>() {
            Ok(i) if i < self.instances.len() => Ok(i),
            _ => Err(WorkbenchError::UnknownInstance(id.to_string(), self.instances.len())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
    pub test_accuracy: f64,
    pub epochs: usize,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub domain: Domain,
    pub seed: u64,
    /// Keyed by `task`, `prototype` and `prototype_frozen`.
    pub models: BTreeMap<String, ModelMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskCheckpoint {
    pub source: DataSource,
    pub seed: u64,
    pub model: TaskModel,
    /// Per-feature conditional imputers (tabular only).
    pub imputers: Vec<ConditionalImputer>,
}

fn metrics_of<C: models::Classifier + ?Sized>(model: &C, data: &Dataset, log: &TrainLog) -> ModelMetrics {
    ModelMetrics {
        train_accuracy: models::accuracy(model, &data.part(&data.split.train)),
        validation_accuracy: models::accuracy(model, &data.part(&data.split.validation)),
        test_accuracy: models::accuracy(model, &data.part(&data.split.test)),
        epochs: log.epochs.len(),
        best_epoch: log.best_epoch,
    }
}

/// Trains the task model and, for tabular data, the conditional imputers.
pub fn train_task(data: &Dataset, seed: u64, mode: Parallelism) -> Result<(TaskCheckpoint, ModelMetrics), WorkbenchError> {
    let mut model = match &data.space {
        FeatureSpace::Tabular(schema) => build_tabular_task_model(schema, seed::derive(seed, "task-init"))?,
        FeatureSpace::Text(emb) => build_text_task_model(emb, seed::derive(seed, "task-init"))?,
    };
    let train = data.part(&data.split.train);
    let val = data.part(&data.split.validation);
    let config = TrainConfig {
        seed: seed::derive(seed, "task-train"),
        ..TrainConfig::default()
    };
    let log = model.train(&train, &val, &config)?;
    let imputers = match &data.space {
        FeatureSpace::Tabular(schema) => fit_imputers(&train, &schema.cardinalities(), mode)?,
        FeatureSpace::Text(_) => Vec::new(),
    };
    let metrics = metrics_of(&model, data, &log);
    Ok((
        TaskCheckpoint {
            source: data.source.clone(),
            seed,
            model,
            imputers,
        },
        metrics,
    ))
}

/// Initializes prototypes from the task model's latent space and trains.
pub fn train_prototype(
    data: &Dataset,
    task: &TaskModel,
    freeze_extractor: bool,
    seed: u64,
) -> Result<(PrototypeModel, ModelMetrics), WorkbenchError> {
    let per_class = match data.domain() {
        Domain::Tabular => TABULAR_PROTOTYPES_PER_CLASS,
        Domain::Text => TEXT_PROTOTYPES_PER_CLASS,
    };
    let label = if freeze_extractor { "prototype-frozen" } else { "prototype" };
    let train = data.part(&data.split.train);
    let val = data.part(&data.split.validation);
    let mut model = init_prototype_model(task, &train, [per_class; 2], freeze_extractor, seed::derive(seed, label))?;
    let config = TrainConfig {
        seed: seed::derive(seed, &format!("{label}-train")),
        ..TrainConfig::default()
    };
    let log = model.train(&train, &val, PrototypeLoss::default(), &config)?;
    let metrics = metrics_of(&model, data, &log);
    Ok((model, metrics))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, WorkbenchError> {
    let text = fs::read_to_string(path).map_err(|source| WorkbenchError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| WorkbenchError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), WorkbenchError> {
    let io = |source| WorkbenchError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(io)
}

/// Adds or replaces one model's entry in the directory's metrics file.
pub fn record_metrics(dir: &Path, domain: Domain, seed: u64, name: &str, m: ModelMetrics) -> Result<Metrics, WorkbenchError> {
    let path = dir.join(METRICS_FILE);
    let mut metrics = match read_json::<Metrics>(&path) {
        Ok(existing) if existing.domain == domain && existing.seed == seed => existing,
        _ => Metrics {
            domain,
            seed,
            models: BTreeMap::new(),
        },
    };
    metrics.models.insert(name.to_string(), m);
    write_json(&path, &metrics)?;
    Ok(metrics)
}

/// A loaded checkpoint directory: data, all three models and the
/// perturbation machinery the explainers share.
pub struct Workbench {
    pub data: Dataset,
    pub task: TaskModel,
    pub prototype: PrototypeModel,
    pub prototype_frozen: PrototypeModel,
    pub imputers: Vec<ConditionalImputer>,
    pub perturber: Perturber,
    pub lime_space: LimeSpace,
    pub train: Vec<Instance>,
    pub config: ExplainConfig,
    pub mode: Parallelism,
    pub seed: u64,
}

impl Workbench {
    pub fn open(dir: &Path, mode: Parallelism) -> Result<Self, WorkbenchError> {
        let task: TaskCheckpoint = read_json(&dir.join(TASK_FILE))?;
        let prototype: PrototypeModel = read_json(&dir.join(PROTOTYPE_FILE))?;
        let prototype_frozen: PrototypeModel = read_json(&dir.join(PROTOTYPE_FROZEN_FILE))?;
        let domain = task.source.domain();
        for (file, m) in [(PROTOTYPE_FILE, &prototype), (PROTOTYPE_FROZEN_FILE, &prototype_frozen)] {
            if m.domain() != domain {
                return Err(WorkbenchError::DomainMismatch(dir.join(file), m.domain(), domain));
            }
        }
        let data = Dataset::load(task.source.clone(), task.seed)?;
        Self::assemble(data, task.model, prototype, prototype_frozen, task.imputers, task.seed, mode)
    }

    /// Trains every model for `source` and writes a complete checkpoint directory.
    pub fn train_all(source: DataSource, dir: &Path, seed: u64, mode: Parallelism) -> Result<(Self, Metrics), WorkbenchError> {
        let data = Dataset::load(source, seed)?;
        let domain = data.domain();
        let (task, m) = train_task(&data, seed, mode)?;
        write_json(&dir.join(TASK_FILE), &task)?;
        record_metrics(dir, domain, seed, "task", m)?;
        let (proto, m) = train_prototype(&data, &task.model, false, seed)?;
        write_json(&dir.join(PROTOTYPE_FILE), &proto)?;
        record_metrics(dir, domain, seed, "prototype", m)?;
        let (frozen, m) = train_prototype(&data, &task.model, true, seed)?;
        write_json(&dir.join(PROTOTYPE_FROZEN_FILE), &frozen)?;
        let metrics = record_metrics(dir, domain, seed, "prototype_frozen", m)?;
        let bench = Self::assemble(data, task.model, proto, frozen, task.imputers, seed, mode)?;
        Ok((bench, metrics))
    }

    pub fn assemble(
        data: Dataset,
        task: TaskModel,
        prototype: PrototypeModel,
        prototype_frozen: PrototypeModel,
        imputers: Vec<ConditionalImputer>,
        seed: u64,
        mode: Parallelism,
    ) -> Result<Self, WorkbenchError> {
        if task.domain() != data.domain() {
            return Err(WorkbenchError::DomainMismatch(PathBuf::from(TASK_FILE), task.domain(), data.domain()));
        }
        let config = PerturbationConfig::default();
        let train = data.part(&data.split.train);
        let (perturber, lime_space) = match (&data.source, &data.space) {
            (DataSource::Text { tags, .. }, FeatureSpace::Text(emb)) => {
                let mut lexicon = Lexicon::default();
                if let Some(path) = tags {
                    lexicon = lexicon.with_tag_file(path)?;
                }
                let tokens = data.instances.iter().flat_map(|x| x.features.iter().copied());
                let index = NeighborIndex::build(emb.clone(), config.neighbor_pool, tokens, mode);
                let text = TextPerturber::new(index, &lexicon, config.clone())?;
                (perturber_for(task.encoder(), Some(&text), &config)?, LimeSpace::Text)
            }
            (_, FeatureSpace::Tabular(schema)) => (
                perturber_for(task.encoder(), None, &config)?,
                LimeSpace::tabular(&train, &schema.cardinalities()),
            ),
            _ => unreachable!("data source and feature space agree"),
        };
        Ok(Self {
            data,
            task,
            prototype,
            prototype_frozen,
            imputers,
            perturber,
            lime_space,
            train,
            config: ExplainConfig::default(),
            mode,
            seed,
        })
    }

    pub fn domain(&self) -> Domain {
        self.data.domain()
    }

    pub fn explainers(&self) -> Explainers<'_> {
        Explainers {
            task: &self.task,
            prototype: &self.prototype,
            prototype_frozen: &self.prototype_frozen,
            perturber: &self.perturber,
            lime_space: &self.lime_space,
            space: &self.data.space,
            train: &self.train,
            imputers: &self.imputers,
            config: &self.config,
            mode: self.mode,
        }
    }

    pub fn bench(&self) -> Bench<'_> {
        Bench {
            explainers: self.explainers(),
            data: &self.data.instances,
            split: &self.data.split,
            domain: self.domain(),
        }
    }
}
