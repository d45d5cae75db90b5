//! Dataset loading, encoding and splitting.
//!
//! Both domains reduce to the same representation: an [`Instance`] is a vector
//! of discrete feature values plus a binary label. For tabular data the values
//! are category indices into a [`TabularSchema`]; for text they are token ids
//! into an [`EmbeddingTable`], one per position.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

/// Token id of the all-zeros padding vector. Out-of-vocabulary tokens map here.
pub const PADDING: usize = 0;
pub const PADDING_TOKEN: &str = "<pad>";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}: file is empty")]
    EmptyFile(PathBuf),
    #[error("line {line}: expected {expected} columns, found {found}")]
    MalformedRow {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: header does not match schema ({reason})")]
    HeaderMismatch { line: usize, reason: String },
    #[error("line {line}: unknown category {value:?} for feature {feature:?}")]
    UnknownCategory {
        line: usize,
        feature: String,
        value: String,
    },
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: expected {expected} dimensions, found {found}")]
    InconsistentDimension {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: duplicate token {token:?}")]
    DuplicateToken { line: usize, token: String },
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("dataset has {0} instances; splitting needs at least 10")]
    DatasetTooSmall(usize),
    #[error("split ratios must be non-negative and sum to 1")]
    InvalidRatios,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn read(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Text,
    Tabular,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Text => "text",
            Domain::Tabular => "tabular",
        })
    }
}

impl std::str::FromStr for Domain {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(Domain::Text),
            "tabular" => Ok(Domain::Tabular),
            other => Err(format!("unknown domain {other:?}")),
        }
    }
}

/// One classifiable example.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instance {
    pub features: Vec<usize>,
    pub label: usize,
}

impl Instance {
    pub fn new(features: Vec<usize>, label: usize) -> Self {
        Self { features, label }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feature {
    pub name: String,
    pub values: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TabularSchema {
    pub features: Vec<Feature>,
}

impl TabularSchema {
    pub fn new(features: Vec<Feature>) -> Result<Self, DataError> {
        let schema = Self { features };
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_json_file(path: &Path) -> Result<Self, DataError> {
        let schema: TabularSchema = serde_json::from_str(&read(path)?)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.features.is_empty() {
            return Err(DataError::InvalidSchema("no features".into()));
        }
        let mut names = std::collections::HashSet::new();
        for f in &self.features {
            if !names.insert(f.name.as_str()) {
                return Err(DataError::InvalidSchema(format!("duplicate feature {:?}", f.name)));
            }
            if f.name == "label" {
                return Err(DataError::InvalidSchema("feature may not be named \"label\"".into()));
            }
            if f.values.len() < 2 {
                return Err(DataError::InvalidSchema(format!(
                    "feature {:?} needs at least 2 categories",
                    f.name
                )));
            }
            let mut seen = std::collections::HashSet::new();
            for v in &f.values {
                if !seen.insert(v.as_str()) {
                    return Err(DataError::InvalidSchema(format!(
                        "duplicate category {v:?} in feature {:?}",
                        f.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.features.iter().map(|f| f.values.len()).collect()
    }

    /// Width of the one-hot encoding.
    pub fn one_hot_width(&self) -> usize {
        self.features.iter().map(|f| f.values.len()).sum()
    }

    pub fn encode(&self, labels: &[&str]) -> Result<Vec<usize>, DataError> {
        if labels.len() != self.features.len() {
            return Err(DataError::MalformedRow {
                line: 0,
                expected: self.features.len(),
                found: labels.len(),
            });
        }
        labels
            .iter()
            .zip(&self.features)
            .map(|(v, f)| {
                f.values
                    .iter()
                    .position(|c| c == v)
                    .ok_or_else(|| DataError::UnknownCategory {
                        line: 0,
                        feature: f.name.clone(),
                        value: v.to_string(),
                    })
            })
            .collect()
    }

    pub fn decode<'a>(&'a self, values: &[usize]) -> Vec<&'a str> {
        values
            .iter()
            .zip(&self.features)
            .map(|(&v, f)| f.values[v].as_str())
            .collect()
    }
}

/// Reads a CSV whose header is the schema's feature names followed by `label`.
pub fn load_tabular(path: &Path, schema: &TabularSchema) -> Result<Vec<Instance>, DataError> {
    let text = read(path)?;
    if text.trim().is_empty() {
        return Err(DataError::EmptyFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let expected = schema.len() + 1;
    let header = reader.headers()?.clone();
    if header.len() != expected {
        return Err(DataError::HeaderMismatch {
            line: 1,
            reason: format!("expected {expected} columns, found {}", header.len()),
        });
    }
    for (h, f) in header.iter().zip(&schema.features) {
        if h.trim() != f.name {
            return Err(DataError::HeaderMismatch {
                line: 1,
                reason: format!("column {h:?} where {:?} was expected", f.name),
            });
        }
    }
    if header.get(schema.len()).map(str::trim) != Some("label") {
        return Err(DataError::HeaderMismatch {
            line: 1,
            reason: "last column must be \"label\"".into(),
        });
    }

    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 2;
        if record.len() != expected {
            return Err(DataError::MalformedRow {
                line,
                expected,
                found: record.len(),
            });
        }
        let mut features = Vec::with_capacity(schema.len());
        for (value, f) in record.iter().zip(&schema.features) {
            let value = value.trim();
            let idx = f.values.iter().position(|c| c == value).ok_or_else(|| {
                DataError::UnknownCategory {
                    line,
                    feature: f.name.clone(),
                    value: value.to_string(),
                }
            })?;
            features.push(idx);
        }
        let label = parse_label(record.get(schema.len()).unwrap_or(""), line)?;
        out.push(Instance { features, label });
    }
    if out.is_empty() {
        return Err(DataError::EmptyFile(path.to_path_buf()));
    }
    Ok(out)
}

fn parse_label(s: &str, line: usize) -> Result<usize, DataError> {
    match s.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(DataError::MalformedLine {
            line,
            reason: format!("label must be 0 or 1, found {other:?}"),
        }),
    }
}

/// Pretrained word vectors. Row [`PADDING`] is the all-zeros padding vector.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    tokens: Vec<String>,
    dim: usize,
    vectors: Vec<f64>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    /// Builds a table from `(token, vector)` rows; padding is prepended.
    pub fn from_rows(rows: Vec<(String, Vec<f64>)>) -> Result<Self, DataError> {
        let dim = rows.first().map(|r| r.1.len()).unwrap_or(0);
        if dim == 0 {
            return Err(DataError::MalformedLine {
                line: 1,
                reason: "embedding dimension must be at least 1".into(),
            });
        }
        let mut tokens = vec![PADDING_TOKEN.to_string()];
        let mut vectors = vec![0.0; dim];
        let mut index = HashMap::new();
        index.insert(PADDING_TOKEN.to_string(), PADDING);
        for (i, (token, v)) in rows.into_iter().enumerate() {
            if v.len() != dim {
                return Err(DataError::InconsistentDimension {
                    line: i + 1,
                    expected: dim,
                    found: v.len(),
                });
            }
            if index.contains_key(&token) {
                return Err(DataError::DuplicateToken { line: i + 1, token });
            }
            index.insert(token.clone(), tokens.len());
            tokens.push(token);
            vectors.extend(v);
        }
        Ok(Self {
            tokens,
            dim,
            vectors,
            index,
        })
    }

    /// Vocabulary size including padding.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, id: usize) -> &[f64] {
        &self.vectors[id * self.dim..(id + 1) * self.dim]
    }

    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Lowercases and whitespace-tokenizes; unknown tokens become [`PADDING`].
    pub fn encode(&self, sentence: &str) -> Vec<usize> {
        sentence
            .to_lowercase()
            .split_whitespace()
            .map(|t| match self.lookup(t) {
                Some(PADDING) | None => PADDING,
                Some(id) => id,
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .map(|&t| self.token(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn cosine(&self, a: usize, b: usize) -> f64 {
        cosine(self.vector(a), self.vector(b))
    }

    /// The `k` most cosine-similar tokens to `id`, excluding itself and padding,
    /// most similar first (ties by lower id).
    pub fn nearest(&self, id: usize, k: usize) -> Vec<(usize, f64)> {
        let query = self.vector(id);
        let qn = norm(query);
        let mut scored: Vec<(usize, f64)> = (1..self.len())
            .filter(|&j| j != id)
            .map(|j| {
                let v = self.vector(j);
                let denom = qn * norm(v);
                let s = if denom > 0.0 { dot(query, v) / denom } else { 0.0 };
                (j, s)
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        scored
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d > 0.0 {
        dot(a, b) / d
    } else {
        0.0
    }
}

/// Reads word2vec-style text vectors: `token v1 v2 ... vD` per line.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable, DataError> {
    let text = read(path)?;
    let mut rows = Vec::new();
    let mut dim = None;
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().unwrap_or_default().to_string();
        let values = parts
            .map(|p| {
                p.parse::<f64>().map_err(|_| DataError::MalformedLine {
                    line: line_no,
                    reason: format!("not a number: {p:?}"),
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        match dim {
            None if values.is_empty() => {
                return Err(DataError::MalformedLine {
                    line: line_no,
                    reason: "token has no vector".into(),
                })
            }
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(DataError::InconsistentDimension {
                    line: line_no,
                    expected: d,
                    found: values.len(),
                })
            }
            Some(_) => {}
        }
        if token == PADDING_TOKEN || !seen.insert(token.clone()) {
            return Err(DataError::DuplicateToken {
                line: line_no,
                token,
            });
        }
        rows.push((token, values));
    }
    if rows.is_empty() {
        return Err(DataError::EmptyFile(path.to_path_buf()));
    }
    EmbeddingTable::from_rows(rows)
}

/// Reads `label<TAB>sentence` lines.
pub fn load_text(path: &Path, embeddings: &EmbeddingTable) -> Result<Vec<Instance>, DataError> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (label, sentence) = line.split_once('\t').ok_or_else(|| DataError::MalformedLine {
            line: line_no,
            reason: "missing tab between label and sentence".into(),
        })?;
        let label = parse_label(label, line_no)?;
        let tokens = embeddings.encode(sentence);
        if tokens.is_empty() {
            return Err(DataError::MalformedLine {
                line: line_no,
                reason: "empty sentence".into(),
            });
        }
        out.push(Instance {
            features: tokens,
            label,
        });
    }
    if out.is_empty() {
        return Err(DataError::EmptyFile(path.to_path_buf()));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            validation: 0.1,
            test: 0.2,
        }
    }
}

/// Index partition of a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Shuffles `0..n` and partitions it. Validation and test sizes are floored;
/// the remainder goes to train.
pub fn split(n: usize, ratios: SplitRatios, seed: u64) -> Result<DatasetSplit, DataError> {
    if n < 10 {
        return Err(DataError::DatasetTooSmall(n));
    }
    let SplitRatios {
        train,
        validation,
        test,
    } = ratios;
    if train < 0.0 || validation < 0.0 || test < 0.0 || ((train + validation + test) - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidRatios);
    }
    let n_val = (validation * n as f64 + 1e-9).floor() as usize;
    let n_test = (test * n as f64 + 1e-9).floor() as usize;
    let n_train = n - n_val - n_test;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::derive(seed, "split")));
    Ok(DatasetSplit {
        train: order[..n_train].to_vec(),
        validation: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
        seed,
    })
}

/// Human-readable view of a feature space, for rendering instances and
/// explanation payloads.
#[derive(Clone, Debug)]
pub enum FeatureSpace {
    Tabular(TabularSchema),
    Text(Arc<EmbeddingTable>),
}

impl FeatureSpace {
    pub fn domain(&self) -> Domain {
        match self {
            FeatureSpace::Tabular(_) => Domain::Tabular,
            FeatureSpace::Text(_) => Domain::Text,
        }
    }

    /// `feature = value` for tabular data, the token itself for text.
    pub fn describe(&self, feature: usize, value: usize) -> String {
        match self {
            FeatureSpace::Tabular(s) => {
                format!("{} = {}", s.features[feature].name, s.features[feature].values[value])
            }
            FeatureSpace::Text(e) => e.token(value).to_string(),
        }
    }

    pub fn feature_name(&self, feature: usize) -> String {
        match self {
            FeatureSpace::Tabular(s) => s.features[feature].name.clone(),
            FeatureSpace::Text(_) => format!("#{feature}"),
        }
    }

    pub fn render(&self, features: &[usize]) -> String {
        match self {
            FeatureSpace::Tabular(s) => s
                .decode(features)
                .iter()
                .zip(&s.features)
                .map(|(v, f)| format!("{}={}", f.name, v))
                .collect::<Vec<_>>()
                .join(", "),
            FeatureSpace::Text(e) => e.decode(features),
        }
    }
}
