//! The bundled desk-scale datasets.

use std::path::PathBuf;

use crate::data::{self, DataError, EmbeddingTable, Instance, TabularSchema};

pub fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn tabular_schema() -> Result<TabularSchema, DataError> {
    TabularSchema::from_json_file(&dir().join("adult_schema.json"))
}

pub fn tabular(schema: &TabularSchema) -> Result<Vec<Instance>, DataError> {
    data::load_tabular(&dir().join("adult.csv"), schema)
}

pub fn embeddings() -> Result<EmbeddingTable, DataError> {
    data::load_embeddings(&dir().join("embeddings.txt"))
}

pub fn text(embeddings: &EmbeddingTable) -> Result<Vec<Instance>, DataError> {
    data::load_text(&dir().join("reviews.tsv"), embeddings)
}
