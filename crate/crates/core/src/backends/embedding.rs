use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EmbeddingError {
    #[error("cannot read {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("malformed embedding record on line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("{case_id}: expected dimension {expected}, got {got}")]
    DimensionMismatch {
        case_id: String,
        expected: usize,
        got: usize,
    },
    #[error("{0}: vector has non-finite components")]
    NonFinite(String),
    #[error("duplicate embedding for {0}")]
    Duplicate(String),
    #[error("embedding index is empty")]
    Empty,
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingRecord {
    case_id: String,
    vector: Vec<f64>,
}

/// Precomputed image embeddings keyed by case id (or image reference).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingIndex {
    dimension: usize,
    entries: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingIndex {
    pub fn new(dimension: usize) -> Self {
        EmbeddingIndex {
            dimension,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: impl Into<String>, vector: Vec<f64>) -> Result<(), EmbeddingError> {
        let key = key.into();
        if self.entries.is_empty() && self.dimension == 0 {
            self.dimension = vector.len();
        }
        if vector.len() != self.dimension || vector.is_empty() {
            return Err(EmbeddingError::DimensionMismatch {
                case_id: key,
                expected: self.dimension,
                got: vector.len(),
            });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite(key));
        }
        if self.entries.contains_key(&key) {
            return Err(EmbeddingError::Duplicate(key));
        }
        self.entries.insert(key, vector);
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.entries.get(key).map(Vec::as_slice)
    }

    /// Entries in ascending key order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(File::create(path)?);
        for (case_id, vector) in &self.entries {
            let rec = EmbeddingRecord {
                case_id: case_id.clone(),
                vector: vector.clone(),
            };
            writeln!(out, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
        }
        out.flush()
    }
}

/// Reads `{"case_id": ..., "vector": [...]}` lines. The first record fixes
/// the dimension.
pub fn load_embedding_index(path: &Path) -> Result<EmbeddingIndex, EmbeddingError> {
    let file = File::open(path).map_err(|e| EmbeddingError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut index = EmbeddingIndex::new(0);
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| EmbeddingError::Io {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingRecord = serde_json::from_str(&line).map_err(|e| EmbeddingError::Malformed {
            line: i + 1,
            reason: e.to_string(),
        })?;
        index.insert(rec.case_id, rec.vector)?;
    }
    if index.is_empty() {
        return Err(EmbeddingError::Empty);
    }
    Ok(index)
}

/// `a·b / (|a||b|)`, or 0 when either vector has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, EmbeddingError> {
    if a.len() != b.len() {
        return Err(EmbeddingError::DimensionMismatch {
            case_id: "<query>".into(),
            expected: a.len(),
            got: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}
