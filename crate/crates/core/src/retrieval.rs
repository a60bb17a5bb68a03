//! Few-shot caption selection for in-context learning: uniform random
//! sampling, or nearest neighbours by image-embedding cosine similarity.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{cosine_similarity, EmbeddingError, EmbeddingIndex};
use crate::corpus::CaptionedCase;
use crate::seed::keyed_rng;

/// Few-shot examples given to the agent by default.
pub const DEFAULT_FEW_SHOT_K: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum RetrievalError {
    #[error("no embedding for case {0}")]
    MissingEmbedding(String),
    #[error("similarity strategy needs an embedding index")]
    NoIndex,
    #[error("example pool is empty but k = {0}")]
    EmptyPool(usize),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FewShotStrategy {
    Random,
    #[default]
    Similarity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FewShotConfig {
    pub k: usize,
    pub strategy: FewShotStrategy,
    pub seed: u64,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        FewShotConfig {
            k: DEFAULT_FEW_SHOT_K,
            strategy: FewShotStrategy::Similarity,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub case_id: String,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleSet {
    pub examples: Vec<Example>,
    pub strategy_used: FewShotStrategy,
}

impl ExampleSet {
    pub fn empty(strategy_used: FewShotStrategy) -> Self {
        ExampleSet {
            examples: Vec::new(),
            strategy_used,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// The case's own entry if present, otherwise the mean of its image entries.
pub fn case_embedding(case: &CaptionedCase, index: &EmbeddingIndex) -> Result<Vec<f64>, RetrievalError> {
    if let Some(v) = index.get(&case.case_id) {
        return Ok(v.to_vec());
    }
    let mut sum = vec![0.0; index.dimension()];
    for image in &case.image_refs {
        let v = index
            .get(image)
            .ok_or_else(|| RetrievalError::MissingEmbedding(case.case_id.clone()))?;
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
    }
    let n = case.image_refs.len().max(1) as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

fn by_similarity_then_id(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Every index entry ordered by descending cosine similarity to `query`,
/// ties broken by ascending key.
pub fn rank_pool(query: &[f64], index: &EmbeddingIndex) -> Result<Vec<(String, f64)>, RetrievalError> {
    let mut ranked = index
        .iter()
        .map(|(id, v)| Ok((id.to_string(), cosine_similarity(query, v)?)))
        .collect::<Result<Vec<_>, EmbeddingError>>()?;
    ranked.sort_by(by_similarity_then_id);
    Ok(ranked)
}

/// Picks up to `config.k` captions from `pool`, never including the query case.
pub fn select_examples(
    query: &CaptionedCase,
    pool: &[CaptionedCase],
    config: &FewShotConfig,
    index: Option<&EmbeddingIndex>,
) -> Result<ExampleSet, RetrievalError> {
    if config.k == 0 {
        return Ok(ExampleSet::empty(config.strategy));
    }
    if pool.is_empty() {
        return Err(RetrievalError::EmptyPool(config.k));
    }
    let mut candidates: Vec<&CaptionedCase> = pool.iter().filter(|c| c.case_id != query.case_id).collect();
    candidates.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    let k = config.k.min(candidates.len());

    let chosen: Vec<&CaptionedCase> = match config.strategy {
        FewShotStrategy::Random => {
            let mut rng = keyed_rng(config.seed, &["few-shot", &query.case_id]);
            rand::seq::index::sample(&mut rng, candidates.len(), k)
                .into_iter()
                .map(|i| candidates[i])
                .collect()
        }
        FewShotStrategy::Similarity => {
            let index = index.ok_or(RetrievalError::NoIndex)?;
            let q = case_embedding(query, index)?;
            let mut scored = Vec::with_capacity(candidates.len());
            for (i, c) in candidates.iter().enumerate() {
                let v = case_embedding(c, index)?;
                scored.push((i, cosine_similarity(&q, &v)?));
            }
            // candidates are id-sorted, so index order is id order
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            scored.into_iter().take(k).map(|(i, _)| candidates[i]).collect()
        }
    };
    Ok(ExampleSet {
        examples: chosen
            .into_iter()
            .map(|c| Example {
                case_id: c.case_id.clone(),
                caption: c.report_text.clone(),
            })
            .collect(),
        strategy_used: config.strategy,
    })
}
