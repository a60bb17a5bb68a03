//! Corpus-level caption metrics: BLEU-1..4, METEOR, ROUGE-L and CIDEr-D.
//!
//! Every scorer takes aligned candidate/reference lists (one reference per
//! case). Per-case work is reduced in list order, so callers that want
//! order-independent floating point results should sort pairs by case id
//! before scoring.

mod bleu;
mod cider;
mod meteor;
mod rouge;

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bleu::{bleu, bleu_upto_4};
pub use cider::{cider, NGramStats, CIDER_SIGMA};
pub use meteor::{meteor, meteor_case, MeteorAlignment, METEOR_ALPHA, METEOR_BETA, METEOR_GAMMA};
pub use rouge::{lcs_len, rouge_l, rouge_l_case, ROUGE_L_BETA};

use crate::text::tokenize;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("candidate list is empty")]
    Empty,
    #[error("{candidates} candidates but {references} references")]
    LengthMismatch { candidates: usize, references: usize },
    #[error("BLEU order must be in 1..=4, got {0}")]
    InvalidOrder(usize),
}

/// A normalized token list. Never contains empty tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TokenSequence(Vec<String>);

impl TokenSequence {
    /// Tokenizes raw text (lowercase, whitespace split, edge punctuation stripped).
    pub fn from_text(text: &str) -> Self {
        TokenSequence(tokenize(text))
    }

    /// Wraps already-tokenized words, dropping empty strings.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        TokenSequence(
            tokens
                .into_iter()
                .map(Into::into)
                .filter(|t: &String| !t.is_empty())
                .collect(),
        )
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<&str> for TokenSequence {
    fn from(text: &str) -> Self {
        TokenSequence::from_text(text)
    }
}

pub(crate) fn check_aligned(
    candidates: &[TokenSequence],
    references: &[TokenSequence],
) -> Result<(), MetricsError> {
    if candidates.len() != references.len() {
        return Err(MetricsError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

/// Multiset of the n-grams of one fixed order.
pub(crate) fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

pub(crate) fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Corpus-level scores in the usual report-generation column order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub n_cases: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: [&'static str; 8] = [
        "bleu1", "bleu2", "bleu3", "bleu4", "meteor", "rouge_l", "cider", "n_cases",
    ];

    pub fn csv_row(&self) -> [String; 8] {
        [
            self.bleu1.to_string(),
            self.bleu2.to_string(),
            self.bleu3.to_string(),
            self.bleu4.to_string(),
            self.meteor.to_string(),
            self.rouge_l.to_string(),
            self.cider.to_string(),
            self.n_cases.to_string(),
        ]
    }

    /// Header line plus one row, 4 decimals per score.
    pub fn to_table(&self) -> String {
        format!(
            "{:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}\n{:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7}\n",
            "BLEU1", "BLEU2", "BLEU3", "BLEU4", "METEOR", "ROUGE-L", "CIDEr", "N",
            self.bleu1, self.bleu2, self.bleu3, self.bleu4, self.meteor, self.rouge_l, self.cider, self.n_cases,
        )
    }

    pub fn is_finite(&self) -> bool {
        [
            self.bleu1, self.bleu2, self.bleu3, self.bleu4, self.meteor, self.rouge_l, self.cider,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_table())
    }
}

/// Runs every metric over the same aligned lists.
pub fn score_all(
    candidates: &[TokenSequence],
    references: &[TokenSequence],
) -> Result<MetricsReport, MetricsError> {
    check_aligned(candidates, references)?;
    let [bleu1, bleu2, bleu3, bleu4] = bleu_upto_4(candidates, references)?;
    Ok(MetricsReport {
        bleu1,
        bleu2,
        bleu3,
        bleu4,
        meteor: meteor(candidates, references)?,
        rouge_l: rouge_l(candidates, references)?,
        cider: cider(candidates, references)?,
        n_cases: candidates.len(),
    })
}
