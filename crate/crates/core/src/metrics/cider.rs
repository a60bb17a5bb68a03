//! CIDEr-D: clipped TF-IDF cosine over n-gram orders 1..4 with a Gaussian
//! length penalty, scaled by 10.

use std::collections::{BTreeMap, HashMap};

use super::{check_aligned, mean, ngram_counts, MetricsError, TokenSequence};

/// Standard deviation of the length penalty, in tokens.
pub const CIDER_SIGMA: f64 = 6.0;
const MAX_ORDER: usize = 4;

/// Document frequencies of one n-gram order over the reference corpus.
#[derive(Debug, Clone)]
pub struct NGramStats {
    pub order: usize,
    pub n_cases: usize,
    pub doc_frequency: HashMap<Vec<String>, usize>,
}

impl NGramStats {
    pub fn from_references(references: &[TokenSequence], order: usize) -> Self {
        let mut doc_frequency: HashMap<Vec<String>, usize> = HashMap::new();
        for reference in references {
            for gram in ngram_counts(reference.tokens(), order).into_keys() {
                *doc_frequency.entry(gram.to_vec()).or_insert(0) += 1;
            }
        }
        NGramStats {
            order,
            n_cases: references.len(),
            doc_frequency,
        }
    }

    /// `ln(N / max(1, df))`; unseen n-grams get the maximal weight `ln N`.
    pub fn idf(&self, gram: &[String]) -> f64 {
        let df = self.doc_frequency.get(gram).copied().unwrap_or(0).max(1);
        (self.n_cases as f64).ln() - (df as f64).ln()
    }
}

/// TF-IDF vector and its squared norm. Ordered so that sums are reproducible.
fn tfidf<'a>(tokens: &'a [String], stats: &NGramStats) -> (BTreeMap<&'a [String], f64>, f64) {
    let vec: BTreeMap<&[String], f64> = ngram_counts(tokens, stats.order)
        .into_iter()
        .map(|(g, count)| (g, count as f64 * stats.idf(g)))
        .collect();
    let norm_sq = vec.values().map(|v| v * v).sum::<f64>();
    (vec, norm_sq)
}

fn case_score(candidate: &TokenSequence, reference: &TokenSequence, stats: &[NGramStats]) -> f64 {
    let delta = candidate.len() as f64 - reference.len() as f64;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let per_order = stats.iter().map(|s| {
        let (cand_vec, cand_sq) = tfidf(candidate.tokens(), s);
        let (ref_vec, ref_sq) = tfidf(reference.tokens(), s);
        if cand_sq == 0.0 || ref_sq == 0.0 {
            return 0.0;
        }
        let dot: f64 = ref_vec
            .iter()
            .map(|(g, &r)| cand_vec.get(g).map_or(0.0, |&c| c.min(r) * r))
            .sum();
        dot / (cand_sq * ref_sq).sqrt() * penalty
    });
    10.0 * mean(per_order)
}

/// Mean per-case CIDEr-D with document frequencies taken from `references`.
pub fn cider(candidates: &[TokenSequence], references: &[TokenSequence]) -> Result<f64, MetricsError> {
    check_aligned(candidates, references)?;
    let stats: Vec<NGramStats> = (1..=MAX_ORDER)
        .map(|n| NGramStats::from_references(references, n))
        .collect();
    Ok(mean(
        candidates
            .iter()
            .zip(references)
            .map(|(c, r)| case_score(c, r, &stats)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seqs(texts: &[&str]) -> Vec<TokenSequence> {
        texts.iter().map(|t| TokenSequence::from_text(t)).collect()
    }

    #[test]
    fn identity_well_conditioned_is_ten() {
        let refs = seqs(&["a small left effusion is seen", "heart size is normal today", "no focal consolidation here now"]);
        assert_eq!(cider(&refs, &refs).unwrap(), 10.0);
    }

    #[test]
    fn single_case_has_zero_idf() {
        let refs = seqs(&["the lungs are clear"]);
        assert_eq!(cider(&refs, &refs).unwrap(), 0.0);
    }

    #[test]
    fn doc_frequency_bounded_by_cases() {
        let refs = seqs(&["a a a b", "a c", "d"]);
        let stats = NGramStats::from_references(&refs, 1);
        assert!(stats.doc_frequency.values().all(|&df| df <= 3));
        assert_eq!(stats.doc_frequency[&vec!["a".to_string()]], 2);
    }

    #[test]
    fn empty_candidate_scores_zero() {
        let refs = seqs(&["x y z w", "p q r s"]);
        let cands = vec![TokenSequence::default(), refs[1].clone()];
        let got = cider(&cands, &refs).unwrap();
        assert!((got - 5.0).abs() < 1e-12);
    }
}
