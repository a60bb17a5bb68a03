use super::{check_aligned, ngram_counts, MetricsError, TokenSequence};

/// Clipped match and total n-gram counts per order, summed over the corpus,
/// plus total candidate and reference lengths.
struct BleuStats {
    matches: [u64; 4],
    totals: [u64; 4],
    cand_len: u64,
    ref_len: u64,
}

fn collect(candidates: &[TokenSequence], references: &[TokenSequence], max_order: usize) -> BleuStats {
    let mut stats = BleuStats {
        matches: [0; 4],
        totals: [0; 4],
        cand_len: 0,
        ref_len: 0,
    };
    for (cand, reference) in candidates.iter().zip(references) {
        stats.cand_len += cand.len() as u64;
        stats.ref_len += reference.len() as u64;
        for n in 1..=max_order {
            let cand_counts = ngram_counts(cand.tokens(), n);
            let ref_counts = ngram_counts(reference.tokens(), n);
            for (gram, &count) in &cand_counts {
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                stats.matches[n - 1] += count.min(clip) as u64;
                stats.totals[n - 1] += count as u64;
            }
        }
    }
    stats
}

impl BleuStats {
    fn brevity_penalty(&self) -> f64 {
        if self.cand_len == 0 {
            0.0
        } else if self.cand_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp()
        }
    }

    /// Cumulative BLEU-n. An order with no candidate n-grams or no matches
    /// makes the geometric mean zero (no smoothing).
    fn score(&self, order: usize) -> f64 {
        let mut log_sum = 0.0;
        for n in 0..order {
            if self.matches[n] == 0 || self.totals[n] == 0 {
                return 0.0;
            }
            log_sum += (self.matches[n] as f64 / self.totals[n] as f64).ln();
        }
        let bp = self.brevity_penalty();
        // exact 1.0 on identity: avoid exp(ln(1)) round-off
        if log_sum == 0.0 {
            return bp;
        }
        bp * (log_sum / order as f64).exp()
    }
}

/// Corpus BLEU with uniform weights over orders `1..=max_order`.
pub fn bleu(
    candidates: &[TokenSequence],
    references: &[TokenSequence],
    max_order: usize,
) -> Result<f64, MetricsError> {
    if !(1..=4).contains(&max_order) {
        return Err(MetricsError::InvalidOrder(max_order));
    }
    check_aligned(candidates, references)?;
    Ok(collect(candidates, references, max_order).score(max_order))
}

/// BLEU-1 through BLEU-4 from a single counting pass.
pub fn bleu_upto_4(
    candidates: &[TokenSequence],
    references: &[TokenSequence],
) -> Result<[f64; 4], MetricsError> {
    check_aligned(candidates, references)?;
    let stats = collect(candidates, references, 4);
    Ok([stats.score(1), stats.score(2), stats.score(3), stats.score(4)])
}
