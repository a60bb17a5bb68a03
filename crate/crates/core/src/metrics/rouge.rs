use super::{check_aligned, mean, MetricsError, TokenSequence};

/// Recall weight of the LCS F-measure.
pub const ROUGE_L_BETA: f64 = 1.2;

/// Length of the longest common subsequence, two-row DP.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            curr[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// LCS-based F-measure of a single pair.
pub fn rouge_l_case(candidate: &TokenSequence, reference: &TokenSequence) -> f64 {
    let lcs = lcs_len(candidate.tokens(), reference.tokens());
    if lcs == 0 {
        return 0.0;
    }
    let precision = lcs as f64 / candidate.len() as f64;
    let recall = lcs as f64 / reference.len() as f64;
    let beta2 = ROUGE_L_BETA * ROUGE_L_BETA;
    ((1.0 + beta2) * precision * recall) / (recall + beta2 * precision)
}

/// Mean per-case ROUGE-L.
pub fn rouge_l(candidates: &[TokenSequence], references: &[TokenSequence]) -> Result<f64, MetricsError> {
    check_aligned(candidates, references)?;
    Ok(mean(
        candidates
            .iter()
            .zip(references)
            .map(|(c, r)| rouge_l_case(c, r)),
    ))
}
