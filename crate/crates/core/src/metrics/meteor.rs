//! METEOR with exact and stemmed matching stages (no synonym stage).

use rust_stemmers::{Algorithm, Stemmer};

use super::{check_aligned, mean, MetricsError, TokenSequence};

/// Precision/recall balance of the harmonic mean.
pub const METEOR_ALPHA: f64 = 0.9;
/// Exponent of the fragmentation penalty.
pub const METEOR_BETA: f64 = 3.0;
/// Maximum fragmentation penalty.
pub const METEOR_GAMMA: f64 = 0.5;

/// A word alignment between candidate and reference positions.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MeteorAlignment {
    /// `(candidate_index, reference_index)`, sorted by candidate index.
    pub pairs: Vec<(usize, usize)>,
}

impl MeteorAlignment {
    pub fn matches(&self) -> usize {
        self.pairs.len()
    }

    /// Runs of pairs contiguous in both candidate and reference.
    pub fn chunks(&self) -> usize {
        let mut chunks = 0;
        let mut prev: Option<(usize, usize)> = None;
        for &(i, j) in &self.pairs {
            match prev {
                Some((pi, pj)) if i == pi + 1 && j == pj + 1 => {}
                _ => chunks += 1,
            }
            prev = Some((i, j));
        }
        chunks
    }
}

/// Aligns tokens whose keys are equal, taking the longest still-unmatched
/// contiguous run first (ties: earliest candidate end, then earliest reference
/// end). Repeats until no equal unmatched pair remains, so the match count is
/// always maximal for the stage.
fn align_stage(
    cand_keys: &[&str],
    ref_keys: &[&str],
    cand_used: &mut [bool],
    ref_used: &mut [bool],
    pairs: &mut Vec<(usize, usize)>,
) {
    let (m, n) = (cand_keys.len(), ref_keys.len());
    let mut run = vec![0usize; (m + 1) * (n + 1)];
    loop {
        let mut best = (0usize, 0usize, 0usize);
        for i in 0..m {
            for j in 0..n {
                let v = if !cand_used[i] && !ref_used[j] && cand_keys[i] == ref_keys[j] {
                    run[i * (n + 1) + j] + 1
                } else {
                    0
                };
                run[(i + 1) * (n + 1) + j + 1] = v;
                if v > best.0 {
                    best = (v, i, j);
                }
            }
        }
        let (len, end_i, end_j) = best;
        if len == 0 {
            return;
        }
        for t in 0..len {
            let (i, j) = (end_i + 1 - len + t, end_j + 1 - len + t);
            cand_used[i] = true;
            ref_used[j] = true;
            pairs.push((i, j));
        }
    }
}

pub(crate) fn align(candidate: &TokenSequence, reference: &TokenSequence, stemmer: &Stemmer) -> MeteorAlignment {
    let cand: Vec<&str> = candidate.tokens().iter().map(String::as_str).collect();
    let refs: Vec<&str> = reference.tokens().iter().map(String::as_str).collect();
    let mut cand_used = vec![false; cand.len()];
    let mut ref_used = vec![false; refs.len()];
    let mut pairs = Vec::new();
    align_stage(&cand, &refs, &mut cand_used, &mut ref_used, &mut pairs);

    let cand_stems: Vec<String> = cand.iter().map(|w| stemmer.stem(w).into_owned()).collect();
    let ref_stems: Vec<String> = refs.iter().map(|w| stemmer.stem(w).into_owned()).collect();
    let cs: Vec<&str> = cand_stems.iter().map(String::as_str).collect();
    let rs: Vec<&str> = ref_stems.iter().map(String::as_str).collect();
    align_stage(&cs, &rs, &mut cand_used, &mut ref_used, &mut pairs);

    pairs.sort_unstable();
    MeteorAlignment { pairs }
}

pub(crate) fn english_stemmer() -> Stemmer {
    Stemmer::create(Algorithm::English)
}

fn score_alignment(alignment: &MeteorAlignment, cand_len: usize, ref_len: usize) -> f64 {
    let matches = alignment.matches();
    if matches == 0 {
        return 0.0;
    }
    let precision = matches as f64 / cand_len as f64;
    let recall = matches as f64 / ref_len as f64;
    let fmean = precision * recall / (METEOR_ALPHA * precision + (1.0 - METEOR_ALPHA) * recall);
    let frag = alignment.chunks() as f64 / matches as f64;
    let penalty = METEOR_GAMMA * frag.powf(METEOR_BETA);
    fmean * (1.0 - penalty)
}

/// METEOR for one pair.
pub fn meteor_case(candidate: &TokenSequence, reference: &TokenSequence) -> f64 {
    let stemmer = english_stemmer();
    let alignment = align(candidate, reference, &stemmer);
    score_alignment(&alignment, candidate.len(), reference.len())
}

/// Mean per-case METEOR.
pub fn meteor(candidates: &[TokenSequence], references: &[TokenSequence]) -> Result<f64, MetricsError> {
    check_aligned(candidates, references)?;
    let stemmer = english_stemmer();
    Ok(mean(candidates.iter().zip(references).map(|(c, r)| {
        score_alignment(&align(c, r, &stemmer), c.len(), r.len())
    })))
}
