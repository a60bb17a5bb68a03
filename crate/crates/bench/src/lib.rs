//! Synthetic inputs shared by the benchmarks.

use mocoll_core::backends::EmbeddingIndex;
use mocoll_core::corpus::{CaptionedCase, Split};
use mocoll_core::metrics::TokenSequence;
use mocoll_core::simharness::{generate_world, FindingWorld};

/// Candidate/reference pairs: references are simulated reports, candidates
/// drop every third sentence of them.
pub fn caption_pairs(n: usize) -> (Vec<TokenSequence>, Vec<TokenSequence>) {
    let world = generate_world(&FindingWorld::default(), n).expect("default world is valid");
    let mut cands = Vec::with_capacity(n);
    let mut refs = Vec::with_capacity(n);
    for case in world.captioned_cases() {
        let sentences = mocoll_core::simharness::sentences(&case.report_text);
        let partial: Vec<&str> = sentences.iter().enumerate().filter(|(i, _)| i % 3 != 2).map(|(_, s)| s.as_str()).collect();
        cands.push(TokenSequence::from_text(&partial.join(" ")));
        refs.push(TokenSequence::from_text(&case.report_text));
    }
    (cands, refs)
}

/// A pool of `n` cases with pseudo-random `dim`-dimensional embeddings.
pub fn embedding_pool(n: usize, dim: usize, seed: u64) -> (Vec<CaptionedCase>, EmbeddingIndex) {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let mut next = move || {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    let mut index = EmbeddingIndex::new(dim);
    let mut cases = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("p{i:05}");
        index.insert(id.clone(), (0..dim).map(|_| next()).collect()).expect("dimension matches");
        cases.push(CaptionedCase::new(id.clone(), vec![format!("{id}.png")], format!("report {i}"), Split::Train).expect("valid case"));
    }
    (cases, index)
}
