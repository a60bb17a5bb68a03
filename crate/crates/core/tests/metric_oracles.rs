mod oracles;

use mocoll_core::metrics::{
    bleu, bleu_upto_4, cider, lcs_len, meteor, meteor_case, rouge_l, score_all, TokenSequence,
};
use proptest::prelude::*;

use oracles::Golden;

const TOL: f64 = 1e-9;

fn seqs(texts: &[String]) -> Vec<TokenSequence> {
    texts.iter().map(|t| TokenSequence::from_text(t)).collect()
}

fn close(name: &str, got: f64, want: f64) {
    assert!((got - want).abs() <= TOL, "{name}: got {got}, want {want}");
}

#[test]
fn golden_fixture_matches_frozen_values() {
    let g = Golden::load();
    let (c, r) = (seqs(&g.candidates), seqs(&g.references));
    let report = score_all(&c, &r).unwrap();
    close("bleu1", report.bleu1, g.get("bleu1"));
    close("bleu2", report.bleu2, g.get("bleu2"));
    close("bleu3", report.bleu3, g.get("bleu3"));
    close("bleu4", report.bleu4, g.get("bleu4"));
    close("rouge_l", report.rouge_l, g.get("rouge_l"));
    close("meteor", report.meteor, g.get("meteor"));
    close("cider", report.cider, g.get("cider"));
    assert_eq!(report.n_cases, 6);
}

#[test]
fn golden_fixture_matches_in_process_oracles() {
    let g = Golden::load();
    let pairs = g.pairs();
    let (c, r) = (seqs(&g.candidates), seqs(&g.references));
    for (k, got) in bleu_upto_4(&c, &r).unwrap().into_iter().enumerate() {
        close(&format!("bleu{}", k + 1), got, oracles::bleu(&pairs, k + 1));
    }
    close("rouge_l", rouge_l(&c, &r).unwrap(), oracles::rouge_l(&pairs));
    close("meteor", meteor(&c, &r).unwrap(), oracles::meteor(&pairs));
    close("cider", cider(&c, &r).unwrap(), oracles::cider(&pairs));
}

#[test]
fn per_case_meteor_matches_frozen_values() {
    let g = Golden::load();
    for (i, (c, r)) in g.candidates.iter().zip(&g.references).enumerate() {
        let want = g.value["per_case"][i]["meteor"].as_f64().unwrap();
        close("meteor", meteor_case(&TokenSequence::from_text(c), &TokenSequence::from_text(r)), want);
    }
}

#[test]
fn identity_is_exact() {
    let g = Golden::load();
    let r = seqs(&g.references);
    let report = score_all(&r, &r).unwrap();
    assert_eq!([report.bleu1, report.bleu2, report.bleu3, report.bleu4], [1.0; 4]);
    assert_eq!(report.rouge_l, 1.0);
    assert_eq!(report.cider, 10.0);
}

#[test]
fn tokenizer_oracle_agrees() {
    let g = Golden::load();
    for text in g.candidates.iter().chain(&g.references) {
        assert_eq!(TokenSequence::from_text(text).tokens(), oracles::words(text).as_slice());
    }
}

#[test]
fn cider_three_case_fixture() {
    let texts = [
        ("heart size is normal", "the heart size is normal"),
        ("no pleural effusion or pneumothorax", "no effusion or pneumothorax seen"),
        ("mild degenerative changes of the spine", "degenerative changes of the thoracic spine"),
    ];
    let pairs: Vec<_> = texts.iter().map(|(c, r)| (oracles::words(c), oracles::words(r))).collect();
    let c: Vec<_> = texts.iter().map(|t| TokenSequence::from_text(t.0)).collect();
    let r: Vec<_> = texts.iter().map(|t| TokenSequence::from_text(t.1)).collect();
    close("cider", cider(&c, &r).unwrap(), oracles::cider(&pairs));
}

const VOCAB: &[&str] = &[
    "the", "lungs", "are", "clear", "no", "effusion", "effusions", "heart", "is", "normal", "size", "mild", "edema",
    "noted", "changes", "changed",
];

fn token_seq(max: usize) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(VOCAB).prop_map(String::from), 0..max)
}

fn corpus(max_cases: usize, max_len: usize) -> impl Strategy<Value = Vec<(Vec<String>, Vec<String>)>> {
    prop::collection::vec((token_seq(max_len), token_seq(max_len)), 1..max_cases)
}

fn split(pairs: &[(Vec<String>, Vec<String>)]) -> (Vec<TokenSequence>, Vec<TokenSequence>) {
    pairs
        .iter()
        .map(|(c, r)| (TokenSequence::from_tokens(c.iter()), TokenSequence::from_tokens(r.iter())))
        .unzip()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn lcs_agrees_with_table_oracle(a in token_seq(14), b in token_seq(14)) {
        prop_assert_eq!(lcs_len(&a, &b), oracles::lcs(&a, &b));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn metrics_match_oracles_on_random_corpora(pairs in corpus(5, 8)) {
        let (c, r) = split(&pairs);
        for n in 1..=4 {
            let got = bleu(&c, &r, n).unwrap();
            prop_assert!((got - oracles::bleu(&pairs, n)).abs() <= TOL);
        }
        prop_assert!((rouge_l(&c, &r).unwrap() - oracles::rouge_l(&pairs)).abs() <= TOL);
        prop_assert!((cider(&c, &r).unwrap() - oracles::cider(&pairs)).abs() <= TOL);
    }

    #[test]
    fn meteor_never_beats_exhaustive_alignment(c in token_seq(7), r in token_seq(7)) {
        let got = meteor_case(&TokenSequence::from_tokens(c.iter()), &TokenSequence::from_tokens(r.iter()));
        let best = oracles::meteor_case(&c, &r);
        // equal match counts; greedy chunking can only be coarser
        prop_assert!(got <= best + TOL);
        prop_assert_eq!(got == 0.0, best == 0.0);
    }

    #[test]
    fn scores_are_bounded(pairs in corpus(6, 10)) {
        let (c, r) = split(&pairs);
        let report = score_all(&c, &r).unwrap();
        for v in [report.bleu1, report.bleu2, report.bleu3, report.bleu4, report.meteor, report.rouge_l] {
            prop_assert!((0.0..=1.0).contains(&v), "{v}");
        }
        prop_assert!((0.0..=10.0 + TOL).contains(&report.cider));
        prop_assert!(report.is_finite());
    }

    #[test]
    fn joint_permutation_leaves_scores_unchanged(pairs in corpus(6, 10), seed in any::<u64>()) {
        let mut shuffled = pairs.clone();
        let len = shuffled.len();
        for i in (1..len).rev() {
            let j = (seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) >> 33) as usize % (i + 1);
            shuffled.swap(i, j);
        }
        let (c, r) = split(&pairs);
        let (cs, rs) = split(&shuffled);
        let a = score_all(&c, &r).unwrap();
        let b = score_all(&cs, &rs).unwrap();
        prop_assert_eq!([a.bleu1, a.bleu2, a.bleu3, a.bleu4], [b.bleu1, b.bleu2, b.bleu3, b.bleu4]);
        prop_assert!((a.rouge_l - b.rouge_l).abs() <= 1e-12);
        prop_assert!((a.meteor - b.meteor).abs() <= 1e-12);
        prop_assert!((a.cider - b.cider).abs() <= 1e-12);
    }

    #[test]
    fn oov_substitution_never_raises_bleu1(reference in token_seq(10), pos in any::<prop::sample::Index>()) {
        prop_assume!(!reference.is_empty());
        let i = pos.index(reference.len());
        let mut degraded = reference.clone();
        degraded[i] = "zzzunseen".into();
        let r = vec![TokenSequence::from_tokens(reference.iter())];
        let before = bleu(&r, &r, 1).unwrap();
        let after = bleu(&[TokenSequence::from_tokens(degraded.iter())], &r, 1).unwrap();
        prop_assert!(after <= before);
    }

    #[test]
    fn identity_bleu_and_rouge_are_one(refs in prop::collection::vec(token_seq(9), 1..5)) {
        prop_assume!(refs.iter().all(|r| r.len() >= 4));
        let r: Vec<_> = refs.iter().map(|t| TokenSequence::from_tokens(t.iter())).collect();
        prop_assert_eq!(bleu_upto_4(&r, &r).unwrap(), [1.0; 4]);
        prop_assert_eq!(rouge_l(&r, &r).unwrap(), 1.0);
    }
}

#[test]
fn mismatched_lengths_error() {
    let a = vec![TokenSequence::from_text("a b")];
    assert!(score_all(&a, &[]).is_err());
    assert!(score_all(&[], &[]).is_err());
}
