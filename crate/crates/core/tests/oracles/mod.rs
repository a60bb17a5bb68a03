//! Slow, direct reference implementations used to check the library. They
//! favour obviousness over speed and share no code with the crate.
#![allow(dead_code)]

use std::collections::HashSet;

use mocoll_core::backends::EmbeddingIndex;
use rust_stemmers::{Algorithm, Stemmer};
use serde_json::Value;

pub const GOLDEN_JSON: &str = include_str!("../fixtures/golden_metrics.json");

pub struct Golden {
    pub candidates: Vec<String>,
    pub references: Vec<String>,
    pub value: Value,
}

impl Golden {
    pub fn load() -> Self {
        let value: Value = serde_json::from_str(GOLDEN_JSON).unwrap();
        let cases = value["cases"].as_array().unwrap();
        Golden {
            candidates: cases.iter().map(|c| c["candidate"].as_str().unwrap().to_string()).collect(),
            references: cases.iter().map(|c| c["reference"].as_str().unwrap().to_string()).collect(),
            value,
        }
    }

    pub fn get(&self, key: &str) -> f64 {
        self.value[key].as_f64().unwrap()
    }

    pub fn pairs(&self) -> Vec<(Vec<String>, Vec<String>)> {
        self.candidates
            .iter()
            .zip(&self.references)
            .map(|(c, r)| (words(c), words(r)))
            .collect()
    }
}

pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.to_lowercase().split_whitespace() {
        let mut chars: Vec<char> = raw.chars().collect();
        while chars.first().is_some_and(char::is_ascii_punctuation) {
            chars.remove(0);
        }
        while chars.last().is_some_and(char::is_ascii_punctuation) {
            chars.pop();
        }
        if !chars.is_empty() {
            out.push(chars.into_iter().collect());
        }
    }
    out
}

fn ngrams(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n).map(|i| tokens[i..i + n].to_vec()).collect()
}

fn count(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

fn distinct(list: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for g in list {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

pub fn bleu(pairs: &[(Vec<String>, Vec<String>)], order: usize) -> f64 {
    let mut log_p = 0.0;
    for n in 1..=order {
        let (mut matched, mut total) = (0usize, 0usize);
        for (c, r) in pairs {
            let cg = ngrams(c, n);
            let rg = ngrams(r, n);
            for g in distinct(&cg) {
                matched += count(&cg, &g).min(count(&rg, &g));
            }
            total += cg.len();
        }
        if matched == 0 {
            return 0.0;
        }
        log_p += (matched as f64 / total as f64).ln();
    }
    let c: usize = pairs.iter().map(|p| p.0.len()).sum();
    let r: usize = pairs.iter().map(|p| p.1.len()).sum();
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (log_p / order as f64).exp()
}

/// Full-table LCS.
pub fn lcs<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t[a.len()][b.len()]
}

pub fn rouge_l_case(c: &[String], r: &[String]) -> f64 {
    let l = lcs(c, r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, rec) = (l / c.len() as f64, l / r.len() as f64);
    let b2 = 1.2f64 * 1.2;
    (1.0 + b2) * p * rec / (rec + b2 * p)
}

pub fn rouge_l(pairs: &[(Vec<String>, Vec<String>)]) -> f64 {
    pairs.iter().map(|(c, r)| rouge_l_case(c, r)).sum::<f64>() / pairs.len() as f64
}

/// Exhaustive METEOR alignment: most exact matches, then most matches,
/// then fewest chunks.
pub fn meteor_case(c: &[String], r: &[String]) -> f64 {
    let stemmer = Stemmer::create(Algorithm::English);
    let cs: Vec<String> = c.iter().map(|w| stemmer.stem(w).into_owned()).collect();
    let rs: Vec<String> = r.iter().map(|w| stemmer.stem(w).into_owned()).collect();
    let mut best: Option<(usize, usize, isize)> = None;
    let mut pairs = Vec::new();
    let mut used = vec![false; r.len()];
    search(c, r, &cs, &rs, 0, 0, &mut used, &mut pairs, &mut best);
    let (_, m, neg_chunks) = best.unwrap();
    if m == 0 {
        return 0.0;
    }
    let chunks = (-neg_chunks) as f64;
    let (p, rec) = (m as f64 / c.len() as f64, m as f64 / r.len() as f64);
    let fmean = p * rec / (0.9 * p + 0.1 * rec);
    fmean * (1.0 - 0.5 * (chunks / m as f64).powi(3))
}

#[allow(clippy::too_many_arguments)]
fn search(
    c: &[String],
    r: &[String],
    cs: &[String],
    rs: &[String],
    i: usize,
    exact: usize,
    used: &mut [bool],
    pairs: &mut Vec<(usize, usize)>,
    best: &mut Option<(usize, usize, isize)>,
) {
    if i == c.len() {
        let mut chunks = 0isize;
        for (k, &(a, b)) in pairs.iter().enumerate() {
            if k == 0 || (a, b) != (pairs[k - 1].0 + 1, pairs[k - 1].1 + 1) {
                chunks += 1;
            }
        }
        let key = (exact, pairs.len(), -chunks);
        if best.is_none_or(|b| key > b) {
            *best = Some(key);
        }
        return;
    }
    search(c, r, cs, rs, i + 1, exact, used, pairs, best);
    for j in 0..r.len() {
        if used[j] {
            continue;
        }
        let is_exact = c[i] == r[j];
        if is_exact || cs[i] == rs[j] {
            used[j] = true;
            pairs.push((i, j));
            search(c, r, cs, rs, i + 1, exact + usize::from(is_exact), used, pairs, best);
            pairs.pop();
            used[j] = false;
        }
    }
}

pub fn meteor(pairs: &[(Vec<String>, Vec<String>)]) -> f64 {
    pairs.iter().map(|(c, r)| meteor_case(c, r)).sum::<f64>() / pairs.len() as f64
}

pub fn cider(pairs: &[(Vec<String>, Vec<String>)]) -> f64 {
    let n_docs = pairs.len() as f64;
    let mut total = 0.0;
    for (c, r) in pairs {
        let mut per_order = 0.0;
        for n in 1..=4 {
            let idf = |g: &[String]| {
                let df = pairs.iter().filter(|(_, rr)| ngrams(rr, n).iter().any(|x| x.as_slice() == g)).count();
                (n_docs / df.max(1) as f64).ln()
            };
            let cg = ngrams(c, n);
            let rg = ngrams(r, n);
            let vc: Vec<(Vec<String>, f64)> = distinct(&cg).into_iter().map(|g| {
                let w = count(&cg, &g) as f64 * idf(&g);
                (g, w)
            }).collect();
            let vr: Vec<(Vec<String>, f64)> = distinct(&rg).into_iter().map(|g| {
                let w = count(&rg, &g) as f64 * idf(&g);
                (g, w)
            }).collect();
            let nc = vc.iter().map(|x| x.1 * x.1).sum::<f64>().sqrt();
            let nr = vr.iter().map(|x| x.1 * x.1).sum::<f64>().sqrt();
            if nc == 0.0 || nr == 0.0 {
                continue;
            }
            let mut dot = 0.0;
            for (g, wr) in &vr {
                if let Some((_, wc)) = vc.iter().find(|(h, _)| h == g) {
                    dot += wc.min(*wr) * wr;
                }
            }
            let delta = c.len() as f64 - r.len() as f64;
            per_order += dot / (nc * nr) * (-delta * delta / 72.0).exp();
        }
        total += 10.0 * per_order / 4.0;
    }
    total / n_docs
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Linear scan: highest cosine first, ties by id, the query excluded.
pub fn brute_top_k(query_id: &str, query: &[f64], index: &EmbeddingIndex, k: usize) -> Vec<String> {
    let mut scored: Vec<(String, f64)> = index
        .iter()
        .filter(|(id, _)| *id != query_id)
        .map(|(id, v)| (id.to_string(), cosine(query, v)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.into_iter().take(k).map(|(id, _)| id).collect()
}

pub fn is_distinct(ids: &[String]) -> bool {
    ids.iter().collect::<HashSet<_>>().len() == ids.len()
}
