//! Independent reference implementations for the metric tests.
//!
//! These count by brute force: n-gram overlap by matching each predicted
//! n-gram against unused reference positions, and LCS by memoized recursion.
//! Conventions for empty inputs follow the library's documented rules.

#![allow(dead_code)]

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(|w| w.to_lowercase()).collect()
}

fn grams(t: &[String], n: usize) -> Vec<&[String]> {
    if t.len() < n {
        return vec![];
    }
    (0..=t.len() - n).map(|i| &t[i..i + n]).collect()
}

/// Clipped overlap: each reference n-gram occurrence can be claimed once.
pub fn overlap(pred: &[String], reference: &[String], n: usize) -> usize {
    let r = grams(reference, n);
    let mut used = vec![false; r.len()];
    let mut hits = 0;
    for g in grams(pred, n) {
        if let Some(j) = (0..r.len()).find(|&j| !used[j] && r[j] == g) {
            used[j] = true;
            hits += 1;
        }
    }
    hits
}

fn prf(hit: usize, np: usize, nr: usize) -> (f64, f64, f64) {
    if hit == 0 {
        return (0.0, 0.0, 0.0);
    }
    let p = hit as f64 / np as f64;
    let r = hit as f64 / nr as f64;
    (p, r, 2.0 * p * r / (p + r))
}

/// ROUGE-N precision, recall and F1.
pub fn rouge_n(pred: &str, reference: &str, n: usize) -> (f64, f64, f64) {
    let (p, r) = (words(pred), words(reference));
    let (np, nr) = (grams(&p, n).len(), grams(&r, n).len());
    match (np, nr) {
        (0, 0) if p == r => (1.0, 1.0, 1.0),
        (0, _) | (_, 0) => (0.0, 0.0, 0.0),
        _ => prf(overlap(&p, &r, n), np, nr),
    }
}

pub fn unigram_f1(pred: &str, reference: &str) -> f64 {
    rouge_n(pred, reference, 1).2
}

fn lcs(a: &[String], b: &[String], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if i == a.len() || j == b.len() {
        return 0;
    }
    if let Some(&v) = memo.get(&(i, j)) {
        return v;
    }
    let v = if a[i] == b[j] {
        1 + lcs(a, b, i + 1, j + 1, memo)
    } else {
        lcs(a, b, i + 1, j, memo).max(lcs(a, b, i, j + 1, memo))
    };
    memo.insert((i, j), v);
    v
}

pub fn rouge_l(pred: &str, reference: &str) -> (f64, f64, f64) {
    let (p, r) = (words(pred), words(reference));
    match (p.len(), r.len()) {
        (0, 0) => (1.0, 1.0, 1.0),
        (0, _) | (_, 0) => (0.0, 0.0, 0.0),
        _ => prf(lcs(&p, &r, 0, 0, &mut HashMap::new()), p.len(), r.len()),
    }
}

/// Unsmoothed corpus BLEU on the 0-100 scale.
pub fn bleu(preds: &[&str], refs: &[&str], max_n: usize) -> f64 {
    let mut log_p = 0.0;
    let (mut lp, mut lr) = (0usize, 0usize);
    for (p, r) in preds.iter().zip(refs) {
        lp += words(p).len();
        lr += words(r).len();
    }
    if lp == 0 {
        return 0.0;
    }
    for n in 1..=max_n {
        let (mut hit, mut total) = (0, 0);
        for (p, r) in preds.iter().zip(refs) {
            let (p, r) = (words(p), words(r));
            hit += overlap(&p, &r, n);
            total += grams(&p, n).len();
        }
        if hit == 0 {
            return 0.0;
        }
        log_p += (hit as f64 / total as f64).ln() / max_n as f64;
    }
    let bp = if lp >= lr { 1.0 } else { (1.0 - lr as f64 / lp as f64).exp() };
    100.0 * bp * log_p.exp()
}

/// A short random sentence over a small, case-mixed vocabulary, so overlaps
/// and repeats are frequent.
pub fn random_sentence(rng: &mut impl Rng) -> String {
    const VOCAB: [&str; 9] = ["ireland", "Ireland", "weather", "the", "cat", "sat", "a", "b", "north"];
    let n = rng.gen_range(0..9);
    (0..n).map(|_| *VOCAB.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

/// SHA-256 of a file, hex encoded.
pub fn file_sha256(path: &Path) -> String {
    semidqg::seq2seq::checkpoint::sha256_hex(&std::fs::read(path).expect("readable file"))
}

pub fn synth_config_text() -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synth.toml");
    std::fs::read_to_string(path).expect("configs/synth.toml")
}

pub fn smoke_config_text() -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    std::fs::read_to_string(path).expect("configs/smoke.toml")
}
