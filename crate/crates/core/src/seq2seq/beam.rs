//! Greedy and beam decoding for [`TinySeq2Seq`].

use std::collections::HashSet;

use super::reference::{Encoded, TinySeq2Seq};
use super::vocab::{BOS, EOS};

struct Hyp {
    tokens: Vec<usize>,
    s: Vec<f64>,
    sum: f64,
}

/// Returns up to `num_return` distinct token sequences (end token stripped)
/// with their length-normalized scores, best first. Hypotheses still alive
/// after `max_len` tokens are closed with the end token's real log-probability,
/// so every score matches rescoring the surface string.
pub(super) fn search(
    model: &TinySeq2Seq,
    enc: &Encoded,
    beam_size: usize,
    num_return: usize,
    max_len: usize,
) -> Vec<(Vec<usize>, f64)> {
    let mut live = vec![Hyp {
        tokens: vec![],
        s: enc.last().to_vec(),
        sum: 0.0,
    }];
    // (tokens, normalized score, completion order)
    let mut finished: Vec<(Vec<usize>, f64, usize)> = vec![];
    let mut seen: HashSet<Vec<usize>> = HashSet::new();

    for t in 0..=max_len {
        if live.is_empty() {
            break;
        }
        let mut cands: Vec<(f64, usize, usize)> = vec![];
        let mut states = Vec::with_capacity(live.len());
        for (hi, hyp) in live.iter().enumerate() {
            let y_prev = hyp.tokens.last().copied().unwrap_or(BOS);
            let step = model.step(enc, &hyp.s, y_prev);
            if t == max_len {
                cands.push((hyp.sum + step.logp[EOS], hi, EOS));
            } else {
                for (tok, lp) in step.logp.iter().enumerate() {
                    if model.allowed(tok) {
                        cands.push((hyp.sum + lp, hi, tok));
                    }
                }
            }
            states.push(step.s);
        }
        // Highest cumulative score first; index order breaks ties.
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut next = Vec::with_capacity(beam_size);
        for (sum, hi, tok) in cands.into_iter().take(2 * beam_size) {
            if tok == EOS {
                let tokens = live[hi].tokens.clone();
                if seen.insert(tokens.clone()) {
                    let norm = sum / (tokens.len() + 1) as f64;
                    let order = finished.len();
                    finished.push((tokens, norm, order));
                }
            } else if next.len() < beam_size {
                let mut tokens = live[hi].tokens.clone();
                tokens.push(tok);
                next.push(Hyp {
                    tokens,
                    s: states[hi].clone(),
                    sum,
                });
            }
        }
        live = next;
        if finished.len() >= num_return {
            let worst_kept = worst_of_top(&finished, num_return);
            // Cumulative log-probabilities only fall, so a live hypothesis can
            // still beat the kept set only if its best possible normalized
            // score (current sum over max_len + 1 tokens) is higher.
            if live.iter().all(|h| h.sum / (max_len + 1) as f64 <= worst_kept) {
                break;
            }
        }
    }

    finished.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.2.cmp(&b.2)));
    finished.truncate(num_return);
    finished.into_iter().map(|(t, s, _)| (t, s)).collect()
}

fn worst_of_top(finished: &[(Vec<usize>, f64, usize)], k: usize) -> f64 {
    let mut scores: Vec<f64> = finished.iter().map(|f| f.1).collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    scores[k - 1]
}

/// Arg-max decoding; stops at the end token or closes the query after `max_len` tokens.
pub(super) fn greedy(model: &TinySeq2Seq, enc: &Encoded, max_len: usize) -> (Vec<usize>, f64) {
    let mut s = enc.last().to_vec();
    let mut tokens = vec![];
    let mut sum = 0.0;
    loop {
        let y_prev = tokens.last().copied().unwrap_or(BOS);
        let step = model.step(enc, &s, y_prev);
        let next = if tokens.len() == max_len {
            EOS
        } else {
            step.logp
                .iter()
                .enumerate()
                .filter(|(tok, _)| model.allowed(*tok))
                .fold((EOS, f64::NEG_INFINITY), |best, (tok, &lp)| if lp > best.1 { (tok, lp) } else { best })
                .0
        };
        sum += step.logp[next];
        if next == EOS {
            break;
        }
        tokens.push(next);
        s = step.s;
    }
    let norm = sum / (tokens.len() + 1) as f64;
    (tokens, norm)
}
