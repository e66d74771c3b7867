//! Greedy and beam inference, and corpus BLEU.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::Network;
use crate::numerics::ParamStore;
use crate::textcore::{TokenSeq, BOS, EOS, MEM, PAD};

/// Anything that scores the next token of `<bos>`-initial prefixes.
pub trait StepModel {
    fn vocab_size(&self) -> usize;
    /// Natural-log probabilities of the next token, one row per prefix.
    fn next_log_probs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>>;
}

/// A trained network bound to one source sentence and its memories.
pub struct BoundModel<'a> {
    pub net: &'a Network,
    pub params: &'a ParamStore<f64>,
    pub src: &'a [u32],
    pub memories: &'a [Vec<u32>],
}

impl StepModel for BoundModel<'_> {
    fn vocab_size(&self) -> usize {
        self.net.cfg.vocab_size
    }

    fn next_log_probs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let ctx: Vec<(&[u32], &[Vec<u32>])> = prefixes.iter().map(|_| (self.src, self.memories)).collect();
        let probs = self.net.next_token_probs(self.params, &ctx, prefixes)?;
        Ok(probs
            .into_iter()
            .map(|row| row.into_iter().map(|p| p.max(1e-300).ln()).collect())
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Starts with `<bos>`; ends with `<eos>` when finished.
    pub tokens: TokenSeq,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Generated length, `<eos>` included.
    pub fn gen_len(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn score(&self, length_penalty: f64) -> f64 {
        normalized(self.log_prob, self.gen_len(), length_penalty)
    }

    /// Content tokens without `<bos>`/`<eos>`.
    pub fn content(&self) -> TokenSeq {
        TokenSeq(
            self.tokens
                .ids()
                .iter()
                .copied()
                .filter(|&t| t != BOS && t != EOS)
                .collect(),
        )
    }
}

fn normalized(log_prob: f64, len: usize, lp: f64) -> f64 {
    if lp == 0.0 || len == 0 {
        log_prob
    } else {
        log_prob / (len as f64).powf(lp)
    }
}

fn selectable(tok: u32) -> bool {
    tok != PAD && tok != BOS && tok != MEM
}

fn check_rows(rows: &[Vec<f64>], n: usize, v: usize) -> Result<()> {
    if rows.len() != n || rows.iter().any(|r| r.len() != v) {
        return invalid("step model returned rows of the wrong shape");
    }
    Ok(())
}

pub fn greedy_decode(model: &dyn StepModel, max_len: usize) -> Result<Hypothesis> {
    let v = model.vocab_size();
    let mut hyp = Hypothesis {
        tokens: TokenSeq(vec![BOS]),
        log_prob: 0.0,
        finished: false,
    };
    for _ in 0..max_len {
        let rows = model.next_log_probs(std::slice::from_ref(&hyp.tokens.0))?;
        check_rows(&rows, 1, v)?;
        let row = &rows[0];
        let mut best: Option<u32> = None;
        for tok in (0..v as u32).filter(|&t| selectable(t)) {
            if best.map_or(true, |b| row[tok as usize] > row[b as usize]) {
                best = Some(tok);
            }
        }
        let tok = best.ok_or_else(|| crate::error::CmmError::Invalid("no selectable token".into()))?;
        hyp.tokens.0.push(tok);
        hyp.log_prob += row[tok as usize];
        if tok == EOS {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}

/// Standard beam search. Candidates are ranked by length-normalised score,
/// ties broken by lower parent rank then lower token id. Finished
/// hypotheses leave the beam.
pub fn beam_decode(model: &dyn StepModel, beam: usize, max_len: usize, length_penalty: f64) -> Result<Hypothesis> {
    if beam == 0 {
        return invalid("beam must be at least 1");
    }
    let v = model.vocab_size();
    let mut live = vec![Hypothesis {
        tokens: TokenSeq(vec![BOS]),
        log_prob: 0.0,
        finished: false,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<u32>> = live.iter().map(|h| h.tokens.0.clone()).collect();
        let rows = model.next_log_probs(&prefixes)?;
        check_rows(&rows, live.len(), v)?;
        let len = live[0].gen_len() + 1;
        let mut cands: Vec<(f64, usize, u32, f64)> = Vec::with_capacity(live.len() * v);
        for (bi, (h, row)) in live.iter().zip(&rows).enumerate() {
            for tok in (0..v as u32).filter(|&t| selectable(t)) {
                let lp = h.log_prob + row[tok as usize];
                cands.push((normalized(lp, len, length_penalty), bi, tok, lp));
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(beam);
        for &(_, bi, tok, lp) in cands.iter().take(beam) {
            let mut tokens = live[bi].tokens.clone();
            tokens.0.push(tok);
            let h = Hypothesis {
                tokens,
                log_prob: lp,
                finished: tok == EOS,
            };
            if h.finished {
                done.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
    }
    done.extend(live);
    done.into_iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| {
            a.score(length_penalty)
                .partial_cmp(&b.score(length_penalty))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(ib.cmp(ia))
        })
        .map(|(_, h)| h)
        .ok_or_else(|| crate::error::CmmError::Invalid("beam search produced no hypothesis".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub bleu: f64,
    pub precisions: [f64; 4],
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Eq + Hash + Clone>(toks: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 with clipped counts pooled over all pairs and no
/// smoothing.
pub fn corpus_bleu<T: Eq + Hash + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<BleuReport> {
    if hyps.is_empty() {
        return invalid("BLEU of an empty corpus");
    }
    if hyps.len() != refs.len() {
        return invalid(format!("{} hypotheses for {} references", hyps.len(), refs.len()));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; 4];
    for n in 0..4 {
        if totals[n] > 0 {
            precisions[n] = matches[n] as f64 / totals[n] as f64;
        }
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp().min(1.0)
    };
    let bleu = if precisions.iter().all(|&p| p > 0.0) {
        brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp() * 100.0
    } else {
        0.0
    };
    Ok(BleuReport {
        bleu,
        precisions,
        matches,
        totals,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn bleu_examples() {
        let r = corpus_bleu(&[words("a b c d")], &[words("a b c d")]).unwrap();
        assert_eq!(r.bleu, 100.0);
        let r = corpus_bleu(&[words("the cat sat")], &[words("the cat sat on")]).unwrap();
        assert_eq!(r.precisions[..3], [1.0, 1.0, 1.0]);
        assert_eq!(r.totals[3], 0);
        assert_eq!(r.bleu, 0.0);
        let r = corpus_bleu(&[words("a b c d")], &[words("a b c e")]).unwrap();
        let want = [0.75, 2.0 / 3.0, 0.5, 0.0];
        for n in 0..4 {
            assert!((r.precisions[n] - want[n]).abs() < 1e-12);
        }
        assert_eq!(r.bleu, 0.0);
        let r = corpus_bleu(&[words("a b c e")], &[words("a b c e")]).unwrap();
        assert!((r.bleu - 100.0).abs() < 1e-6);
        assert!(corpus_bleu::<String>(&[], &[]).is_err());
        assert!(corpus_bleu(&[words("a")], &[]).is_err());
    }

    #[test]
    fn brevity_penalty_applies() {
        let r = corpus_bleu(&[words("a b c d e")], &[words("a b c d e f g")]).unwrap();
        assert!((r.brevity_penalty - (1.0f64 - 7.0 / 5.0).exp()).abs() < 1e-12);
        assert!((r.bleu - 100.0 * r.brevity_penalty).abs() < 1e-9);
    }

    /// Log-probabilities looked up by prefix; unlisted prefixes put all
    /// mass on `<eos>`.
    struct Toy {
        table: HashMap<Vec<u32>, Vec<f64>>,
        v: usize,
    }

    impl Toy {
        fn new(v: usize, rows: &[(&[u32], &[(u32, f64)])]) -> Toy {
            let mut table = HashMap::new();
            for (prefix, probs) in rows {
                let mut row = vec![f64::NEG_INFINITY; v];
                for &(t, p) in probs.iter() {
                    row[t as usize] = p.ln();
                }
                table.insert(prefix.to_vec(), row);
            }
            Toy { table, v }
        }
    }

    impl StepModel for Toy {
        fn vocab_size(&self) -> usize {
            self.v
        }

        fn next_log_probs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
            Ok(prefixes
                .iter()
                .map(|p| {
                    self.table.get(p).cloned().unwrap_or_else(|| {
                        let mut r = vec![f64::NEG_INFINITY; self.v];
                        r[EOS as usize] = 0.0;
                        r
                    })
                })
                .collect())
        }
    }

    /// Greedy takes 5 (0.6) then is stuck with 0.4 choices; 6 (0.4) leads
    /// to a near-certain continuation.
    fn trap() -> Toy {
        Toy::new(
            8,
            &[
                (&[BOS], &[(5, 0.6), (6, 0.4)]),
                (&[BOS, 5], &[(7, 0.4), (6, 0.3), (EOS, 0.3)]),
                (&[BOS, 6], &[(7, 0.95), (EOS, 0.05)]),
                (&[BOS, 5, 7], &[(EOS, 1.0)]),
                (&[BOS, 5, 6], &[(EOS, 1.0)]),
                (&[BOS, 6, 7], &[(EOS, 1.0)]),
            ],
        )
    }

    fn enumerate(model: &Toy, depth: usize) -> (f64, Vec<u32>) {
        let mut best = (f64::NEG_INFINITY, vec![]);
        let mut stack = vec![(vec![BOS], 0.0)];
        while let Some((p, lp)) = stack.pop() {
            if p.len() > depth || p.last() == Some(&EOS) {
                if lp > best.0 {
                    best = (lp, p);
                }
                continue;
            }
            let row = &model.next_log_probs(&[p.clone()]).unwrap()[0];
            for t in 0..model.v as u32 {
                if row[t as usize].is_finite() && selectable(t) {
                    let mut q = p.clone();
                    q.push(t);
                    stack.push((q, lp + row[t as usize]));
                }
            }
        }
        best
    }

    #[test]
    fn beam_recovers_path_greedy_misses() {
        let toy = trap();
        let (best_lp, best_path) = enumerate(&toy, 3);
        let g = greedy_decode(&toy, 3).unwrap();
        assert_eq!(g.tokens.0, vec![BOS, 5, 7, EOS]);
        assert!(g.log_prob < best_lp);
        let b = beam_decode(&toy, 2, 3, 0.0).unwrap();
        assert_eq!(b.tokens.0, best_path);
        assert!((b.log_prob - best_lp).abs() < 1e-12);
        assert!((best_lp - (0.4f64 * 0.95).ln()).abs() < 1e-12);
    }

    #[test]
    fn beam_one_is_greedy() {
        let toy = trap();
        for max_len in 1..4 {
            assert_eq!(greedy_decode(&toy, max_len).unwrap(), beam_decode(&toy, 1, max_len, 0.0).unwrap());
            assert_eq!(greedy_decode(&toy, max_len).unwrap(), beam_decode(&toy, 1, max_len, 1.0).unwrap());
        }
        assert!(greedy_decode(&toy, 1).unwrap().content().len() <= 1);
    }

    #[test]
    fn ties_go_to_lowest_token() {
        let toy = Toy::new(8, &[(&[BOS], &[(6, 0.5), (5, 0.5)])]);
        assert_eq!(greedy_decode(&toy, 2).unwrap().tokens.0[1], 5);
        assert_eq!(beam_decode(&toy, 3, 2, 0.0).unwrap().tokens.0[1], 5);
    }
}
