//! Corpus BLEU (orders 1-4, brevity penalty, unsmoothed) and TER with a
//! greedy block-shift search. Scores are case-sensitive over whitespace
//! tokens.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::pipeline::TranslationSystem;

pub const MAX_ORDER: usize = 4;
pub const MAX_SHIFT_SPAN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceTer {
    pub edits: usize,
    pub shifts: usize,
    pub ref_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// In [0, 100].
    pub bleu: f64,
    /// Edits per reference word, times 100. Not clamped.
    pub ter: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    pub sentences: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ter_detail: Vec<SentenceTer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decode_seconds: Option<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BleuStats {
    pub bleu: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn check_aligned<T>(hyps: &[T], refs: &[T]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(Error::Alignment {
            source_lines: hyps.len(),
            target_lines: refs.len(),
        });
    }
    Ok(())
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

pub fn bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<BleuStats> {
    check_aligned(hyps, refs)?;
    if hyps.is_empty() {
        return Err(Error::Invalid("BLEU of an empty corpus is undefined".into()));
    }
    let mut matched = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(rf, n);
            for (g, k) in &hc {
                matched[n - 1] += (*k).min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        if total[n] > 0 {
            precisions[n] = matched[n] as f64 / total[n] as f64;
        }
    }
    let brevity_penalty = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let bleu = if precisions.contains(&0.0) {
        0.0
    } else {
        let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * mean_log.exp()
    };
    Ok(BleuStats {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len: c,
        ref_len: r,
    })
}

fn lev_table(h: &[String], r: &[String]) -> Vec<Vec<usize>> {
    let mut d = vec![vec![0usize; r.len() + 1]; h.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=r.len() {
        d[0][j] = j;
    }
    for i in 1..=h.len() {
        for j in 1..=r.len() {
            let sub = d[i - 1][j - 1] + usize::from(h[i - 1] != r[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d
}

pub fn levenshtein(h: &[String], r: &[String]) -> usize {
    if h.is_empty() || r.is_empty() {
        return h.len().max(r.len());
    }
    let mut prev: Vec<usize> = (0..=r.len()).collect();
    let mut cur = vec![0; r.len() + 1];
    for i in 1..=h.len() {
        cur[0] = i;
        for j in 1..=r.len() {
            let sub = prev[j - 1] + usize::from(h[i - 1] != r[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[r.len()]
}

/// Hypothesis positions that are exact matches on the canonical alignment.
/// The backtrace prefers match, then substitution, then deleting a
/// hypothesis word, then inserting a reference word.
pub fn matched_positions(h: &[String], r: &[String]) -> Vec<bool> {
    let d = lev_table(h, r);
    let mut out = vec![false; h.len()];
    let (mut i, mut j) = (h.len(), r.len());
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && h[i - 1] == r[j - 1] && d[i][j] == d[i - 1][j - 1] {
            out[i - 1] = true;
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + 1 {
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    out
}

/// Moves `h[i..i+len]` so that it starts at index `k` of the result.
pub fn apply_shift(h: &[String], i: usize, len: usize, k: usize) -> Vec<String> {
    let mut rest: Vec<String> = Vec::with_capacity(h.len());
    rest.extend_from_slice(&h[..i]);
    rest.extend_from_slice(&h[i + len..]);
    let mut out = Vec::with_capacity(h.len());
    out.extend_from_slice(&rest[..k]);
    out.extend_from_slice(&h[i..i + len]);
    out.extend_from_slice(&rest[k..]);
    out
}

fn occurs_in(span: &[String], r: &[String]) -> bool {
    span.len() <= r.len() && r.windows(span.len()).any(|w| w == span)
}

pub fn sentence_ter(h: &[String], r: &[String]) -> SentenceTer {
    let mut cur = h.to_vec();
    let mut dist = levenshtein(&cur, r);
    let mut shifts = 0;
    while dist > 0 {
        let matched = matched_positions(&cur, r);
        // (distance, span, origin, destination); lexicographic min is the pick
        let mut best: Option<(usize, usize, usize, usize)> = None;
        let n = cur.len();
        for len in 1..=MAX_SHIFT_SPAN.min(n) {
            for i in 0..=n - len {
                if matched[i..i + len].iter().all(|&m| m) || !occurs_in(&cur[i..i + len], r) {
                    continue;
                }
                for k in 0..=n - len {
                    if k == i {
                        continue;
                    }
                    let d = levenshtein(&apply_shift(&cur, i, len, k), r);
                    if d < dist && best.is_none_or(|b| (d, len, i, k) < b) {
                        best = Some((d, len, i, k));
                    }
                }
            }
        }
        match best {
            Some((d, len, i, k)) => {
                cur = apply_shift(&cur, i, len, k);
                dist = d;
                shifts += 1;
            }
            None => break,
        }
    }
    SentenceTer {
        edits: shifts + dist,
        shifts,
        ref_len: r.len(),
    }
}

/// Returns the corpus TER (×100) and the per-sentence breakdown.
pub fn ter(hyps: &[Vec<String>], refs: &[Vec<String>], exec: Exec) -> Result<(f64, Vec<SentenceTer>)> {
    check_aligned(hyps, refs)?;
    let pairs: Vec<(&Vec<String>, &Vec<String>)> = hyps.iter().zip(refs).collect();
    let detail = exec.map(&pairs, |(h, r)| sentence_ter(h, r));
    let edits: usize = detail.iter().map(|s| s.edits).sum();
    let ref_len: usize = detail.iter().map(|s| s.ref_len).sum();
    if ref_len == 0 {
        return Err(Error::Invalid("TER is undefined for empty references".into()));
    }
    Ok((100.0 * edits as f64 / ref_len as f64, detail))
}

pub fn score(hyps: &[Vec<String>], refs: &[Vec<String>], exec: Exec) -> Result<EvalReport> {
    let b = bleu(hyps, refs)?;
    let (t, detail) = ter(hyps, refs, exec)?;
    Ok(EvalReport {
        bleu: b.bleu,
        ter: t,
        precisions: b.precisions,
        brevity_penalty: b.brevity_penalty,
        hyp_len: b.hyp_len,
        ref_len: b.ref_len,
        sentences: hyps.len(),
        ter_detail: detail,
        decode_seconds: None,
    })
}

/// Translates every source of `test` and scores against its targets.
pub fn evaluate_model(system: &dyn TranslationSystem, test: &ParallelCorpus, exec: Exec) -> Result<EvalReport> {
    let sources: Vec<Vec<String>> = test.sources().map(<[String]>::to_vec).collect();
    let refs: Vec<Vec<String>> = test.targets().map(<[String]>::to_vec).collect();
    let start = Instant::now();
    let hyps = system.translate_all(&sources, exec)?;
    let seconds = start.elapsed().as_secs_f64();
    let mut report = score(&hyps, &refs, exec)?;
    report.decode_seconds = Some(seconds);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn identical_corpus_is_perfect() {
        let refs = vec![toks("a b c d e"), toks("x y z w")];
        let r = score(&refs, &refs, Exec::Sequential).unwrap();
        assert_eq!(r.bleu, 100.0);
        assert_eq!(r.brevity_penalty, 1.0);
        assert_eq!(r.ter, 0.0);
    }

    #[test]
    fn disjoint_unigrams_give_zero_bleu() {
        let b = bleu(&[toks("p q r s")], &[toks("a b c d")]).unwrap();
        assert_eq!(b.bleu, 0.0);
    }

    #[test]
    fn short_hypothesis_is_penalized() {
        let b = bleu(&[toks("a b c d")], &[toks("a b c d e f g h")]).unwrap();
        assert!((b.brevity_penalty - (-1.0f64).exp()).abs() < 1e-15);
        assert!((b.bleu - 100.0 * (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn clipping_limits_repeated_words() {
        let b = bleu(&[toks("the the the the")], &[toks("the cat")]).unwrap();
        assert_eq!(b.precisions[0], 0.25);
    }

    #[test]
    fn ter_examples() {
        let s = sentence_ter(&toks("a x c"), &toks("a b c"));
        assert_eq!((s.edits, s.shifts), (1, 0));
        let s = sentence_ter(&toks("a b d c"), &toks("a b c d"));
        assert_eq!((s.edits, s.shifts), (1, 1));
        let (t, _) = ter(&[toks("a b d c")], &[toks("a b c d")], Exec::Sequential).unwrap();
        assert_eq!(t, 25.0);
    }

    #[test]
    fn ter_is_not_clamped() {
        let (t, _) = ter(&[toks("p q r s t u")], &[toks("a b")], Exec::Sequential).unwrap();
        assert_eq!(t, 300.0);
    }

    #[test]
    fn shift_moves_span() {
        let h = toks("a b c d e");
        assert_eq!(apply_shift(&h, 1, 2, 3), toks("a d e b c"));
        assert_eq!(apply_shift(&h, 3, 1, 0), toks("d a b c e"));
    }

    #[test]
    fn alignment_errors() {
        assert!(matches!(bleu(&[toks("a")], &[]), Err(Error::Alignment { .. })));
        assert!(ter(&[toks("a")], &[vec![]], Exec::Sequential).is_err());
    }

    #[test]
    fn report_serializes() {
        let refs = vec![toks("a b c d")];
        let r = score(&refs, &refs, Exec::Sequential).unwrap();
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
