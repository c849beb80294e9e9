//! Sentence-level BLEU and ROUGE-L over token ids. Special tokens
//! (sos/eos/pad) are stripped before scoring.

use std::collections::HashMap;

use crate::corpus::TokenSequence;

const ROUGE_BETA_SQ: f64 = 1.2 * 1.2;

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_default() += 1;
        }
    }
    counts
}

/// Clipped n-gram precision for orders `1..=max_n`, geometric mean with
/// uniform weights, brevity penalty `exp(1 - r/c)` when the hypothesis is
/// shorter than the closest reference. Unsmoothed: any zero precision
/// yields 0.
pub fn bleu(hypothesis: &TokenSequence, references: &[TokenSequence], max_n: usize) -> f64 {
    let hyp = hypothesis.content();
    let refs: Vec<&[usize]> = references.iter().map(|r| r.content()).collect();
    bleu_tokens(hyp, &refs, max_n)
}

pub fn bleu_tokens(hyp: &[usize], refs: &[&[usize]], max_n: usize) -> f64 {
    assert!((1..=4).contains(&max_n), "BLEU order must be 1..=4");
    if hyp.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let hyp_counts = ngram_counts(hyp, n);
        let total: usize = hyp_counts.values().sum();
        if total == 0 {
            return 0.0;
        }
        let mut max_ref: HashMap<&[usize], usize> = HashMap::new();
        for r in refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_default();
                *e = (*e).max(c);
            }
        }
        let clipped: usize = hyp_counts
            .iter()
            .map(|(g, c)| (*c).min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let c = hyp.len();
    let r = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap();
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    bp * (log_sum / max_n as f64).exp()
}

pub fn lcs_len(a: &[usize], b: &[usize]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure with β² = 1.44.
pub fn rouge_l(hypothesis: &TokenSequence, reference: &TokenSequence) -> f64 {
    rouge_l_tokens(hypothesis.content(), reference.content())
}

pub fn rouge_l_tokens(hyp: &[usize], reference: &[usize]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(hyp, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / hyp.len() as f64;
    let r = lcs / reference.len() as f64;
    (1.0 + ROUGE_BETA_SQ) * p * r / (r + ROUGE_BETA_SQ * p)
}
