use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
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

/// ROUGE-L F-measure.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> Result<f64> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(Error::EmptyInput);
    }
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return Ok(0.0);
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU-4: clipped n-gram precisions, geometric mean, brevity
/// penalty against the closest reference length (shorter wins ties).
///
/// Orders 2..4 use add-one smoothing `(m + 1) / (max(t, 1) + 1)`. A
/// candidate with no unigram match scores exactly 0.
pub fn bleu<T: Eq + Hash>(candidate: &[T], references: &[&[T]]) -> Result<f64> {
    if candidate.is_empty() {
        return Err(Error::EmptyInput);
    }
    let refs: Vec<&[T]> = references.iter().copied().filter(|r| !r.is_empty()).collect();
    if refs.is_empty() {
        return Err(Error::invalid("bleu needs at least one non-empty reference"));
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(candidate, n);
        let mut max_ref: HashMap<&[T], usize> = HashMap::new();
        for r in &refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let matched: usize = cand
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        let total = candidate.len().saturating_sub(n - 1).max(1);
        let p = if n == 1 {
            if matched == 0 {
                return Ok(0.0);
            }
            matched as f64 / total as f64
        } else {
            (matched + 1) as f64 / (total + 1) as f64
        };
        log_sum += p.ln();
    }
    let c = candidate.len();
    let r = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(c);
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / 4.0).exp())
}

/// Cosine of the angle between two vectors; 0 when either is all zeros.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("vector widths differ: {} vs {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        log::warn!("cosine of a zero vector; scoring 0");
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l(&w("a b c"), &w("a b c")).unwrap(), 1.0);
        assert_eq!(rouge_l(&w("a b"), &w("c d")).unwrap(), 0.0);
        assert!((rouge_l(&w("a b c d"), &w("a c d e")).unwrap() - 0.75).abs() < 1e-15);
        assert!(rouge_l::<&str>(&[], &w("a")).is_err());
    }

    #[test]
    fn bleu_edge_cases() {
        let s = w("the cat sat on the mat");
        assert_eq!(bleu(&s, &[&s]).unwrap(), 1.0);
        assert_eq!(bleu(&w("x y z w"), &[&s]).unwrap(), 0.0);
        assert!(bleu(&s, &[&[]]).is_err());
        assert!(bleu::<&str>(&[], &[&s]).is_err());
    }

    #[test]
    fn bleu_brevity_prefers_shorter_reference_on_ties() {
        // |c| = 4, references of length 3 and 5: the tie goes to 3, so no penalty.
        let c = w("a b c d");
        let r3 = w("a b c");
        let r5 = w("a b c d e");
        let both = bleu(&c, &[&r5, &r3]).unwrap();
        let only_long = bleu(&c, &[&r5]).unwrap();
        assert!(both > only_long);
    }

    #[test]
    fn cosine_zero_vector_is_zero() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn rouge_symmetric_for_equal_lengths(a in proptest::collection::vec(0u8..5, 1..12), seed in 0u8..5) {
            let b: Vec<u8> = a.iter().map(|x| (x + seed) % 5).collect();
            prop_assert_eq!(rouge_l(&a, &b).unwrap(), rouge_l(&b, &a).unwrap());
        }

        #[test]
        fn bleu_in_unit_interval(a in proptest::collection::vec(0u8..6, 1..15), b in proptest::collection::vec(0u8..6, 1..15)) {
            let s = bleu(&a, &[&b]).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }
}
