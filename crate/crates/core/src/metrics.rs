//! BLEU-4 with a single reference per candidate.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;
/// Numerator substituted for a zero n-gram match count under epsilon smoothing.
pub const SMOOTHING_EPSILON: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Smoothing {
    None,
    #[default]
    Epsilon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub bleu4: f64,
    pub candidate_length: usize,
    pub reference_length: usize,
    pub smoothing: Smoothing,
}

impl BleuReport {
    /// `BP · exp(¼ Σ log pₙ)` from the stored fields.
    pub fn recompute(&self) -> f64 {
        if self.precisions.iter().any(|&p| p <= 0.0) {
            return 0.0;
        }
        let mean_log = self.precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        self.brevity_penalty * mean_log.exp()
    }
}

/// Clipped n-gram matches and the candidate's n-gram total.
pub fn modified_precision<T: Eq + std::hash::Hash>(
    candidate: &[T],
    reference: &[T],
    n: usize,
) -> (usize, usize) {
    assert!(n >= 1, "n-gram order must be at least 1");
    if candidate.len() < n {
        return (0, 0);
    }
    let total = candidate.len() + 1 - n;
    let mut ref_counts: HashMap<&[T], usize> = HashMap::new();
    if reference.len() >= n {
        for gram in reference.windows(n) {
            *ref_counts.entry(gram).or_default() += 1;
        }
    }
    let mut cand_counts: HashMap<&[T], usize> = HashMap::new();
    for gram in candidate.windows(n) {
        *cand_counts.entry(gram).or_default() += 1;
    }
    let clipped = cand_counts
        .iter()
        .map(|(gram, &c)| c.min(ref_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    (clipped, total)
}

pub fn brevity_penalty(candidate_len: usize, reference_len: usize) -> f64 {
    if candidate_len == 0 {
        0.0
    } else if candidate_len >= reference_len {
        1.0
    } else {
        (1.0 - reference_len as f64 / candidate_len as f64).exp()
    }
}

fn report_from_counts(
    matches: [usize; MAX_ORDER],
    totals: [usize; MAX_ORDER],
    candidate_length: usize,
    reference_length: usize,
    smoothing: Smoothing,
) -> BleuReport {
    let mut precisions = [0.0; MAX_ORDER];
    for i in 0..MAX_ORDER {
        precisions[i] = match (matches[i], smoothing) {
            (0, Smoothing::Epsilon) => SMOOTHING_EPSILON / totals[i].max(1) as f64,
            (0, Smoothing::None) => 0.0,
            (m, _) => m as f64 / totals[i] as f64,
        };
    }
    let mut report = BleuReport {
        precisions,
        brevity_penalty: brevity_penalty(candidate_length, reference_length),
        bleu4: 0.0,
        candidate_length,
        reference_length,
        smoothing,
    };
    report.bleu4 = report.recompute();
    report
}

pub fn bleu4_sentence<T: Eq + std::hash::Hash>(
    candidate: &[T],
    reference: &[T],
    smoothing: Smoothing,
) -> BleuReport {
    let mut matches = [0; MAX_ORDER];
    let mut totals = [0; MAX_ORDER];
    for n in 1..=MAX_ORDER {
        (matches[n - 1], totals[n - 1]) = modified_precision(candidate, reference, n);
    }
    report_from_counts(matches, totals, candidate.len(), reference.len(), smoothing)
}

/// Corpus BLEU: counts and lengths are summed over all pairs first.
pub fn bleu4_corpus<T: Eq + std::hash::Hash>(
    pairs: &[(Vec<T>, Vec<T>)],
    smoothing: Smoothing,
) -> Result<BleuReport> {
    if pairs.is_empty() {
        return Err(Error::Contract("corpus BLEU of zero pairs".into()));
    }
    let mut matches = [0; MAX_ORDER];
    let mut totals = [0; MAX_ORDER];
    let (mut c_len, mut r_len) = (0, 0);
    for (cand, reference) in pairs {
        for n in 1..=MAX_ORDER {
            let (m, t) = modified_precision(cand, reference, n);
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
        c_len += cand.len();
        r_len += reference.len();
    }
    Ok(report_from_counts(matches, totals, c_len, r_len, smoothing))
}

/// Counts of sentence scores in ten equal-width bins over [0, 1].
pub fn score_histogram(scores: &[f64]) -> [usize; 10] {
    let mut bins = [0; 10];
    for &s in scores {
        let idx = ((s * 10.0).floor() as isize).clamp(0, 9) as usize;
        bins[idx] += 1;
    }
    bins
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn modified_precision_examples() {
        let a = toks("a b c d e");
        assert_eq!(modified_precision(&a, &a, 4), (2, 2));
        assert_eq!(modified_precision(&a, &toks("a b c d f"), 1), (4, 5));
        assert_eq!(modified_precision(&a, &toks("v w x y z"), 3), (0, 3));
        assert_eq!(modified_precision(&toks("a b"), &a, 3), (0, 0));
        // clipping
        assert_eq!(
            modified_precision(&toks("the the the"), &toks("the cat"), 1),
            (1, 3)
        );
    }

    #[test]
    fn brevity_penalty_examples() {
        assert_eq!(brevity_penalty(7, 7), 1.0);
        assert!((brevity_penalty(5, 10) - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(brevity_penalty(0, 3), 0.0);
    }

    #[test]
    fn sentence_examples() {
        let a = toks("a b c d e");
        assert_eq!(bleu4_sentence(&a, &a, Smoothing::None).bleu4, 1.0);
        let r = bleu4_sentence(&a, &toks("a b c d f"), Smoothing::None);
        assert!((r.bleu4 - 0.2f64.powf(0.25)).abs() < 1e-12);
        assert!((r.bleu4 - 0.6687).abs() < 1e-4);
        let short = bleu4_sentence(&toks("a b c"), &toks("a b c"), Smoothing::None);
        assert_eq!(short.bleu4, 0.0);
        let smoothed = bleu4_sentence(&toks("a b c"), &toks("a b c"), Smoothing::Epsilon);
        assert!(smoothed.bleu4 > 0.0 && smoothed.bleu4 < 1.0);
    }

    #[test]
    fn corpus_identities() {
        assert!(bleu4_corpus::<&str>(&[], Smoothing::None).is_err());
        let pairs = vec![(toks("a b c d e"), toks("a b c d f"))];
        let c = bleu4_corpus(&pairs, Smoothing::Epsilon).unwrap();
        let s = bleu4_sentence(&pairs[0].0, &pairs[0].1, Smoothing::Epsilon);
        assert_eq!(c, s);
    }

    #[test]
    fn histogram_bins() {
        assert_eq!(
            score_histogram(&[0.0, 0.05, 0.1, 0.99, 1.0]),
            [2, 1, 0, 0, 0, 0, 0, 0, 0, 2]
        );
    }
}
