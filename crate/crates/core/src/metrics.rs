// SPDX-License-Identifier: MIT OR Apache-2.0

//! Output scoring: target-language accuracy, corpus BLEU, and feature recovery.
//!
//! BLEU is computed over token ids at corpus level with up to 4-gram
//! precisions. Orders for which the hypotheses contain no n-grams at all are
//! left out of the geometric mean; an order with n-grams but no matches uses
//! precision `1/(2·c)` where `c` is the total hypothesis length. The brevity
//! penalty is `exp(1 − r/c)` when `c ≤ r`.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokens::TokenSequence;

/// Short description of the BLEU variant, echoed into reports.
pub const BLEU_VARIANT: &str =
    "corpus BLEU-4 over token ids; orders without hypothesis n-grams skipped; zero matches smoothed to 1/(2*hyp_len); standard brevity penalty";

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    /// `None` when no language wins outright.
    pub language: Option<String>,
    pub confidence: f64,
}

impl Classification {
    pub fn unknown() -> Self {
        Self {
            language: None,
            confidence: 0.0,
        }
    }
}

pub trait LanguageClassifier: Sync {
    fn classify(&self, ids: &[usize]) -> Classification;
}

/// Whether each output is in `target` with confidence at least `threshold`.
pub fn successes(
    outputs: &[TokenSequence],
    target: &str,
    classifier: &dyn LanguageClassifier,
    threshold: f64,
) -> Result<Vec<bool>> {
    if outputs.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!("threshold must lie in [0, 1], got {threshold}")));
    }
    Ok(outputs
        .iter()
        .map(|o| {
            let c = classifier.classify(&o.ids);
            c.language.as_deref() == Some(target) && c.confidence >= threshold
        })
        .collect())
}

pub fn accuracy(
    outputs: &[TokenSequence],
    target: &str,
    classifier: &dyn LanguageClassifier,
    threshold: f64,
) -> Result<f64> {
    let s = successes(outputs, target, classifier, threshold)?;
    Ok(s.iter().filter(|&&b| b).count() as f64 / s.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuStats {
    /// Clipped matches per order 1..=4.
    pub matches: [usize; 4],
    /// Hypothesis n-gram totals per order 1..=4.
    pub totals: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
    pub brevity_penalty: f64,
    pub bleu: f64,
}

fn ngram_counts(ids: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if ids.len() >= n {
        for w in ids.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

pub fn bleu_stats(hypotheses: &[Vec<usize>], references: &[Vec<usize>]) -> Result<BleuStats> {
    if hypotheses.is_empty() {
        return Err(Error::EmptyInput);
    }
    Error::check_dim(hypotheses.len(), references.len())?;
    if references.iter().any(|r| r.is_empty()) {
        return Err(Error::invalid("references must be nonempty"));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hypotheses.iter().zip(references) {
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(rf, n);
            for (g, &k) in &hc {
                matches[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let brevity_penalty = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 0..4 {
        if totals[n] == 0 {
            continue;
        }
        let p = if matches[n] == 0 {
            1.0 / (2.0 * c as f64)
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_sum += p.ln();
        orders += 1;
    }
    let bleu = if orders == 0 {
        0.0
    } else {
        100.0 * brevity_penalty * (log_sum / orders as f64).exp()
    };
    Ok(BleuStats {
        matches,
        totals,
        hyp_len: c,
        ref_len: r,
        brevity_penalty,
        bleu: bleu.clamp(0.0, 100.0),
    })
}

pub fn bleu(hypotheses: &[Vec<usize>], references: &[Vec<usize>]) -> Result<f64> {
    Ok(bleu_stats(hypotheses, references)?.bleu)
}

/// ACC in `[0, 1]` times BLEU in `[0, 100]`.
pub fn acc_x_bleu(acc: f64, bleu_on_successes: f64) -> f64 {
    acc * bleu_on_successes
}

/// `(precision, recall)` of `found` against `planted`.
pub fn recovery_metrics(found: &BTreeSet<usize>, planted: &BTreeSet<usize>) -> (f64, f64) {
    let hit = found.intersection(planted).count() as f64;
    let precision = if found.is_empty() {
        if planted.is_empty() {
            1.0
        } else {
            0.0
        }
    } else {
        hit / found.len() as f64
    };
    let recall = if planted.is_empty() {
        1.0
    } else {
        hit / planted.len() as f64
    };
    (precision, recall)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<(Option<&'static str>, f64)>);

    impl LanguageClassifier for Fixed {
        fn classify(&self, ids: &[usize]) -> Classification {
            let (l, c) = self.0[ids[0]];
            Classification {
                language: l.map(String::from),
                confidence: c,
            }
        }
    }

    fn seqs(n: usize) -> Vec<TokenSequence> {
        (0..n).map(|i| TokenSequence::new(vec![i])).collect()
    }

    #[test]
    fn accuracy_examples() {
        let all = Fixed(vec![(Some("fr"), 1.0); 3]);
        assert_eq!(accuracy(&seqs(3), "fr", &all, 0.5).unwrap(), 1.0);
        let low = Fixed(vec![(Some("fr"), 0.4)]);
        assert_eq!(accuracy(&seqs(1), "fr", &low, 0.5).unwrap(), 0.0);
        let mixed = Fixed(vec![
            (Some("fr"), 0.9),
            (Some("de"), 0.9),
            (None, 0.0),
            (Some("fr"), 0.5),
        ]);
        assert_eq!(accuracy(&seqs(4), "fr", &mixed, 0.5).unwrap(), 0.5);
        assert!(accuracy(&[], "fr", &all, 0.5).is_err());
    }

    #[test]
    fn bleu_perfect_and_disjoint() {
        let refs = vec![vec![1, 2, 3, 4, 5], vec![6, 7, 8]];
        assert!((bleu(&refs, &refs).unwrap() - 100.0).abs() < 1e-12);
        let hyps = vec![vec![9, 9, 9, 9, 9], vec![10, 10, 10]];
        let b = bleu(&hyps, &refs).unwrap();
        // Every order smoothed to 1/(2·8) with BP = 1.
        assert!((b - 100.0 / 16.0).abs() < 1e-9);
        assert!(bleu(&[], &[]).is_err());
        assert!(bleu(&[vec![1]], &[vec![]]).is_err());
    }

    #[test]
    fn bleu_hand_corpora() {
        // 1) hyp [1,2,3,4], ref [1,2,3,5]: p = 3/4, 2/3, 1/2, 1/(2·4); BP 1.
        let want = 100.0 * (0.75f64 * (2.0 / 3.0) * 0.5 * 0.125).powf(0.25);
        let got = bleu(&[vec![1, 2, 3, 4]], &[vec![1, 2, 3, 5]]).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");

        // 2) Clipping: hyp [7,7,7], ref [7,8,9,10]. p1 = 1/3, p2 = 1/(2·3),
        //    p3 = 1/(2·3), order 4 absent. BP = exp(1 − 4/3).
        let s = bleu_stats(&[vec![7, 7, 7]], &[vec![7, 8, 9, 10]]).unwrap();
        assert_eq!(s.matches, [1, 0, 0, 0]);
        assert_eq!(s.totals, [3, 2, 1, 0]);
        let want = 100.0 * (1.0f64 - 4.0 / 3.0).exp() * ((1.0 / 3.0) * (1.0 / 6.0) * (1.0 / 6.0f64)).powf(1.0 / 3.0);
        assert!((s.bleu - want).abs() < 1e-6);

        // 3) Two pairs pooled: ([1,2],[1,2]) and ([3,4,5],[3,4,6]).
        //    p1 = 4/5, p2 = 2/3, p3 = 1/(2·5), order 4 absent; BP 1.
        let s = bleu_stats(&[vec![1, 2], vec![3, 4, 5]], &[vec![1, 2], vec![3, 4, 6]]).unwrap();
        assert_eq!(s.matches, [4, 2, 0, 0]);
        assert_eq!(s.totals, [5, 3, 1, 0]);
        let want = 100.0 * (0.8f64 * (2.0 / 3.0) * 0.1).powf(1.0 / 3.0);
        assert!((s.bleu - want).abs() < 1e-6);
    }

    #[test]
    fn acc_x_bleu_examples() {
        assert_eq!(acc_x_bleu(1.0, 30.0), 30.0);
        assert_eq!(acc_x_bleu(0.0, 77.0), 0.0);
    }

    #[test]
    fn recovery_examples() {
        let s = |v: &[usize]| v.iter().copied().collect::<BTreeSet<_>>();
        assert_eq!(recovery_metrics(&s(&[1, 2]), &s(&[1, 2])), (1.0, 1.0));
        assert_eq!(recovery_metrics(&s(&[1]), &s(&[1, 2])), (1.0, 0.5));
        assert_eq!(recovery_metrics(&s(&[]), &s(&[])), (1.0, 1.0));
        assert_eq!(recovery_metrics(&s(&[]), &s(&[3])), (0.0, 0.0));
        assert_eq!(recovery_metrics(&s(&[1, 9]), &s(&[1])), (0.5, 1.0));
    }
}
