use std::collections::HashMap;
use std::ops::{Add, AddAssign};

use crate::data::{group_tokenize, normalize};
use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Sufficient statistics for corpus BLEU-4.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [u64; MAX_ORDER],
    pub totals: [u64; MAX_ORDER],
    pub cand_len: u64,
    pub ref_len: u64,
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, u64> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts
            .entry(w.iter().map(AsRef::as_ref).collect())
            .or_insert(0) += 1;
    }
    counts
}

impl BleuStats {
    pub fn sentence<S: AsRef<str>, T: AsRef<str>>(candidate: &[S], reference: &[T]) -> Self {
        let mut stats = BleuStats {
            cand_len: candidate.len() as u64,
            ref_len: reference.len() as u64,
            ..Default::default()
        };
        for n in 1..=MAX_ORDER {
            let cand = ngram_counts(candidate, n);
            let refs = ngram_counts(reference, n);
            stats.totals[n - 1] = candidate.len().saturating_sub(n - 1) as u64;
            stats.matches[n - 1] = cand
                .iter()
                .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
                .sum();
        }
        stats
    }

    /// BLEU in `[0, 100]`. Orders the candidate side is too short to have
    /// are left out of the geometric mean. Without smoothing any zero
    /// precision gives 0; with smoothing, orders above 1 use `(m+1)/(t+1)`.
    pub fn score(&self, smoothing: bool) -> f64 {
        if self.cand_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        let mut orders = 0;
        for n in 0..MAX_ORDER {
            let (m, t) = (self.matches[n], self.totals[n]);
            if t == 0 {
                continue;
            }
            let p = if smoothing && n > 0 {
                (m + 1) as f64 / (t + 1) as f64
            } else {
                m as f64 / t as f64
            };
            if p == 0.0 {
                return 0.0;
            }
            log_sum += p.ln();
            orders += 1;
        }
        let bp = if self.cand_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp()
        };
        let s = 100.0 * bp * (log_sum / orders as f64).exp();
        s.min(100.0)
    }
}

impl Add for BleuStats {
    type Output = BleuStats;
    fn add(mut self, rhs: BleuStats) -> BleuStats {
        self += rhs;
        self
    }
}

impl AddAssign for BleuStats {
    fn add_assign(&mut self, rhs: BleuStats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += rhs.matches[n];
            self.totals[n] += rhs.totals[n];
        }
        self.cand_len += rhs.cand_len;
        self.ref_len += rhs.ref_len;
    }
}

impl std::iter::Sum for BleuStats {
    fn sum<I: Iterator<Item = BleuStats>>(iter: I) -> Self {
        iter.fold(BleuStats::default(), Add::add)
    }
}

/// Lower-cased tokenizer units, the unit BLEU counts over.
pub fn bleu_tokens(text: &str) -> Result<Vec<String>> {
    group_tokenize(&normalize(text))
}

/// Corpus statistics over already tokenized sentences.
pub fn corpus_stats<S: AsRef<str>, T: AsRef<str>>(
    candidates: &[Vec<S>],
    references: &[Vec<T>],
) -> Result<BleuStats> {
    if candidates.is_empty() {
        return Err(Error::Contract("BLEU of an empty candidate set".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    Ok(candidates
        .iter()
        .zip(references)
        .map(|(c, r)| BleuStats::sentence(c, r))
        .sum())
}

/// Corpus BLEU-4 of raw sentences.
pub fn bleu<S: AsRef<str>, T: AsRef<str>>(
    candidates: &[S],
    references: &[T],
    smoothing: bool,
) -> Result<f64> {
    let c = candidates
        .iter()
        .map(|s| bleu_tokens(s.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let r = references
        .iter()
        .map(|s| bleu_tokens(s.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    if r.iter().any(Vec::is_empty) {
        return Err(Error::Input("empty reference sentence".into()));
    }
    Ok(corpus_stats(&c, &r)?.score(smoothing))
}

/// Smoothed BLEU of a single sentence pair, for per-sentence reports.
pub fn sentence_bleu(candidate: &str, reference: &str) -> Result<f64> {
    Ok(BleuStats::sentence(&bleu_tokens(candidate)?, &bleu_tokens(reference)?).score(true))
}
