//! BLEU scoring and likelihood evaluation.
//!
//! Sentence-level BLEU uses add-one smoothing on the match and total counts
//! for n >= 2 (unigram precision stays exact, so zero unigram overlap still
//! scores 0); corpus BLEU aggregates raw clipped counts with no smoothing.
//! Scores are computed on token ids with EOS/PAD stripped.

use std::collections::HashMap;

use crate::data::strip_special;
use crate::error::{GgdError, Result};
use crate::model::{log_prob, ModelParams};

pub const MAX_NGRAM: usize = 4;

/// Clipped n-gram match statistics for one hypothesis/reference pair.
#[derive(Clone, Debug, Default)]
pub struct BleuStats {
    pub matches: [u64; MAX_NGRAM],
    pub totals: [u64; MAX_NGRAM],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn accumulate(&mut self, other: &BleuStats) {
        for n in 0..MAX_NGRAM {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }
}

fn ngram_counts(tokens: &[u32], n: usize) -> HashMap<&[u32], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram statistics of a hypothesis against one reference.
pub fn bleu_stats(hyp: &[u32], reference: &[u32]) -> BleuStats {
    let mut stats = BleuStats { hyp_len: hyp.len(), ref_len: reference.len(), ..Default::default() };
    for n in 1..=MAX_NGRAM {
        let hc = ngram_counts(hyp, n);
        let rc = ngram_counts(reference, n);
        let mut m = 0u64;
        let mut t = 0u64;
        for (gram, &count) in &hc {
            t += count;
            if let Some(&r) = rc.get(gram) {
                m += count.min(r);
            }
        }
        stats.matches[n - 1] = m;
        stats.totals[n - 1] = t;
    }
    stats
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        return 0.0;
    }
    if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

/// Smoothed sentence-level BLEU-4 in [0, 1]. Inputs are raw id sequences;
/// EOS and PAD are stripped before counting. The reference must be nonempty
/// after stripping; an empty hypothesis scores 0.
pub fn sentence_bleu_smoothed(hyp: &[u32], reference: &[u32]) -> Result<f64> {
    let hyp = strip_special(hyp);
    let reference = strip_special(reference);
    if reference.is_empty() {
        return Err(GgdError::Input("empty reference".into()));
    }
    if hyp.is_empty() {
        return Ok(0.0);
    }
    let stats = bleu_stats(&hyp, &reference);
    let mut log_precision = 0.0;
    for n in 0..MAX_NGRAM {
        let (mut m, mut t) = (stats.matches[n] as f64, stats.totals[n] as f64);
        if n >= 1 {
            m += 1.0;
            t += 1.0;
        }
        if m == 0.0 {
            return Ok(0.0);
        }
        log_precision += (m / t).ln();
    }
    Ok(brevity_penalty(stats.hyp_len, stats.ref_len) * (log_precision / MAX_NGRAM as f64).exp())
}

/// Corpus BLEU-4 in [0, 1]: counts aggregated over the corpus, then raw
/// precisions and a single brevity penalty. No smoothing.
pub fn corpus_bleu(pairs: &[(Vec<u32>, Vec<u32>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(GgdError::Input("empty corpus".into()));
    }
    let mut agg = BleuStats::default();
    for (hyp, reference) in pairs {
        let hyp = strip_special(hyp);
        let reference = strip_special(reference);
        if reference.is_empty() {
            return Err(GgdError::Input("empty reference".into()));
        }
        agg.accumulate(&bleu_stats(&hyp, &reference));
    }
    let mut log_precision = 0.0;
    for n in 0..MAX_NGRAM {
        if agg.matches[n] == 0 || agg.totals[n] == 0 {
            return Ok(0.0);
        }
        log_precision += (agg.matches[n] as f64 / agg.totals[n] as f64).ln();
    }
    Ok(brevity_penalty(agg.hyp_len, agg.ref_len) * (log_precision / MAX_NGRAM as f64).exp())
}

/// Mean per-token log-likelihood of reference pairs under a model.
pub fn avg_log_likelihood(params: &ModelParams, pairs: &[(Vec<u32>, Vec<u32>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(GgdError::Input("empty corpus".into()));
    }
    let mut total = 0.0;
    let mut tokens = 0usize;
    for (x, y) in pairs {
        total += log_prob(params, x, y)?;
        tokens += y.len();
    }
    Ok(total / tokens as f64)
}
