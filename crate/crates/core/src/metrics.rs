//! ROUGE-N, ROUGE-L and BLEU over token sequences.
//!
//! Functions are generic over the token type so the same code scores
//! `String` tokens from the pipeline and small integer alphabets in tests.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Precision, recall and F1, all in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(overlap: usize, cand_total: usize, ref_total: usize) -> Prf {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        Prf::from_pr(ratio(overlap, cand_total), ratio(overlap, ref_total))
    }

    pub fn from_pr(precision: f64, recall: f64) -> Prf {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

pub fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

fn ngram_total(len: usize, n: usize) -> usize {
    (len + 1).saturating_sub(n)
}

/// Clipped n-gram overlap `Σ min(count_cand, count_ref)`.
pub fn ngram_overlap<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> usize {
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    cand.iter()
        .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
        .sum()
}

pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> Prf {
    assert!(n >= 1, "rouge_n requires n >= 1");
    Prf::from_counts(
        ngram_overlap(candidate, reference, n),
        ngram_total(candidate.len(), n),
        ngram_total(reference.len(), n),
    )
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> Prf {
    Prf::from_counts(lcs_len(candidate, reference), candidate.len(), reference.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    /// Zero matches give a zero score.
    #[default]
    None,
    /// Zero match counts are replaced by [`BLEU_EPS`] in the numerator.
    AddEps,
}

pub const BLEU_EPS: f64 = 1e-9;

/// Sufficient statistics for BLEU; they add across sentences for
/// corpus-level scoring.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub cand_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn zeros(max_n: usize) -> Self {
        BleuStats {
            matches: vec![0; max_n],
            totals: vec![0; max_n],
            cand_len: 0,
            ref_len: 0,
        }
    }

    pub fn accumulate(&mut self, other: &BleuStats) {
        for (a, b) in self.matches.iter_mut().zip(&other.matches) {
            *a += b;
        }
        for (a, b) in self.totals.iter_mut().zip(&other.totals) {
            *a += b;
        }
        self.cand_len += other.cand_len;
        self.ref_len += other.ref_len;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    /// Modified precisions p_1..p_N.
    pub per_n: Vec<f64>,
    pub brevity_penalty: f64,
    pub score: f64,
    /// Set when the candidate is empty; the score is then 0.
    pub degenerate: bool,
}

fn check_bleu_args(max_n: usize, refs: usize) -> Result<()> {
    if !(1..=4).contains(&max_n) {
        return Err(Error::invalid(format!("bleu max_n must be in 1..=4, got {max_n}")));
    }
    if refs == 0 {
        return Err(Error::invalid("bleu needs at least one reference"));
    }
    Ok(())
}

pub fn bleu_stats<T: Eq + Hash, R: AsRef<[T]>>(candidate: &[T], references: &[R], max_n: usize) -> Result<BleuStats> {
    check_bleu_args(max_n, references.len())?;
    let mut stats = BleuStats::zeros(max_n);
    for n in 1..=max_n {
        let cand = ngram_counts(candidate, n);
        let ref_counts: Vec<_> = references.iter().map(|r| ngram_counts(r.as_ref(), n)).collect();
        stats.matches[n - 1] = cand
            .iter()
            .map(|(g, &c)| {
                let max_ref = ref_counts
                    .iter()
                    .map(|rc| rc.get(g).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                c.min(max_ref)
            })
            .sum();
        stats.totals[n - 1] = ngram_total(candidate.len(), n);
    }
    stats.cand_len = candidate.len();
    stats.ref_len = closest_ref_len(candidate.len(), references.iter().map(|r| r.as_ref().len()));
    Ok(stats)
}

/// Reference length closest to `cand_len`; ties go to the shorter one.
fn closest_ref_len(cand_len: usize, lens: impl Iterator<Item = usize>) -> usize {
    lens.min_by_key(|&l| (l.abs_diff(cand_len), l)).unwrap_or(0)
}

pub fn bleu_from_stats(stats: &BleuStats, smoothing: Smoothing) -> BleuScore {
    let (c, r) = (stats.cand_len, stats.ref_len);
    let degenerate = c == 0;
    let brevity_penalty = if c > r {
        1.0
    } else if c == 0 {
        0.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let per_n: Vec<f64> = stats
        .matches
        .iter()
        .zip(&stats.totals)
        .map(|(&m, &t)| match smoothing {
            Smoothing::None if t == 0 => 0.0,
            Smoothing::None => m as f64 / t as f64,
            Smoothing::AddEps => {
                let num = if m == 0 { BLEU_EPS } else { m as f64 };
                num / t.max(1) as f64
            }
        })
        .collect();
    let score = if degenerate || per_n.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let weight = 1.0 / per_n.len() as f64;
        let log_mean: f64 = per_n.iter().map(|p| weight * p.ln()).sum();
        brevity_penalty * log_mean.exp()
    };
    BleuScore {
        per_n,
        brevity_penalty,
        score,
        degenerate,
    }
}

/// Sentence BLEU with uniform weights over orders `1..=max_n`, clipping
/// against the references and a brevity penalty from the closest-length
/// reference.
pub fn bleu<T: Eq + Hash, R: AsRef<[T]>>(
    candidate: &[T],
    references: &[R],
    max_n: usize,
    smoothing: Smoothing,
) -> Result<BleuScore> {
    Ok(bleu_from_stats(&bleu_stats(candidate, references, max_n)?, smoothing))
}

/// One line of a metric table, values ×100.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricRow {
    #[serde(rename = "R-1")]
    pub r1: f64,
    #[serde(rename = "R-2")]
    pub r2: f64,
    #[serde(rename = "R-L")]
    pub rl: f64,
    #[serde(rename = "B-1")]
    pub b1: f64,
    #[serde(rename = "B-2")]
    pub b2: f64,
    #[serde(rename = "B-3")]
    pub b3: f64,
}

pub const METRIC_COLUMNS: [&str; 6] = ["R-1", "R-2", "R-L", "B-1", "B-2", "B-3"];

impl MetricRow {
    pub fn values(&self) -> [f64; 6] {
        [self.r1, self.r2, self.rl, self.b1, self.b2, self.b3]
    }

    /// Comma-separated values at one decimal.
    pub fn csv_cells(&self) -> String {
        self.values()
            .iter()
            .map(|v| format!("{v:.1}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Both aggregation conventions for a corpus.
///
/// `primary`: ROUGE as the mean of per-pair F1, BLEU corpus-level from pooled
/// clipped counts and lengths (no smoothing). `alternate`: ROUGE from pooled
/// overlap counts, BLEU as the mean of smoothed sentence scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusScores {
    pub primary: MetricRow,
    pub alternate: MetricRow,
}

impl CorpusScores {
    pub fn to_csv(&self) -> String {
        format!(
            "mode,{}\nprimary,{}\nalternate,{}\n",
            METRIC_COLUMNS.join(","),
            self.primary.csv_cells(),
            self.alternate.csv_cells()
        )
    }
}

/// Per-pair scores (fractions, not ×100).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
}

pub fn pair_scores<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> PairScores {
    let refs = [reference];
    let b = |n| {
        bleu(candidate, &refs, n, Smoothing::AddEps)
            .map(|s| s.score)
            .unwrap_or(0.0)
    };
    PairScores {
        rouge1: rouge_n(candidate, reference, 1).f1,
        rouge2: rouge_n(candidate, reference, 2).f1,
        rouge_l: rouge_l(candidate, reference).f1,
        bleu1: b(1),
        bleu2: b(2),
        bleu3: b(3),
    }
}

pub fn corpus_scores<T: Eq + Hash, P: AsRef<[T]>>(pairs: &[(P, P)]) -> Result<CorpusScores> {
    if pairs.is_empty() {
        return Err(Error::invalid("corpus_scores needs at least one pair"));
    }
    let n = pairs.len() as f64;
    let mut f1_sum = [0.0f64; 3];
    let mut sent_bleu_sum = [0.0f64; 3];
    // pooled (overlap, cand_total, ref_total) for R-1, R-2, R-L
    let mut pooled = [(0usize, 0usize, 0usize); 3];
    let mut stats = BleuStats::zeros(3);
    for (cand, reference) in pairs {
        let (cand, reference) = (cand.as_ref(), reference.as_ref());
        let ps = pair_scores(cand, reference);
        f1_sum[0] += ps.rouge1;
        f1_sum[1] += ps.rouge2;
        f1_sum[2] += ps.rouge_l;
        sent_bleu_sum[0] += ps.bleu1;
        sent_bleu_sum[1] += ps.bleu2;
        sent_bleu_sum[2] += ps.bleu3;
        for (k, n) in [1usize, 2].into_iter().enumerate() {
            pooled[k].0 += ngram_overlap(cand, reference, n);
            pooled[k].1 += ngram_total(cand.len(), n);
            pooled[k].2 += ngram_total(reference.len(), n);
        }
        pooled[2].0 += lcs_len(cand, reference);
        pooled[2].1 += cand.len();
        pooled[2].2 += reference.len();
        stats.accumulate(&bleu_stats(cand, &[reference], 3)?);
    }
    let corpus_bleu = |max_n: usize| {
        let sub = BleuStats {
            matches: stats.matches[..max_n].to_vec(),
            totals: stats.totals[..max_n].to_vec(),
            cand_len: stats.cand_len,
            ref_len: stats.ref_len,
        };
        100.0 * bleu_from_stats(&sub, Smoothing::None).score
    };
    let pooled_f1 = |k: usize| 100.0 * Prf::from_counts(pooled[k].0, pooled[k].1, pooled[k].2).f1;
    Ok(CorpusScores {
        primary: MetricRow {
            r1: 100.0 * f1_sum[0] / n,
            r2: 100.0 * f1_sum[1] / n,
            rl: 100.0 * f1_sum[2] / n,
            b1: corpus_bleu(1),
            b2: corpus_bleu(2),
            b3: corpus_bleu(3),
        },
        alternate: MetricRow {
            r1: pooled_f1(0),
            r2: pooled_f1(1),
            rl: pooled_f1(2),
            b1: 100.0 * sent_bleu_sum[0] / n,
            b2: 100.0 * sent_bleu_sum[1] / n,
            b3: 100.0 * sent_bleu_sum[2] / n,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn rouge1_hand_count() {
        let p = rouge_n(&toks("the cat sat"), &toks("the cat ran"), 1);
        assert!((p.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rouge_identity_and_disjoint() {
        let a = toks("a b c a b");
        for n in 1..=5 {
            assert_eq!(rouge_n(&a, &a, n).f1, 1.0);
        }
        assert_eq!(rouge_n(&toks("a b"), &toks("c d"), 1).f1, 0.0);
        assert_eq!(rouge_n(&toks("a"), &toks("a"), 2), Prf::default());
    }

    #[test]
    fn rouge_l_hand_lcs() {
        let p = rouge_l(&toks("a b c d"), &toks("a c b d"));
        assert_eq!(lcs_len(&toks("a b c d"), &toks("a c b d")), 3);
        assert_eq!((p.precision, p.recall, p.f1), (0.75, 0.75, 0.75));
        assert_eq!(rouge_l(&toks("x y"), &toks("x y")).f1, 1.0);
        assert_eq!(rouge_l(&toks(""), &toks("x y")).f1, 0.0);
    }

    #[test]
    fn bleu_hand_examples() {
        let r = [toks("the cat")];
        let s = bleu(&toks("the cat"), &r, 2, Smoothing::None).unwrap();
        assert_eq!(s.score, 1.0);

        let s = bleu(&toks("the the the"), &r, 1, Smoothing::None).unwrap();
        assert_eq!(s.per_n, vec![1.0 / 3.0]);
        assert_eq!(s.brevity_penalty, 1.0);
        assert!((s.score - 1.0 / 3.0).abs() < 1e-15);

        let s = bleu(&toks("the"), &r, 1, Smoothing::None).unwrap();
        assert_eq!(s.per_n, vec![1.0]);
        assert!((s.brevity_penalty - (-1.0f64).exp()).abs() < 1e-15);
        assert!((s.score - 0.36787944117144233).abs() < 1e-12);
    }

    #[test]
    fn bleu_degenerate_and_errors() {
        let r = [toks("a b")];
        let s = bleu(&toks(""), &r, 2, Smoothing::None).unwrap();
        assert!(s.degenerate);
        assert_eq!(s.score, 0.0);
        assert!(bleu(&toks("a"), &r, 0, Smoothing::None).is_err());
        assert!(bleu(&toks("a"), &r, 5, Smoothing::None).is_err());
        let none: [Vec<&str>; 0] = [];
        assert!(bleu(&toks("a"), &none, 1, Smoothing::None).is_err());
    }

    #[test]
    fn bleu_smoothing_keeps_missing_orders_positive() {
        let r = [toks("a b c d")];
        let plain = bleu(&toks("a c"), &r, 2, Smoothing::None).unwrap();
        assert_eq!(plain.score, 0.0);
        let smooth = bleu(&toks("a c"), &r, 2, Smoothing::AddEps).unwrap();
        assert!(smooth.score > 0.0 && smooth.score < 1e-3);
        assert_eq!(smooth.per_n[1], BLEU_EPS);
    }

    #[test]
    fn multi_reference_clips_against_max_count() {
        let refs = [toks("a x"), toks("a a y")];
        let s = bleu_stats(&toks("a a a"), &refs, 1).unwrap();
        assert_eq!(s.matches, vec![2]);
        assert_eq!(s.ref_len, 3);
    }

    #[test]
    fn corpus_identity_is_all_hundred() {
        let pairs = vec![(toks("a b c d"), toks("a b c d")), (toks("x y z"), toks("x y z"))];
        let scores = corpus_scores(&pairs).unwrap();
        assert_eq!(scores.primary.values(), [100.0; 6]);
        assert_eq!(scores.alternate.values(), [100.0; 6]);
        assert!(scores.to_csv().starts_with("mode,R-1,R-2,R-L,B-1,B-2,B-3\nprimary,100.0,"));
    }

    #[test]
    fn corpus_rouge_is_mean_of_pair_f1() {
        // pair 2: candidate "a b" vs reference "a c": R-1 F1 = 0.5
        let pairs = vec![(toks("a b"), toks("a b")), (toks("a b"), toks("a c"))];
        let scores = corpus_scores(&pairs).unwrap();
        assert!((scores.primary.r1 - 75.0).abs() < 1e-12);
        let empty: Vec<(Vec<&str>, Vec<&str>)> = vec![];
        assert!(corpus_scores(&empty).is_err());
    }

    fn small_seq() -> impl Strategy<Value = Vec<u8>> {
        proptest::collection::vec(0u8..4, 0..9)
    }

    proptest! {
        #[test]
        fn rouge_precision_recall_symmetry(a in small_seq(), b in small_seq(), n in 1usize..4) {
            prop_assert_eq!(rouge_n(&a, &b, n).precision, rouge_n(&b, &a, n).recall);
            prop_assert_eq!(rouge_l(&a, &b).precision, rouge_l(&b, &a).recall);
        }

        #[test]
        fn bleu_bounds(a in small_seq(), b in small_seq(), max_n in 1usize..5) {
            let s = bleu(&a, &[&b], max_n, Smoothing::None).unwrap();
            for &p in &s.per_n {
                prop_assert!((0.0..=1.0).contains(&p));
            }
            prop_assert!(s.score <= s.brevity_penalty + 1e-15);
            let min_p = s.per_n.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert!(s.score <= min_p.powf(1.0 / max_n as f64) + 1e-12);
        }
    }
}
