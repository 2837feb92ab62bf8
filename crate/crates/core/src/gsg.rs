//! Gap-sentence corpus construction: sentence priority scoring, selective
//! masking and sentinel-formatted training pairs.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Report, Segmenter, SentenceSeq};
use crate::error::{Error, Result};
use crate::metrics::{bleu, rouge_n, Smoothing};

pub const MAX_SENTINELS: usize = 100;

pub fn sentinel(k: usize) -> String {
    format!("<extra_id_{k}>")
}

pub fn is_sentinel(token: &str) -> bool {
    sentinel_index(token).is_some()
}

pub fn sentinel_index(token: &str) -> Option<usize> {
    let digits = token.strip_prefix("<extra_id_")?.strip_suffix('>')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) || (digits.len() > 1 && digits.starts_with('0')) {
        return None;
    }
    digits.parse().ok().filter(|&k| k < MAX_SENTINELS)
}

/// How the ROUGE and BLEU parts of a sentence's priority are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreFormula {
    /// ROUGE-1 F1 plus smoothed BLEU-3.
    #[default]
    Sum,
    /// Harmonic mean of ROUGE-1 F1 and smoothed BLEU-3.
    HarmonicMean,
    /// ROUGE-1 F1 alone.
    RougeOnly,
}

/// What a sentence is scored against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RestMode {
    /// All other sentences concatenated into one reference.
    #[default]
    Concat,
    /// Best score against any single other sentence.
    PerSentenceMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ScoringConfig {
    #[serde(default)]
    pub formula: ScoreFormula,
    #[serde(default)]
    pub rest: RestMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorityScore {
    pub sentence_index: usize,
    pub w: f64,
}

fn combine(sentence: &[String], reference: &[String], formula: ScoreFormula) -> f64 {
    let r = rouge_n(sentence, reference, 1).f1;
    if formula == ScoreFormula::RougeOnly {
        return r;
    }
    // max_n = 3 is always valid and the reference list is non-empty.
    let b = bleu(sentence, &[reference], 3, Smoothing::AddEps)
        .map(|s| s.score)
        .unwrap_or(0.0);
    match formula {
        ScoreFormula::Sum => r + b,
        ScoreFormula::HarmonicMean if r + b > 0.0 => 2.0 * r * b / (r + b),
        ScoreFormula::HarmonicMean => 0.0,
        ScoreFormula::RougeOnly => unreachable!(),
    }
}

pub fn priority_score(i: usize, doc: &SentenceSeq, cfg: &ScoringConfig) -> Result<PriorityScore> {
    if i >= doc.len() {
        return Err(Error::invalid(format!(
            "sentence index {i} out of range for a {}-sentence document",
            doc.len()
        )));
    }
    let sentence = doc.sentence(i);
    let others = doc.sentences.iter().enumerate().filter(|(j, _)| *j != i);
    let w = match cfg.rest {
        RestMode::Concat => {
            let rest: Vec<String> = others.flat_map(|(_, s)| s.iter().cloned()).collect();
            if rest.is_empty() {
                0.0
            } else {
                combine(sentence, &rest, cfg.formula)
            }
        }
        RestMode::PerSentenceMax => others
            .map(|(_, s)| combine(sentence, s, cfg.formula))
            .fold(0.0, f64::max),
    };
    Ok(PriorityScore { sentence_index: i, w })
}

pub fn priority_scores(doc: &SentenceSeq, cfg: &ScoringConfig) -> Vec<PriorityScore> {
    (0..doc.len())
        .map(|i| priority_score(i, doc, cfg).expect("index in range"))
        .collect()
}

/// Sorted indices of the sentences selected for masking.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSet {
    pub indices: Vec<usize>,
}

/// Number of sentences masked in a document of `n_sentences`.
pub fn mask_count(n_sentences: usize) -> usize {
    match n_sentences {
        n if n >= 5 => 3,
        4 => 2,
        _ => 1,
    }
}

/// Indices of the `k` largest scores, ties to the earlier position,
/// returned in ascending order.
pub fn select_top_k(scores: &[PriorityScore], k: usize) -> MaskSet {
    let mut order: Vec<&PriorityScore> = scores.iter().collect();
    order.sort_by(|a, b| {
        b.w.total_cmp(&a.w)
            .then(a.sentence_index.cmp(&b.sentence_index))
    });
    let mut indices: Vec<usize> = order.iter().take(k).map(|s| s.sentence_index).collect();
    indices.sort_unstable();
    MaskSet { indices }
}

pub fn select_mask_set(doc: &SentenceSeq, cfg: &ScoringConfig) -> Result<MaskSet> {
    if doc.is_empty() {
        return Err(Error::invalid("cannot select masks in an empty document"));
    }
    Ok(select_top_k(&priority_scores(doc, cfg), mask_count(doc.len())))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedExample {
    pub original_id: String,
    pub masked_source: String,
    pub target: String,
    /// The masked sentences in document order.
    pub masked_sentences: Vec<String>,
}

/// Replaces the masked sentences by `<extra_id_0>`, `<extra_id_1>`, … in
/// document order; the target pairs each sentinel with its sentence.
pub fn emit_masked_example(doc: &SentenceSeq, mask: &MaskSet, id: &str) -> Result<MaskedExample> {
    let mut indices = mask.indices.clone();
    indices.sort_unstable();
    indices.dedup();
    if indices.len() != mask.indices.len() || indices.iter().any(|&i| i >= doc.len()) {
        return Err(Error::invalid(format!(
            "mask {:?} invalid for a {}-sentence document",
            mask.indices,
            doc.len()
        )));
    }
    if indices.len() > MAX_SENTINELS {
        return Err(Error::invalid(format!("at most {MAX_SENTINELS} sentinels are available")));
    }
    let mut source = Vec::new();
    let mut target = Vec::new();
    let mut masked_sentences = Vec::new();
    let mut next = 0;
    for (i, sentence) in doc.sentences.iter().enumerate() {
        if indices.binary_search(&i).is_ok() {
            let s = sentinel(next);
            next += 1;
            source.push(s.clone());
            target.push(s);
            target.push(sentence.join(" "));
            masked_sentences.push(sentence.join(" "));
        } else {
            source.push(sentence.join(" "));
        }
    }
    Ok(MaskedExample {
        original_id: id.to_string(),
        masked_source: source.join(" "),
        target: target.join(" "),
        masked_sentences,
    })
}

/// Substitutes each target span back for its sentinel.
pub fn restore(masked_source: &str, target: &str) -> Result<String> {
    let mut spans: Vec<Vec<&str>> = Vec::new();
    for tok in target.split_whitespace() {
        match sentinel_index(tok) {
            Some(k) if k == spans.len() => spans.push(Vec::new()),
            Some(k) => {
                return Err(Error::invalid(format!(
                    "target sentinel {k} out of order (expected {})",
                    spans.len()
                )))
            }
            None => spans
                .last_mut()
                .ok_or_else(|| Error::invalid("target does not start with a sentinel"))?
                .push(tok),
        }
    }
    let mut out = Vec::new();
    let mut used = 0;
    for tok in masked_source.split_whitespace() {
        match sentinel_index(tok) {
            Some(k) => {
                let span = spans
                    .get(k)
                    .ok_or_else(|| Error::invalid(format!("no target span for sentinel {k}")))?;
                out.extend(span.iter().copied());
                used += 1;
            }
            None => out.push(tok),
        }
    }
    if used != spans.len() {
        return Err(Error::invalid("sentinel count differs between source and target"));
    }
    Ok(out.join(" "))
}

/// One row of the gap-sentence dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GsgRow {
    pub id: String,
    /// Normalized findings text.
    pub findings: String,
    pub masked_findings: String,
    pub gap_target: String,
    pub masked_sentences: Vec<String>,
    pub impression: String,
}

pub fn build_gsg_row(report: &Report, segmenter: &Segmenter, cfg: &ScoringConfig) -> Result<GsgRow> {
    let doc = segmenter.segment(&report.findings);
    let mask = select_mask_set(&doc, cfg)
        .map_err(|e| Error::invalid(format!("report {}: {e}", report.id)))?;
    let ex = emit_masked_example(&doc, &mask, &report.id)?;
    Ok(GsgRow {
        id: report.id.clone(),
        findings: doc.text(),
        masked_findings: ex.masked_source,
        gap_target: ex.target,
        masked_sentences: ex.masked_sentences,
        impression: segmenter.segment(&report.impression).text(),
    })
}

/// One row per report, in corpus order.
pub fn build_gsg_dataset(reports: &[Report], segmenter: &Segmenter, cfg: &ScoringConfig) -> Result<Vec<GsgRow>> {
    reports.iter().map(|r| build_gsg_row(r, segmenter, cfg)).collect()
}

pub fn write_gsg_jsonl(rows: &[GsgRow], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut buf, row)?;
        buf.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_gsg_jsonl(path: &Path) -> Result<Vec<GsgRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
