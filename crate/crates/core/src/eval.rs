//! Decode-and-score harness plus training-fraction sweeps.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{corpus_scores, pair_scores, CorpusScores, MetricRow, PairScores, METRIC_COLUMNS};
use crate::model::{Model, Vocab};

/// Produces a summary for a normalized source text.
pub trait Summarizer {
    fn summarize(&self, source: &str) -> Result<String>;
}

/// Greedy decoding with a trained model.
pub struct GreedySummarizer<'a> {
    model: &'a Model,
    vocab: &'a Vocab,
    max_len: usize,
}

impl<'a> GreedySummarizer<'a> {
    /// `max_len` defaults to the model's `max_tgt`.
    pub fn new(model: &'a Model, vocab: &'a Vocab, max_len: Option<usize>) -> Result<Self> {
        if vocab.len() != model.config.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocabulary has {} entries but the model expects {}",
                vocab.len(),
                model.config.vocab_size
            )));
        }
        Ok(GreedySummarizer {
            model,
            vocab,
            max_len: max_len.unwrap_or(model.config.max_tgt),
        })
    }
}

impl Summarizer for GreedySummarizer<'_> {
    fn summarize(&self, source: &str) -> Result<String> {
        let ids = self.model.greedy_decode(&self.vocab.encode(source), self.max_len)?;
        Ok(self.vocab.decode(&ids))
    }
}

/// Returns a fixed output per source; used to check the scoring pipeline.
pub struct LookupSummarizer {
    pub outputs: HashMap<String, String>,
}

impl Summarizer for LookupSummarizer {
    fn summarize(&self, source: &str) -> Result<String> {
        self.outputs
            .get(source)
            .cloned()
            .ok_or_else(|| Error::invalid("lookup summarizer has no output for this source"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: String,
    pub source: String,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub id: String,
    pub prediction: String,
    pub reference: String,
    #[serde(flatten)]
    pub scores: PairScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scores: CorpusScores,
    pub examples: Vec<ExampleScore>,
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Summarizes every item in order and scores predictions against the
/// references on whitespace tokens.
pub fn evaluate_checkpoint(summarizer: &dyn Summarizer, items: &[EvalItem]) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::invalid("evaluation split is empty"));
    }
    let predictions = items
        .iter()
        .map(|it| summarizer.summarize(&it.source))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(Vec<&str>, Vec<&str>)> = predictions
        .iter()
        .zip(items)
        .map(|(p, it)| (words(p), words(&it.reference)))
        .collect();
    let scores = corpus_scores(&pairs)?;
    let examples = items
        .iter()
        .zip(&predictions)
        .zip(&pairs)
        .map(|((it, prediction), (c, r))| ExampleScore {
            id: it.id.clone(),
            prediction: prediction.clone(),
            reference: it.reference.clone(),
            scores: pair_scores(c, r),
        })
        .collect();
    Ok(EvalReport { scores, examples })
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        self.scores.to_csv()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.scores)?)
    }

    pub fn examples_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.examples {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Keeps `⌈fraction·N⌉` items chosen by a seeded shuffle, in their
/// original order, so a fraction of 1 returns the input unchanged.
pub fn subsample<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Result<Vec<T>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction {fraction} is outside (0, 1]")));
    }
    let k = (fraction * items.len() as f64).ceil() as usize;
    if k == 0 {
        return Err(Error::invalid(format!(
            "fraction {fraction} of {} items leaves no examples",
            items.len()
        )));
    }
    Ok(subsample_n(items, k, seed))
}

/// Keeps `min(k, N)` items, chosen and ordered as in [`subsample`].
pub fn subsample_n<T: Clone>(items: &[T], k: usize, seed: u64) -> Vec<T> {
    if k >= items.len() {
        return items.to_vec();
    }
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut keep = idx[..k].to_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| items[i].clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub fraction: f64,
    pub examples: usize,
    pub scores: CorpusScores,
}

/// Runs `train_and_score` on a seeded subsample for each fraction.
pub fn data_fraction_sweep<T: Clone>(
    data: &[T],
    fractions: &[f64],
    seed: u64,
    mut train_and_score: impl FnMut(&[T]) -> Result<CorpusScores>,
) -> Result<Vec<SweepPoint>> {
    fractions
        .iter()
        .map(|&f| {
            let subset = subsample(data, f, seed)?;
            let scores = train_and_score(&subset)?;
            Ok(SweepPoint {
                fraction: f,
                examples: subset.len(),
                scores,
            })
        })
        .collect()
}

/// `fraction,examples,R-1,...` on the primary scores.
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = format!("fraction,examples,{}\n", METRIC_COLUMNS.join(","));
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.fraction, p.examples, p.scores.primary.csv_cells()));
    }
    out
}

/// Counts adjacent decreases in a metric along the sweep.
pub fn trend_inversions(points: &[SweepPoint], metric: impl Fn(&MetricRow) -> f64) -> usize {
    points
        .windows(2)
        .filter(|w| metric(&w[1].scores.primary) < metric(&w[0].scores.primary))
        .count()
}
