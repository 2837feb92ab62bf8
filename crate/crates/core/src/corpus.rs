//! Report corpora: parsing, the findings/impression length filter, sentence
//! segmentation, the seeded 8:1:1 split and per-section statistics.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gsg::is_sentinel;

/// One radiology record. Sections are kept verbatim; normalization happens
/// in [`Segmenter`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub id: String,
    pub findings: String,
    pub impression: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
}

/// A record the parser could not turn into a [`Report`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejected {
    pub line: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Default, Clone)]
pub struct ParseOutcome {
    pub reports: Vec<Report>,
    pub rejected: Vec<Rejected>,
}

pub fn parse_reports(path: &Path, format: CorpusFormat) -> Result<ParseOutcome> {
    match format {
        CorpusFormat::Jsonl => {
            let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
            parse_jsonl(BufReader::new(file), path)
        }
    }
}

fn parse_jsonl<R: BufRead>(reader: R, path: &Path) -> Result<ParseOutcome> {
    let mut out = ParseOutcome::default();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let reject = |id: Option<String>, reason: &str| Rejected {
            line: line_no,
            id,
            reason: reason.to_string(),
        };
        let value: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("{}:{line_no}: malformed record: {e}", path.display());
                out.rejected.push(reject(None, "malformed record"));
                continue;
            }
        };
        let field = |key: &str| value.get(key).and_then(|v| v.as_str()).map(str::to_string);
        let id = match field("id") {
            Some(id) if !id.trim().is_empty() => id,
            _ => {
                out.rejected.push(reject(None, "missing id"));
                continue;
            }
        };
        let (Some(findings), Some(impression)) = (field("findings"), field("impression")) else {
            out.rejected.push(reject(Some(id), "missing section"));
            continue;
        };
        if !seen.insert(id.clone()) {
            out.rejected.push(reject(Some(id), "duplicate id"));
            continue;
        }
        out.reports.push(Report {
            id,
            findings,
            impression,
        });
    }
    Ok(out)
}

/// Optional pre-step for raw report text: pulls the `FINDINGS:` and
/// `IMPRESSION:` sections out by case-insensitive header match. A section
/// runs until the next `WORD:` style header or the end of the text.
pub fn extract_sections(raw: &str) -> (Option<String>, Option<String>) {
    let lower = raw.to_lowercase();
    // Lowercasing can change byte offsets for some scripts; fall back to the
    // lowered text in that case so slicing stays on char boundaries.
    let source = if lower.len() == raw.len() { raw } else { lower.as_str() };
    let headers = header_positions(&lower);
    let section = |name: &str| {
        let pos = headers.iter().position(|(_, _, h)| h == name)?;
        let (_, body_start, _) = headers[pos];
        let end = headers.get(pos + 1).map_or(source.len(), |h| h.0);
        let text = source[body_start..end].split_whitespace().collect::<Vec<_>>().join(" ");
        (!text.is_empty()).then_some(text)
    };
    (section("findings"), section("impression"))
}

fn header_positions(lower: &str) -> Vec<(usize, usize, String)> {
    let mut out = Vec::new();
    let bytes = lower.as_bytes();
    let mut start = 0;
    while start < bytes.len() {
        // A header is a run of letters/spaces ending in ':' at line start.
        let line_end = lower[start..].find('\n').map_or(lower.len(), |p| start + p);
        let line = &lower[start..line_end];
        let trimmed_off = line.len() - line.trim_start().len();
        if let Some(colon) = line.find(':') {
            let name = line[trimmed_off..colon].trim();
            if !name.is_empty() && name.chars().all(|c| c.is_ascii_alphabetic() || c == ' ') {
                out.push((start + trimmed_off, start + colon + 1, name.to_string()));
            }
        }
        start = line_end + 1;
    }
    out
}

/// Why [`filter_reports`] dropped a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropReason {
    MissingSection,
    ShortFindings,
    ShortImpression,
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DropReason::MissingSection => "missing-section",
            DropReason::ShortFindings => "short-findings",
            DropReason::ShortImpression => "short-impression",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub min_findings_words: usize,
    pub min_impression_words: usize,
    /// Count punctuation tokens toward the word thresholds.
    pub count_punctuation: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_findings_words: 10,
            min_impression_words: 2,
            count_punctuation: false,
        }
    }
}

#[derive(Debug, Default, Clone)]
pub struct FilterOutcome {
    pub kept: Vec<Report>,
    pub dropped: Vec<(String, DropReason)>,
}

pub fn filter_reports(reports: &[Report], segmenter: &Segmenter, cfg: &FilterConfig) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for report in reports {
        match classify(report, segmenter, cfg) {
            None => out.kept.push(report.clone()),
            Some(reason) => out.dropped.push((report.id.clone(), reason)),
        }
    }
    out
}

fn classify(report: &Report, segmenter: &Segmenter, cfg: &FilterConfig) -> Option<DropReason> {
    if report.findings.trim().is_empty() || report.impression.trim().is_empty() {
        return Some(DropReason::MissingSection);
    }
    let words = |text: &str| word_count(&segmenter.tokenize(text), cfg.count_punctuation);
    if words(&report.findings) < cfg.min_findings_words {
        return Some(DropReason::ShortFindings);
    }
    if words(&report.impression) < cfg.min_impression_words {
        return Some(DropReason::ShortImpression);
    }
    None
}

pub fn is_punctuation(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| c.is_ascii_punctuation())
}

pub fn word_count(tokens: &[String], count_punctuation: bool) -> usize {
    tokens
        .iter()
        .filter(|t| count_punctuation || !is_punctuation(t))
        .count()
}

/// Ordered sentences, each a list of normalized tokens.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSeq {
    pub sentences: Vec<Vec<String>>,
}

impl SentenceSeq {
    pub fn new(sentences: Vec<Vec<String>>) -> Self {
        SentenceSeq { sentences }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn sentence(&self, i: usize) -> &[String] {
        &self.sentences[i]
    }

    /// The token stream with sentence boundaries removed.
    pub fn tokens(&self) -> Vec<String> {
        self.sentences.iter().flatten().cloned().collect()
    }

    pub fn sentence_text(&self, i: usize) -> String {
        self.sentences[i].join(" ")
    }

    pub fn text(&self) -> String {
        self.tokens().join(" ")
    }
}

pub const DEFAULT_ABBREVIATIONS: &[&str] = &[
    "e.g.", "i.e.", "dr.", "vs.", "approx.", "cf.", "fig.", "no.", "st.",
];

/// Rule-based sentence splitter and tokenizer.
///
/// Text is lowercased, split on whitespace, and leading/trailing ASCII
/// punctuation is detached into single-character tokens. A sentence ends
/// after a chunk whose detached tail contains `.`, `?` or `!`, unless the
/// chunk is on the abbreviation guard list.
#[derive(Debug, Clone)]
pub struct Segmenter {
    abbreviations: HashSet<String>,
}

impl Default for Segmenter {
    fn default() -> Self {
        Segmenter::new(DEFAULT_ABBREVIATIONS.iter().copied())
    }
}

impl Segmenter {
    pub fn new<I, S>(abbreviations: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Segmenter {
            abbreviations: abbreviations
                .into_iter()
                .map(|s| s.as_ref().to_lowercase())
                .collect(),
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        self.segment(text).tokens()
    }

    pub fn segment(&self, text: &str) -> SentenceSeq {
        let mut sentences = Vec::new();
        let mut current: Vec<String> = Vec::new();
        for chunk in text.split_whitespace() {
            let ends_sentence = self.push_chunk(chunk, &mut current);
            if ends_sentence && !current.is_empty() {
                sentences.push(std::mem::take(&mut current));
            }
        }
        if !current.is_empty() {
            sentences.push(current);
        }
        SentenceSeq { sentences }
    }

    /// Appends the tokens of one whitespace chunk; returns whether the chunk
    /// terminates a sentence.
    fn push_chunk(&self, chunk: &str, out: &mut Vec<String>) -> bool {
        if is_sentinel(chunk) {
            out.push(chunk.to_string());
            return false;
        }
        let lower = chunk.to_lowercase();
        let body_start = lower
            .char_indices()
            .find(|(_, c)| !c.is_ascii_punctuation())
            .map_or(lower.len(), |(i, _)| i);
        for c in lower[..body_start].chars() {
            out.push(c.to_string());
        }
        let rest = &lower[body_start..];
        if rest.is_empty() {
            // Pure punctuation chunk, e.g. a stray "." after a space.
            return lower.chars().any(is_terminator);
        }
        if self.abbreviations.contains(rest) {
            out.push(rest.to_string());
            return false;
        }
        let body_end = rest
            .char_indices()
            .rev()
            .find(|(_, c)| !c.is_ascii_punctuation())
            .map(|(i, c)| i + c.len_utf8())
            .unwrap_or(0);
        let (body, tail) = rest.split_at(body_end);
        out.push(body.to_string());
        for c in tail.chars() {
            out.push(c.to_string());
        }
        tail.chars().any(is_terminator)
    }
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '?' | '!')
}

/// Disjoint train/val/test id sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Split sizes for `n` records: train gets ⌈0.8n⌉, val ⌊0.1n⌋, test the rest.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (8 * n).div_ceil(10);
    let val = n / 10;
    (train, val, n - train - val)
}

pub fn split_corpus(reports: &[Report], seed: u64) -> Result<CorpusSplit> {
    if reports.len() < 10 {
        return Err(Error::invalid(format!(
            "split requires at least 10 reports, got {}",
            reports.len()
        )));
    }
    let mut ids: Vec<String> = reports.iter().map(|r| r.id.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let (n_train, n_val, _) = split_sizes(ids.len());
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    Ok(CorpusSplit {
        seed,
        train: ids,
        val,
        test,
    })
}

/// Averages for one section, matching the columns of the usual dataset
/// summary table: sentences per section, words per sentence, words per
/// section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SectionStats {
    pub sentences: f64,
    pub words_per_sentence: f64,
    pub words: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub reports: usize,
    /// `None` for an empty corpus.
    pub findings: Option<SectionStats>,
    pub impression: Option<SectionStats>,
}

pub const STATS_HEADER: &str = "Dataset,# Reports,Findings # S,Findings # W/S,Findings # Source W,Impressions # S,Impressions # W/S,Impressions # Source W";

/// Words are counted with `count_punctuation`; words/sentence is the pooled
/// ratio (total words over total sentences).
pub fn corpus_stats(reports: &[Report], segmenter: &Segmenter, count_punctuation: bool) -> CorpusStats {
    let section = |get: fn(&Report) -> &str| -> Option<SectionStats> {
        if reports.is_empty() {
            return None;
        }
        let (mut sentences, mut words) = (0usize, 0usize);
        for r in reports {
            let seq = segmenter.segment(get(r));
            sentences += seq.len();
            words += word_count(&seq.tokens(), count_punctuation);
        }
        let n = reports.len() as f64;
        Some(SectionStats {
            sentences: sentences as f64 / n,
            words_per_sentence: if sentences == 0 { 0.0 } else { words as f64 / sentences as f64 },
            words: words as f64 / n,
        })
    };
    CorpusStats {
        reports: reports.len(),
        findings: section(|r| &r.findings),
        impression: section(|r| &r.impression),
    }
}

impl CorpusStats {
    /// One CSV row (no header); absent statistics are empty cells.
    pub fn csv_row(&self, dataset: &str) -> String {
        let cells = |s: &Option<SectionStats>| match s {
            Some(s) => format!("{:.2},{:.2},{:.2}", s.sentences, s.words_per_sentence, s.words),
            None => ",,".to_string(),
        };
        format!(
            "{dataset},{},{},{}",
            self.reports,
            cells(&self.findings),
            cells(&self.impression)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rep(id: &str, findings: &str, impression: &str) -> Report {
        Report {
            id: id.into(),
            findings: findings.into(),
            impression: impression.into(),
        }
    }

    fn words(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn parses_jsonl_with_rejects() {
        let text = concat!(
            r#"{"id":"r1","findings":"a b","impression":"c d"}"#,
            "\n",
            r#"{"id":"r2","findings":"a b"}"#,
            "\n",
            "not json\n",
            "\n",
            r#"{"id":"r1","findings":"x","impression":"y"}"#,
            "\n"
        );
        let out = parse_jsonl(text.as_bytes(), Path::new("mem")).unwrap();
        assert_eq!(out.reports, vec![rep("r1", "a b", "c d")]);
        let reasons: Vec<_> = out.rejected.iter().map(|r| (r.line, r.reason.as_str())).collect();
        assert_eq!(
            reasons,
            vec![(2, "missing section"), (3, "malformed record"), (5, "duplicate id")]
        );
    }

    #[test]
    fn empty_file_parses_to_nothing() {
        let out = parse_jsonl("".as_bytes(), Path::new("mem")).unwrap();
        assert!(out.reports.is_empty());
        assert!(out.rejected.is_empty());
    }

    #[test]
    fn filter_boundaries() {
        let seg = Segmenter::default();
        let cfg = FilterConfig::default();
        let reports = vec![
            rep("short-f", &words(9), &words(2)),
            rep("short-i", &words(10), &words(1)),
            rep("ok", &words(10), &words(2)),
            rep("missing", "", &words(2)),
        ];
        let out = filter_reports(&reports, &seg, &cfg);
        assert_eq!(out.kept.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["ok"]);
        assert_eq!(
            out.dropped,
            vec![
                ("short-f".to_string(), DropReason::ShortFindings),
                ("short-i".to_string(), DropReason::ShortImpression),
                ("missing".to_string(), DropReason::MissingSection),
            ]
        );
        assert_eq!(DropReason::ShortFindings.to_string(), "short-findings");
    }

    #[test]
    fn punctuation_excluded_from_word_counts_by_default() {
        let seg = Segmenter::default();
        // 9 words plus a period: short under the default, long enough when
        // punctuation counts.
        let r = rep("p", &format!("{}.", words(9)), "two words");
        assert_eq!(classify(&r, &seg, &FilterConfig::default()), Some(DropReason::ShortFindings));
        let cfg = FilterConfig {
            count_punctuation: true,
            ..FilterConfig::default()
        };
        assert_eq!(classify(&r, &seg, &cfg), None);
    }

    #[test]
    fn segments_two_sentences() {
        let seq = Segmenter::default().segment("No effusion. Heart normal.");
        assert_eq!(
            seq.sentences,
            vec![vec!["no", "effusion", "."], vec!["heart", "normal", "."]]
        );
    }

    #[test]
    fn segments_empty_and_guarded() {
        let seg = Segmenter::default();
        assert!(seg.segment("").is_empty());
        assert_eq!(seg.segment("e.g. stable").len(), 1);
        let unguarded = Segmenter::new(Vec::<String>::new());
        assert_eq!(unguarded.segment("e.g. stable").len(), 2);
    }

    #[test]
    fn keeps_decimals_and_sentinels_whole() {
        let seq = Segmenter::default().segment("Nodule 1.5 cm (stable). <extra_id_0> Heart ok!");
        assert_eq!(
            seq.sentences,
            vec![
                vec!["nodule", "1.5", "cm", "(", "stable", ")", "."],
                vec!["<extra_id_0>", "heart", "ok", "!"],
            ]
        );
    }

    #[test]
    fn split_sizes_follow_rounding_policy() {
        assert_eq!(split_sizes(125_287), (100_230, 12_528, 12_529));
        assert_eq!(split_sizes(10), (8, 1, 1));
        assert_eq!(split_sizes(11), (9, 1, 1));
    }

    #[test]
    fn split_is_deterministic_partition() {
        let reports: Vec<_> = (0..10).map(|i| rep(&format!("r{i}"), "", "")).collect();
        let a = split_corpus(&reports, 7).unwrap();
        let b = split_corpus(&reports, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (8, 1, 1));
        assert!(split_corpus(&reports[..9], 7).is_err());
    }

    #[test]
    fn stats_on_hand_counted_fixture() {
        let seg = Segmenter::default();
        let r = rep("r", "a b c d e. f g h i j.", "k l.");
        let stats = corpus_stats(&[r], &seg, false);
        let f = stats.findings.unwrap();
        assert_eq!((f.sentences, f.words_per_sentence, f.words), (2.0, 5.0, 10.0));
        let empty = corpus_stats(&[], &seg, false);
        assert!(empty.findings.is_none() && empty.impression.is_none());
        assert_eq!(empty.csv_row("x"), "x,0,,,,,,");
    }

    #[test]
    fn extracts_headed_sections() {
        let raw = "EXAMINATION: chest\nFindings: No effusion.\n  Heart normal.\nIMPRESSION: Normal chest.\n";
        let (f, i) = extract_sections(raw);
        assert_eq!(f.as_deref(), Some("No effusion. Heart normal."));
        assert_eq!(i.as_deref(), Some("Normal chest."));
        assert_eq!(extract_sections("nothing here"), (None, None));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn segment_preserves_token_stream(text in "[a-zA-Z.,!? ()]{0,60}") {
                let seg = Segmenter::default();
                let seq = seg.segment(&text);
                prop_assert_eq!(seq.tokens(), seg.tokenize(&text));
                // Normalization is a fixed point.
                prop_assert_eq!(seg.tokenize(&seq.text()), seq.tokens());
                prop_assert!(seq.sentences.iter().flatten().all(|t| !t.is_empty() && !t.contains(char::is_whitespace)));
            }

            #[test]
            fn filter_is_idempotent(lens in proptest::collection::vec((0usize..14, 0usize..4), 0..20)) {
                let seg = Segmenter::default();
                let cfg = FilterConfig::default();
                let reports: Vec<_> = lens.iter().enumerate()
                    .map(|(i, (f, m))| rep(&format!("r{i}"), &words(*f), &words(*m)))
                    .collect();
                let once = filter_reports(&reports, &seg, &cfg);
                let twice = filter_reports(&once.kept, &seg, &cfg);
                prop_assert_eq!(&once.kept, &twice.kept);
                prop_assert!(twice.dropped.is_empty());
            }

            #[test]
            fn split_partitions(n in 10usize..200, seed in any::<u64>()) {
                let reports: Vec<_> = (0..n).map(|i| rep(&format!("r{i}"), "", "")).collect();
                let s = split_corpus(&reports, seed).unwrap();
                let mut all: Vec<_> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
                all.sort();
                all.dedup();
                prop_assert_eq!(all.len(), n);
                prop_assert!(s.val.len().abs_diff(n / 10) <= 1);
                prop_assert!(s.test.len().abs_diff(n / 10) <= 1);
            }
        }
    }
}
