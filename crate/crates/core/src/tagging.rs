//! Keyword extraction from impressions and concept tagging against an
//! MRCONSO-style table.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{is_punctuation, Report, Segmenter};
use crate::error::{Error, Result};
use crate::gsg::is_sentinel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IdfVariant {
    /// `ln(N / df)`
    #[default]
    Plain,
    /// `ln((1 + N) / (1 + df)) + 1`
    Smooth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TfidfConfig {
    pub idf: IdfVariant,
    /// Also extract adjacent word pairs as terms.
    pub bigrams: bool,
}

/// Terms of a tokenized document: words, plus adjacent word pairs when
/// enabled. Punctuation and sentinels break bigrams and are never terms.
pub fn terms(tokens: &[String], bigrams: bool) -> Vec<String> {
    let mut out = Vec::new();
    let mut prev: Option<&str> = None;
    for tok in tokens {
        if is_punctuation(tok) || is_sentinel(tok) {
            prev = None;
            continue;
        }
        out.push(tok.clone());
        if bigrams {
            if let Some(p) = prev {
                out.push(format!("{p} {tok}"));
            }
        }
        prev = Some(tok);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfidfModel {
    /// Term to column, columns in lexicographic term order.
    pub vocabulary: BTreeMap<String, usize>,
    pub idf: Vec<f64>,
    pub doc_count: usize,
    pub config: TfidfConfig,
}

pub fn fit_tfidf(docs: &[Vec<String>], config: TfidfConfig) -> Result<TfidfModel> {
    if docs.is_empty() {
        return Err(Error::invalid("TF-IDF needs at least one document"));
    }
    let mut df: BTreeMap<String, usize> = BTreeMap::new();
    for doc in docs {
        let mut seen: Vec<String> = terms(doc, config.bigrams);
        seen.sort();
        seen.dedup();
        for t in seen {
            *df.entry(t).or_default() += 1;
        }
    }
    let n = docs.len() as f64;
    let mut vocabulary = BTreeMap::new();
    let mut idf = Vec::with_capacity(df.len());
    for (i, (term, d)) in df.into_iter().enumerate() {
        let d = d as f64;
        idf.push(match config.idf {
            IdfVariant::Plain => (n / d).ln(),
            IdfVariant::Smooth => ((1.0 + n) / (1.0 + d)).ln() + 1.0,
        });
        vocabulary.insert(term, i);
    }
    Ok(TfidfModel {
        vocabulary,
        idf,
        doc_count: docs.len(),
        config,
    })
}

impl TfidfModel {
    pub fn idf_of(&self, term: &str) -> Option<f64> {
        self.vocabulary.get(term).map(|&i| self.idf[i])
    }

    /// `tf · idf` for every term of `doc`; raw counts, no normalization.
    pub fn scores(&self, doc: &[String]) -> BTreeMap<String, f64> {
        let mut tf: BTreeMap<String, usize> = BTreeMap::new();
        for t in terms(doc, self.config.bigrams) {
            *tf.entry(t).or_default() += 1;
        }
        tf.into_iter()
            .map(|(t, c)| {
                let idf = self.idf_of(&t).unwrap_or(0.0);
                (t, c as f64 * idf)
            })
            .collect()
    }

    pub fn score(&self, term: &str, doc: &[String]) -> f64 {
        self.scores(doc).get(term).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyword {
    pub term: String,
    /// Highest score over the documents.
    pub score: f64,
}

/// Top `n` terms by their maximum per-document score, ties broken
/// lexicographically. Terms that never score above zero are excluded.
pub fn top_keywords(model: &TfidfModel, docs: &[Vec<String>], n: usize) -> Result<Vec<Keyword>> {
    if n == 0 {
        return Err(Error::invalid("top_keywords needs n >= 1"));
    }
    let mut best: BTreeMap<String, f64> = BTreeMap::new();
    for doc in docs {
        for (t, s) in model.scores(doc) {
            let e = best.entry(t).or_insert(0.0);
            if s > *e {
                *e = s;
            }
        }
    }
    let mut ranked: Vec<Keyword> = best
        .into_iter()
        .filter(|(_, s)| *s > 0.0)
        .map(|(term, score)| Keyword { term, score })
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.term.cmp(&b.term)));
    ranked.truncate(n);
    Ok(ranked)
}

/// Lowercase, trimmed, inner whitespace collapsed.
pub fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptRow {
    pub cui: String,
    pub lat: String,
    pub sab: String,
    pub tty: String,
    #[serde(rename = "str")]
    pub string: String,
    /// `normalize(string)`, the matching key.
    pub norm: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConceptLoad {
    /// English rows in file order.
    pub rows: Vec<ConceptRow>,
    /// Well-formed rows dropped for a non-English LAT.
    pub non_english: usize,
    /// (1-based line, reason) for malformed rows.
    pub skipped: Vec<(usize, String)>,
}

const RRF_FIELDS: usize = 18;

fn valid_cui(cui: &str) -> bool {
    cui.len() == 8 && cui.starts_with('C') && cui[1..].bytes().all(|b| b.is_ascii_digit())
}

/// Parses pipe-delimited MRCONSO rows. One trailing `|` per row is
/// tolerated. Fields used (1-based): CUI 1, LAT 2, SAB 12, TTY 13, STR 15.
pub fn parse_concepts(text: &str) -> ConceptLoad {
    let mut out = ConceptLoad::default();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut fields: Vec<&str> = line.split('|').collect();
        if fields.len() == RRF_FIELDS + 1 && fields.last() == Some(&"") {
            fields.pop();
        }
        if fields.len() != RRF_FIELDS {
            let reason = format!("expected {RRF_FIELDS} fields, found {}", fields.len());
            log::warn!("concept table line {line_no}: {reason}");
            out.skipped.push((line_no, reason));
            continue;
        }
        if !valid_cui(fields[0]) {
            let reason = format!("invalid CUI {:?}", fields[0]);
            log::warn!("concept table line {line_no}: {reason}");
            out.skipped.push((line_no, reason));
            continue;
        }
        if fields[1] != "ENG" {
            out.non_english += 1;
            continue;
        }
        out.rows.push(ConceptRow {
            cui: fields[0].to_string(),
            lat: fields[1].to_string(),
            sab: fields[11].to_string(),
            tty: fields[12].to_string(),
            string: fields[14].to_string(),
            norm: normalize(fields[14]),
        });
    }
    out
}

pub fn load_concepts(path: &Path) -> Result<ConceptLoad> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_concepts(&text))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tag {
    pub keyword: String,
    pub cui: String,
    #[serde(rename = "str")]
    pub string: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagAssignment {
    pub report_id: String,
    pub tags: Vec<Tag>,
}

/// Tags each report with the keywords that both match a concept string
/// exactly (after normalization) and occur in its impression. The first
/// matching concept row wins; tags follow first occurrence in the
/// impression.
pub fn assign_tags(
    keywords: &[String],
    concepts: &[ConceptRow],
    impressions: &[(String, Vec<String>)],
    bigrams: bool,
) -> Vec<TagAssignment> {
    let mut by_norm: HashMap<&str, &ConceptRow> = HashMap::new();
    for row in concepts {
        by_norm.entry(row.norm.as_str()).or_insert(row);
    }
    let matched: HashMap<String, &ConceptRow> = keywords
        .iter()
        .filter_map(|k| {
            let nk = normalize(k);
            by_norm.get(nk.as_str()).map(|row| (nk, *row))
        })
        .collect();
    impressions
        .iter()
        .map(|(id, tokens)| {
            let mut tags: Vec<Tag> = Vec::new();
            for term in terms(tokens, bigrams) {
                if let Some(row) = matched.get(&term) {
                    if !tags.iter().any(|t| t.keyword == term) {
                        tags.push(Tag {
                            keyword: term.clone(),
                            cui: row.cui.clone(),
                            string: row.string.clone(),
                        });
                    }
                }
            }
            TagAssignment {
                report_id: id.clone(),
                tags,
            }
        })
        .collect()
}

pub const NO_TAGS: &str = "none";

/// A findings-to-tags training pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagRow {
    pub id: String,
    pub findings: String,
    pub tags: Vec<Tag>,
    /// Space-joined tag keywords, or `none`.
    pub target: String,
}

pub fn build_tag_dataset(
    reports: &[Report],
    assignments: &[TagAssignment],
    segmenter: &Segmenter,
) -> Vec<TagRow> {
    let by_id: HashMap<&str, &TagAssignment> =
        assignments.iter().map(|a| (a.report_id.as_str(), a)).collect();
    reports
        .iter()
        .map(|r| {
            let tags = by_id.get(r.id.as_str()).map(|a| a.tags.clone()).unwrap_or_default();
            let target = if tags.is_empty() {
                NO_TAGS.to_string()
            } else {
                tags.iter().map(|t| t.keyword.as_str()).collect::<Vec<_>>().join(" ")
            };
            TagRow {
                id: r.id.clone(),
                findings: segmenter.segment(&r.findings).text(),
                tags,
                target,
            }
        })
        .collect()
}

pub fn write_tag_jsonl(rows: &[TagRow], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut buf, row)?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_tag_jsonl(path: &Path) -> Result<Vec<TagRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Recovers assignments from dataset rows.
pub fn assignments_from_rows(rows: &[TagRow]) -> Vec<TagAssignment> {
    rows.iter()
        .map(|r| TagAssignment {
            report_id: r.id.clone(),
            tags: r.tags.clone(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn rrf(cui: &str, lat: &str, s: &str) -> String {
        format!("{cui}|{lat}|P|L1|PF|S1|Y|A1||||MSH|PT|D1|{s}|0|N||")
    }

    #[test]
    fn hand_tfidf_example() {
        let docs = vec![toks("cough fever"), toks("cough")];
        let m = fit_tfidf(&docs, TfidfConfig::default()).unwrap();
        assert!((m.score("fever", &docs[0]) - 2f64.ln()).abs() < 1e-12);
        assert_eq!(m.score("cough", &docs[0]), 0.0);
        assert_eq!(m.score("cough", &docs[1]), 0.0);
        let k = top_keywords(&m, &docs, 1).unwrap();
        assert_eq!(k.len(), 1);
        assert_eq!(k[0].term, "fever");
        assert!(fit_tfidf(&[], TfidfConfig::default()).is_err());
    }

    #[test]
    fn degenerate_corpora_have_no_keywords() {
        let one = vec![toks("a b c")];
        let m = fit_tfidf(&one, TfidfConfig::default()).unwrap();
        assert!(m.idf.iter().all(|&x| x == 0.0));
        let same = vec![toks("x y"), toks("x y")];
        let m = fit_tfidf(&same, TfidfConfig::default()).unwrap();
        assert!(top_keywords(&m, &same, 10).unwrap().is_empty());
    }

    #[test]
    fn ties_break_lexicographically_and_n_truncates() {
        let docs = vec![toks("b a"), toks("c")];
        let m = fit_tfidf(&docs, TfidfConfig::default()).unwrap();
        let k: Vec<String> = top_keywords(&m, &docs, 10).unwrap().into_iter().map(|k| k.term).collect();
        assert_eq!(k, vec!["a", "b", "c"]);
        assert_eq!(top_keywords(&m, &docs, 2).unwrap().len(), 2);
        assert!(top_keywords(&m, &docs, 0).is_err());
    }

    #[test]
    fn bigrams_respect_punctuation() {
        assert_eq!(terms(&toks("left effusion . mild"), true), vec!["left", "effusion", "left effusion", "mild"]);
        assert_eq!(terms(&toks("left effusion"), false), vec!["left", "effusion"]);
    }

    #[test]
    fn concept_parsing_filters_and_skips() {
        let text = [
            rrf("C0032285", "ENG", "Pneumonia"),
            rrf("C0032285", "SPA", "Neumonia"),
            "C0000001|ENG|too|few".to_string(),
            rrf("X123", "ENG", "bad id"),
            rrf("C0013404", "ENG", "  Dyspnea "),
        ]
        .join("\n");
        let load = parse_concepts(&text);
        assert_eq!(load.rows.len(), 2);
        assert_eq!(load.non_english, 1);
        assert_eq!(load.skipped.iter().map(|s| s.0).collect::<Vec<_>>(), vec![3, 4]);
        assert_eq!(load.rows[1].norm, "dyspnea");
        assert_eq!(load.rows[0].sab, "MSH");
        assert_eq!(load.rows[0].tty, "PT");
        // without the trailing delimiter
        let bare = rrf("C0032285", "ENG", "Pneumonia");
        assert_eq!(parse_concepts(bare.strip_suffix('|').unwrap()).rows.len(), 1);
    }

    #[test]
    fn tags_follow_impression_order_and_require_occurrence() {
        let concepts = parse_concepts(&[rrf("C0032285", "ENG", "Pneumonia"), rrf("C0013404", "ENG", "effusion")].join("\n")).rows;
        let kw = vec!["pneumonia".to_string(), "effusion".to_string(), "absent".to_string()];
        let imps = vec![
            ("r1".to_string(), toks("small effusion and pneumonia")),
            ("r2".to_string(), toks("no acute findings")),
        ];
        let a = assign_tags(&kw, &concepts, &imps, false);
        let got: Vec<&str> = a[0].tags.iter().map(|t| t.keyword.as_str()).collect();
        assert_eq!(got, vec!["effusion", "pneumonia"]);
        assert_eq!(a[0].tags[1].cui, "C0032285");
        assert_eq!(a[0].tags[1].string, "Pneumonia");
        assert!(a[1].tags.is_empty());
    }

    #[test]
    fn dataset_rows_and_roundtrip() {
        let reports = vec![
            Report { id: "r1".into(), findings: "Left effusion.".into(), impression: "effusion".into() },
            Report { id: "r2".into(), findings: "Clear.".into(), impression: "normal".into() },
        ];
        let assignments = vec![TagAssignment {
            report_id: "r1".into(),
            tags: vec![
                Tag { keyword: "fever".into(), cui: "C0015967".into(), string: "Fever".into() },
                Tag { keyword: "effusion".into(), cui: "C0013687".into(), string: "Effusion".into() },
            ],
        }];
        let rows = build_tag_dataset(&reports, &assignments, &Segmenter::default());
        assert_eq!(rows[0].target, "fever effusion");
        assert_eq!(rows[1].target, NO_TAGS);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tags.jsonl");
        write_tag_jsonl(&rows, &p).unwrap();
        let back = read_tag_jsonl(&p).unwrap();
        assert_eq!(back, rows);
        assert_eq!(assignments_from_rows(&back)[0], assignments[0]);
    }
}
