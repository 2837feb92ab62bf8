//! Seeded synthetic chest-radiograph reports and concept tables for tests,
//! benches and the bundled fixtures. Nothing here resembles real patients.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{DropReason, Report, Segmenter};
use crate::error::Result;
use crate::gsg::{build_gsg_dataset, ScoringConfig};
use crate::model::Vocab;
use crate::training::Example;

const NORMAL: &[&str] = &[
    "the lungs are clear.",
    "heart size is normal.",
    "the mediastinal contours are unremarkable.",
    "no pleural effusion or pneumothorax is seen.",
    "the osseous structures are intact.",
    "there is no focal consolidation.",
    "pulmonary vasculature is within normal limits.",
    "the hila are unremarkable.",
];

const SIDES: &[&str] = &["left", "right"];
const SIZES: &[&str] = &["small", "moderate", "large"];
const DEGREES: &[&str] = &["mild", "moderate"];
const DEVICES: &[&str] = &["endotracheal tube", "nasogastric tube", "right internal jugular catheter"];

/// One abnormal finding as (findings sentence, impression sentence).
fn abnormal(rng: &mut ChaCha8Rng) -> (String, String) {
    let side = *SIDES.choose(rng).unwrap();
    let size = *SIZES.choose(rng).unwrap();
    let degree = *DEGREES.choose(rng).unwrap();
    match rng.gen_range(0..8) {
        0 => (
            format!("there is a {size} {side} pleural effusion."),
            format!("{size} {side} pleural effusion."),
        ),
        1 => (
            format!("the heart is {degree}ly enlarged."),
            format!("{degree} cardiomegaly."),
        ),
        2 => (
            format!("patchy opacity in the {side} lower lobe may represent pneumonia."),
            format!("{side} lower lobe pneumonia."),
        ),
        3 => (
            format!("there is a {size} {side} apical pneumothorax."),
            format!("{size} {side} pneumothorax."),
        ),
        4 => (
            format!("there is {degree} pulmonary edema."),
            format!("{degree} pulmonary edema."),
        ),
        5 => (
            format!("linear opacities at the {side} base suggest atelectasis."),
            format!("{side} basilar atelectasis."),
        ),
        6 => {
            let device = *DEVICES.choose(rng).unwrap();
            (
                format!("the {device} terminates in standard position."),
                format!("{device} in standard position."),
            )
        }
        _ => (
            format!("there is a {size} nodule in the {side} upper lobe."),
            format!("{side} upper lobe nodule, recommend follow up ct."),
        ),
    }
}

/// `n` well-formed reports with ids `r0000`, `r0001`, ...
pub fn synth_reports(n: usize, seed: u64) -> Vec<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let n_abnormal = if rng.gen_bool(0.2) { 0 } else { rng.gen_range(1..=3) };
            let n_normal = rng.gen_range(2..=4);
            let mut findings: Vec<String> = NORMAL
                .choose_multiple(&mut rng, n_normal)
                .map(|s| s.to_string())
                .collect();
            let mut impression = Vec::new();
            for _ in 0..n_abnormal {
                let (f, imp) = abnormal(&mut rng);
                if !findings.contains(&f) {
                    findings.push(f);
                    impression.push(imp);
                }
            }
            findings.shuffle(&mut rng);
            if impression.is_empty() {
                impression.push("no acute cardiopulmonary process.".to_string());
            }
            Report {
                id: format!("r{i:04}"),
                findings: findings.join(" "),
                impression: impression.join(" "),
            }
        })
        .collect()
}

/// JSONL corpus text: the synthetic reports followed by a few defective
/// records (malformed line, missing section, duplicate id, short sections).
pub fn synth_corpus_jsonl(n: usize, seed: u64, with_defects: bool) -> String {
    let mut out = String::new();
    let reports = synth_reports(n, seed);
    for r in &reports {
        out.push_str(&serde_json::to_string(r).expect("report serializes"));
        out.push('\n');
    }
    if with_defects {
        out.push_str("{\"id\": \"bad-json\", \"findings\": \n");
        out.push_str("{\"id\": \"no-impression\", \"findings\": \"the lungs are clear. heart size is normal. the hila are unremarkable.\"}\n");
        if let Some(first) = reports.first() {
            out.push_str(&serde_json::to_string(first).expect("report serializes"));
            out.push('\n');
        }
        let short_findings = Report {
            id: "short-findings".into(),
            findings: "the lungs are clear and heart size is normal.".into(),
            impression: "no acute cardiopulmonary process.".into(),
        };
        let short_impression = Report {
            id: "short-impression".into(),
            findings: "the lungs are clear. heart size is normal. the osseous structures are intact.".into(),
            impression: "normal.".into(),
        };
        for r in [short_findings, short_impression] {
            out.push_str(&serde_json::to_string(&r).expect("report serializes"));
            out.push('\n');
        }
    }
    out
}

fn words(n: usize) -> String {
    const BANK: &[&str] = &["lungs", "clear", "heart", "normal", "size", "no", "acute", "effusion", "seen", "stable"];
    (0..n).map(|i| BANK[i % BANK.len()]).collect::<Vec<_>>().join(" ")
}

/// Fifty labelled reports probing the length filter at its boundaries.
/// Labels come from construction, not from the filter under test.
pub fn adversarial_filter_fixture() -> Vec<(Report, Option<DropReason>)> {
    let mut out = Vec::new();
    fn add(out: &mut Vec<(Report, Option<DropReason>)>, findings: String, impression: String, label: Option<DropReason>) {
        let id = format!("adv{:02}", out.len());
        out.push((Report { id, findings, impression }, label));
    }
    for f in [9, 10, 11] {
        for i in [1, 2, 3] {
            let label = if f < 10 {
                Some(DropReason::ShortFindings)
            } else if i < 2 {
                Some(DropReason::ShortImpression)
            } else {
                None
            };
            add(&mut out, words(f), words(i), label);
        }
    }
    // Punctuation never counts as a word.
    for f in [9, 10] {
        let label = (f < 10).then_some(DropReason::ShortFindings);
        add(&mut out, format!("{} . , ; :", words(f)), words(2), label);
        add(&mut out, format!("{}.", words(f)), words(2), label);
        add(&mut out, words(f).replace(' ', " , "), "no change .".into(), label);
    }
    for i in [1, 2] {
        let label = (i < 2).then_some(DropReason::ShortImpression);
        add(&mut out, words(10), format!("{} .", words(i)), label);
        add(&mut out, words(10), format!("{}!!", words(i)), label);
        add(&mut out, words(10), format!(". {} ?", words(i)), label);
    }
    // Multi-sentence sections split across terminators.
    add(&mut out, "lungs clear. heart normal. no effusion. size stable. acute seen.".into(), "all clear.".into(), None);
    add(&mut out, "lungs clear. heart normal. no effusion. size stable. acute.".into(), "all clear.".into(), Some(DropReason::ShortFindings));
    add(&mut out, "lungs clear. heart normal. no effusion. size stable. acute seen.".into(), "clear.".into(), Some(DropReason::ShortImpression));
    // Missing sections win over length checks.
    add(&mut out, String::new(), words(3), Some(DropReason::MissingSection));
    add(&mut out, words(12), String::new(), Some(DropReason::MissingSection));
    add(&mut out, "   ".into(), "  \t ".into(), Some(DropReason::MissingSection));
    add(&mut out, " \n ".into(), words(1), Some(DropReason::MissingSection));
    add(&mut out, words(3), " ".into(), Some(DropReason::MissingSection));
    // Both sections short: findings is checked first.
    add(&mut out, words(2), words(1), Some(DropReason::ShortFindings));
    add(&mut out, words(9), words(0), Some(DropReason::MissingSection));
    // Extra whitespace and line breaks do not change counts.
    add(&mut out, format!("  {}  ", words(10).replace(' ', "\n")), format!("\t{}\t", words(2)), None);
    add(&mut out, words(9).replace(' ', "   "), words(2), Some(DropReason::ShortFindings));
    // Slashes and stray periods inside a section.
    add(&mut out, "pt. is s/p cabg. lungs clear heart normal size stable".into(), "no change.".into(), None);
    add(&mut out, "pt. is s/p cabg. lungs clear heart normal".into(), "no change.".into(), Some(DropReason::ShortFindings));
    // Hyphenated and numeric tokens count once.
    add(&mut out, "a 1.2 cm left-sided nodule is seen; follow-up ct in 3 months".into(), "left nodule.".into(), None);
    add(&mut out, "a 1.2 cm left-sided nodule is seen; follow-up ct".into(), "left nodule.".into(), Some(DropReason::ShortFindings));
    // Uppercase input.
    add(&mut out, words(10).to_uppercase(), "NO CHANGE.".into(), None);
    add(&mut out, words(10).to_uppercase(), "UNCHANGED.".into(), Some(DropReason::ShortImpression));
    // Long sections.
    add(&mut out, words(60), words(25), None);
    add(&mut out, words(200), words(2), None);
    add(&mut out, words(200), words(1), Some(DropReason::ShortImpression));
    // Fill up to fifty with alternating boundary cases.
    while out.len() < 50 {
        let k = out.len();
        if k % 2 == 0 {
            add(&mut out, words(10), words(2), None);
        } else {
            add(&mut out, words(9), words(2), Some(DropReason::ShortFindings));
        }
    }
    out
}

/// A small concept table in the 18-field pipe-delimited layout: English
/// rows for the synthetic vocabulary, the same concepts in other languages,
/// a truncated row and a trailing-delimiter variant.
pub fn synth_rrf() -> String {
    let eng: &[(&str, &str, &str, &str)] = &[
        ("C9000001", "MSH", "MH", "Pneumonia"),
        ("C9000001", "SNOMEDCT_US", "PT", "pneumonia"),
        ("C9000002", "MSH", "MH", "Cardiomegaly"),
        ("C9000003", "MSH", "MH", "Pneumothorax"),
        ("C9000004", "MSH", "MH", "Atelectasis"),
        ("C9000005", "MSH", "MH", "Edema"),
        ("C9000006", "SNOMEDCT_US", "PT", "Pleural effusion"),
        ("C9000007", "SNOMEDCT_US", "PT", "Effusion"),
        ("C9000008", "MSH", "MH", "Nodule"),
        ("C9000009", "SNOMEDCT_US", "PT", "Fever"),
        ("C9000010", "MTH", "PN", "Endotracheal tube"),
        ("C9000011", "MSH", "MH", "Catheter"),
    ];
    let other: &[(&str, &str, &str)] = &[
        ("C9000001", "SPA", "Neumonía"),
        ("C9000002", "SPA", "Cardiomegalia"),
        ("C9000003", "FRE", "Pneumothorax"),
        ("C9000004", "GER", "Atelektase"),
        ("C9000005", "FRE", "Oedème"),
        ("C9000007", "SPA", "derrame"),
    ];
    let row = |i: usize, cui: &str, lat: &str, sab: &str, tty: &str, s: &str| {
        format!("{cui}|{lat}|P|L{i:07}|PF|S{i:07}|Y|A{i:07}||||{sab}|{tty}|{i}|{s}|0|N||")
    };
    let mut out = String::new();
    let mut i = 0;
    for (cui, sab, tty, s) in eng {
        out.push_str(&row(i, cui, "ENG", sab, tty, s));
        out.push('\n');
        i += 1;
    }
    for (cui, lat, s) in other {
        out.push_str(&row(i, cui, lat, "MSH", "MH", s));
        out.push('\n');
        i += 1;
    }
    // Truncated row: 17 fields.
    out.push_str("C9000099|ENG|P|L9999999|PF|S9999999|Y|A9999999||||MSH|MH|99|Truncated|0|N\n");
    // No trailing delimiter is also accepted.
    let tail = row(i, "C9000012", "ENG", "MSH", "MH", "Consolidation");
    out.push_str(tail.strip_suffix('|').unwrap());
    out.push('\n');
    out
}

/// Two seq2seq tasks over the same synthetic reports: gap-sentence
/// regeneration and findings-to-impression summarization.
#[derive(Debug, Clone)]
pub struct ToyTasks {
    pub vocab: Vocab,
    pub gsg_train: Vec<Example>,
    pub gsg_val: Vec<Example>,
    pub sum_train: Vec<Example>,
    pub sum_val: Vec<Example>,
}

pub fn toy_tasks(n_train: usize, n_val: usize, seed: u64) -> Result<ToyTasks> {
    let reports = synth_reports(n_train + n_val, seed);
    let rows = build_gsg_dataset(&reports, &Segmenter::default(), &ScoringConfig::default())?;
    let vocab = Vocab::build(
        rows.iter()
            .flat_map(|r| [r.findings.as_str(), r.impression.as_str()]),
        None,
    );
    let gsg: Vec<Example> = rows
        .iter()
        .map(|r| Example { src: vocab.encode(&r.masked_findings), tgt: vocab.encode(&r.gap_target) })
        .collect();
    let sum: Vec<Example> = rows
        .iter()
        .map(|r| Example { src: vocab.encode(&r.findings), tgt: vocab.encode(&r.impression) })
        .collect();
    Ok(ToyTasks {
        vocab,
        gsg_train: gsg[..n_train].to_vec(),
        gsg_val: gsg[n_train..].to_vec(),
        sum_train: sum[..n_train].to_vec(),
        sum_val: sum[n_train..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{filter_reports, FilterConfig, Segmenter};

    #[test]
    fn reports_are_deterministic_and_sectioned() {
        let a = synth_reports(20, 7);
        assert_eq!(a, synth_reports(20, 7));
        assert_ne!(a, synth_reports(20, 8));
        let seg = Segmenter::default();
        for r in &a {
            assert!(seg.segment(&r.findings).len() >= 2);
            assert!(!r.impression.is_empty());
        }
    }

    #[test]
    fn adversarial_fixture_has_fifty_unique_rows() {
        let fx = adversarial_filter_fixture();
        assert_eq!(fx.len(), 50);
        let ids: std::collections::HashSet<_> = fx.iter().map(|(r, _)| r.id.clone()).collect();
        assert_eq!(ids.len(), 50);
        let reports: Vec<Report> = fx.iter().map(|(r, _)| r.clone()).collect();
        let out = filter_reports(&reports, &Segmenter::default(), &FilterConfig::default());
        assert!(!out.kept.is_empty() && !out.dropped.is_empty());
    }
}
