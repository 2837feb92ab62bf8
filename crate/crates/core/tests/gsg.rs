use proptest::prelude::*;
use radsum_core::corpus::{SentenceSeq, Segmenter};
use radsum_core::gsg::{build_gsg_dataset, emit_masked_example, restore, select_mask_set, ScoringConfig};
use radsum_core::synth::synth_reports;

const WORDS: &[&str] = &["lungs", "are", "clear", "heart", "size", "normal", "no", "effusion", "mild", "edema"];

fn doc() -> impl Strategy<Value = SentenceSeq> {
    proptest::collection::vec(proptest::collection::vec(0usize..WORDS.len(), 1..8), 1..10).prop_map(|ss| {
        SentenceSeq::new(
            ss.into_iter()
                .map(|s| {
                    let mut words: Vec<String> = s.into_iter().map(|i| WORDS[i].to_string()).collect();
                    words.push(".".into());
                    words
                })
                .collect(),
        )
    })
}

proptest! {
    #[test]
    fn masked_examples_restore_the_document(d in doc()) {
        let cfg = ScoringConfig::default();
        let mask = select_mask_set(&d, &cfg).unwrap();
        let expected = match d.len() { 0 => 0, 1..=3 => 1, 4 => 2, _ => 3 };
        prop_assert_eq!(mask.indices.len(), expected);
        prop_assert!(mask.indices.windows(2).all(|w| w[0] < w[1]));
        let ex = emit_masked_example(&d, &mask, "x").unwrap();
        prop_assert_eq!(restore(&ex.masked_source, &ex.target).unwrap(), d.text());
    }

    #[test]
    fn selection_is_deterministic(d in doc()) {
        let cfg = ScoringConfig::default();
        prop_assert_eq!(select_mask_set(&d, &cfg).unwrap(), select_mask_set(&d, &cfg).unwrap());
    }
}

#[test]
fn dataset_rows_keep_findings_and_impressions() {
    let reports = synth_reports(40, 3);
    let rows = build_gsg_dataset(&reports, &Segmenter::default(), &ScoringConfig::default()).unwrap();
    assert_eq!(rows.len(), reports.len());
    for row in &rows {
        assert_eq!(restore(&row.masked_findings, &row.gap_target).unwrap(), row.findings);
    }
}
