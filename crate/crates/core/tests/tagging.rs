use radsum_core::corpus::Segmenter;
use radsum_core::synth::{synth_reports, synth_rrf};
use radsum_core::tagging::{
    assign_tags, assignments_from_rows, build_tag_dataset, fit_tfidf, parse_concepts, read_tag_jsonl, top_keywords,
    write_tag_jsonl, TfidfConfig,
};

#[test]
fn tag_dataset_round_trips_through_jsonl() {
    let seg = Segmenter::default();
    let reports = synth_reports(60, 5);
    let impressions: Vec<(String, Vec<String>)> =
        reports.iter().map(|r| (r.id.clone(), seg.tokenize(&r.impression))).collect();
    let docs: Vec<Vec<String>> = impressions.iter().map(|(_, t)| t.clone()).collect();
    let model = fit_tfidf(&docs, TfidfConfig::default()).unwrap();
    let keywords: Vec<String> = top_keywords(&model, &docs, 100).unwrap().into_iter().map(|k| k.term).collect();
    let concepts = parse_concepts(&synth_rrf());
    let assignments = assign_tags(&keywords, &concepts.rows, &impressions, false);
    assert!(assignments.iter().any(|a| !a.tags.is_empty()));

    let rows = build_tag_dataset(&reports, &assignments, &seg);
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("tags.jsonl");
    write_tag_jsonl(&rows, &path).unwrap();
    let back = read_tag_jsonl(&path).unwrap();
    assert_eq!(back, rows);
    assert_eq!(assignments_from_rows(&back), assignments);
}

#[test]
fn keywords_are_ranked_by_score() {
    let docs: Vec<Vec<String>> = ["effusion", "effusion edema", "normal", "normal", "normal"]
        .iter()
        .map(|d| d.split(' ').map(String::from).collect())
        .collect();
    let model = fit_tfidf(&docs, TfidfConfig::default()).unwrap();
    let k = top_keywords(&model, &docs, 3).unwrap();
    assert!(k.windows(2).all(|w| w[0].score >= w[1].score));
}
