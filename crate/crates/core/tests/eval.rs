use radsum_core::eval::{data_fraction_sweep, evaluate_checkpoint, trend_inversions, EvalItem, GreedySummarizer};
use radsum_core::model::{Model, ModelConfig};
use radsum_core::synth::{toy_tasks, ToyTasks};
use radsum_core::training::{fit, FitOptions, TrainConfig};
use radsum_core::{CorpusScores, Example};

fn items(tasks: &ToyTasks, examples: &[Example]) -> Vec<EvalItem> {
    examples
        .iter()
        .enumerate()
        .map(|(i, e)| EvalItem {
            id: format!("v{i}"),
            source: tasks.vocab.decode(&e.src),
            reference: tasks.vocab.decode(&e.tgt),
        })
        .collect()
}

fn config(vocab: usize) -> ModelConfig {
    ModelConfig {
        layers: 1,
        d_model: 32,
        heads: 4,
        d_ff: 64,
        vocab_size: vocab,
        max_src: 96,
        max_tgt: 48,
        seed: 11,
        tie_embeddings: false,
    }
}

fn train_and_score(tasks: &ToyTasks, data: &[Example], epochs: usize) -> CorpusScores {
    let mut model = Model::init(config(tasks.vocab.len())).unwrap();
    let tc = TrainConfig { epochs, batch_size: 8, seed: 4, ..Default::default() };
    let report = fit(&mut model, data, &tasks.sum_val, &tc, FitOptions::default(), None).unwrap();
    model.params = report.best_params;
    let s = GreedySummarizer::new(&model, &tasks.vocab, None).unwrap();
    evaluate_checkpoint(&s, &items(tasks, &tasks.sum_val)).unwrap().scores
}

#[test]
fn trained_model_beats_untrained_on_every_metric() {
    let tasks = toy_tasks(48, 12, 21).unwrap();
    let untrained = Model::init(config(tasks.vocab.len())).unwrap();
    let s = GreedySummarizer::new(&untrained, &tasks.vocab, None).unwrap();
    let before = evaluate_checkpoint(&s, &items(&tasks, &tasks.sum_val)).unwrap();
    let after = train_and_score(&tasks, &tasks.sum_train, 10);
    for (b, a) in before.scores.primary.values().iter().zip(after.primary.values()) {
        assert!(b < &a, "untrained {b} vs trained {a}");
    }
}

#[test]
fn sweep_full_fraction_matches_baseline_and_trends_up() {
    let tasks = toy_tasks(60, 12, 22).unwrap();
    let baseline = train_and_score(&tasks, &tasks.sum_train, 6);
    let points = data_fraction_sweep(&tasks.sum_train, &[0.1, 0.5, 1.0], 9, |d| Ok(train_and_score(&tasks, d, 6))).unwrap();
    assert_eq!(points.iter().map(|p| p.examples).collect::<Vec<_>>(), [6, 30, 60]);
    assert_eq!(points[2].scores, baseline);
    assert!(trend_inversions(&points, |r| r.r1) <= 1);
    assert!(points[2].scores.primary.r1 > points[0].scores.primary.r1);
}

#[test]
fn vocabulary_mismatch_is_a_checkpoint_error() {
    let tasks = toy_tasks(4, 0, 1).unwrap();
    let model = Model::init(config(tasks.vocab.len() + 1)).unwrap();
    assert!(GreedySummarizer::new(&model, &tasks.vocab, None).is_err());
}
