//! One function per subcommand. Each reads only the artifacts it declares
//! and writes into its own directory under `--out`.

use std::collections::{HashMap, HashSet};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use radsum_core::corpus::{corpus_stats, filter_reports, parse_reports, split_corpus, CorpusFormat, CorpusSplit, Report, Segmenter, STATS_HEADER};
use radsum_core::distillation::{distill, held_out_kl, init_student_embeddings};
use radsum_core::eval::{data_fraction_sweep, evaluate_checkpoint, subsample, subsample_n, sweep_csv, EvalItem, GreedySummarizer};
use radsum_core::gsg::{build_gsg_dataset, GsgRow};
use radsum_core::model::{count_params_and_flops, layer_groups, Model, ModelConfig, ParameterStore, Vocab};
use radsum_core::synth::{synth_corpus_jsonl, synth_rrf};
use radsum_core::tagging::{assign_tags, build_tag_dataset, fit_tfidf, parse_concepts, top_keywords, TagRow};
use radsum_core::training::{
    estimate_fisher, finetune_summarization, fisher_samples, layer_unfreeze_finetune, train_gsg, EpochRecord, EwcAnchor, Example, FisherDiag,
    Seq2SeqLikelihood, TrainConfig, TrainReport, UnfreezePlan, UnfreezeStage,
};

use crate::artifacts::{read_jsonl, stage_seed, StageRun};
use crate::config::{Config, SplitName};

pub struct Ctx<'a> {
    pub config: &'a Config,
    pub limit_n: Option<usize>,
}

fn segmenter() -> Segmenter {
    Segmenter::default()
}

fn norm(seg: &Segmenter, text: &str) -> String {
    seg.segment(text).text()
}

/// Section seeds are offsets on top of the derived stage seed.
fn train_cfg(base: &TrainConfig, run: &StageRun) -> TrainConfig {
    TrainConfig {
        seed: run.seed().wrapping_add(base.seed),
        ..base.clone()
    }
}

fn limit<T: Clone>(ctx: &Ctx, items: Vec<T>, seed: u64) -> Vec<T> {
    match ctx.limit_n {
        Some(n) => subsample_n(&items, n, seed),
        None => items,
    }
}

struct Prepared {
    reports: Vec<Report>,
    split: CorpusSplit,
    vocab: Vocab,
}

impl Prepared {
    fn load(run: &mut StageRun) -> Result<Prepared> {
        let split_path = run.upstream("prepare", "split.json");
        if !split_path.is_file() {
            bail!("missing prepared corpus: {} (run `prepare` first)", split_path.display());
        }
        let split: CorpusSplit = serde_json::from_str(&run.read_string(&split_path)?)?;
        let reports = read_jsonl(&run.read_string(&run.upstream("prepare", "reports.jsonl"))?, "reports.jsonl")?;
        let vocab_path = run.upstream("prepare", "vocab.json");
        run.read(&vocab_path)?;
        let vocab = Vocab::load(&vocab_path)?;
        Ok(Prepared { reports, split, vocab })
    }

    fn by_id(&self) -> HashMap<&str, &Report> {
        self.reports.iter().map(|r| (r.id.as_str(), r)).collect()
    }

    fn ids(&self, which: SplitName) -> &[String] {
        match which {
            SplitName::Val => &self.split.val,
            SplitName::Test => &self.split.test,
        }
    }

    /// Findings → impression pairs for the given ids.
    fn summarization(&self, ids: &[String]) -> Result<Vec<Example>> {
        let seg = segmenter();
        let by_id = self.by_id();
        ids.iter()
            .map(|id| {
                let r = by_id.get(id.as_str()).with_context(|| format!("split names unknown report {id}"))?;
                Ok(Example {
                    src: self.vocab.encode(&norm(&seg, &r.findings)),
                    tgt: self.vocab.encode(&norm(&seg, &r.impression)),
                })
            })
            .collect()
    }

    fn eval_items(&self, ids: &[String]) -> Result<Vec<EvalItem>> {
        let seg = segmenter();
        let by_id = self.by_id();
        ids.iter()
            .map(|id| {
                let r = by_id.get(id.as_str()).with_context(|| format!("split names unknown report {id}"))?;
                Ok(EvalItem {
                    id: id.clone(),
                    source: norm(&seg, &r.findings),
                    reference: norm(&seg, &r.impression),
                })
            })
            .collect()
    }
}

fn load_gsg(run: &mut StageRun, vocab: &Vocab, ids: &[String]) -> Result<Vec<Example>> {
    let path = run.upstream("gsg", "gsg.jsonl");
    if !path.is_file() {
        bail!("missing gap-sentence dataset: {} (run `gsg` first)", path.display());
    }
    let rows: Vec<GsgRow> = read_jsonl(&run.read_string(&path)?, "gsg.jsonl")?;
    let by_id: HashMap<&str, &GsgRow> = rows.iter().map(|r| (r.id.as_str(), r)).collect();
    ids.iter()
        .map(|id| {
            let r = by_id.get(id.as_str()).with_context(|| format!("gsg.jsonl has no row for {id}"))?;
            Ok(Example {
                src: vocab.encode(&r.masked_findings),
                tgt: vocab.encode(&r.gap_target),
            })
        })
        .collect()
}

fn load_checkpoint(run: &mut StageRun, stage: &str) -> Result<Model> {
    let weights = run.require_checkpoint(stage, "model.rspt")?;
    let config_path = run.require_checkpoint(stage, "model.json")?;
    let config: ModelConfig = serde_json::from_str(&run.read_string(&config_path)?)
        .with_context(|| format!("reading {}", config_path.display()))?;
    run.read(&weights)?;
    let params = ParameterStore::load(&weights)?;
    Ok(Model::from_parts(config, params)?)
}

#[derive(Serialize)]
struct TrainSummary {
    best_epoch: usize,
    epochs_run: usize,
    stopped_early: bool,
    final_train_loss: f64,
    best_val_loss: Option<f64>,
    params: usize,
    flops_per_token: usize,
}

fn save_trained(run: &mut StageRun, config: &ModelConfig, report: &TrainReport) -> Result<()> {
    run.write("model.rspt", &report.best_params.to_bytes())?;
    run.write_json("model.json", config)?;
    run.write_jsonl::<EpochRecord>("history.jsonl", &report.epochs)?;
    let cost = count_params_and_flops(config)?;
    run.write_json(
        "report.json",
        &TrainSummary {
            best_epoch: report.best_epoch,
            epochs_run: report.epochs.len(),
            stopped_early: report.stopped_early,
            final_train_loss: report.final_train_loss(),
            best_val_loss: report.epochs[report.best_epoch].val_loss,
            params: cost.params,
            flops_per_token: cost.flops_per_token,
        },
    )?;
    Ok(())
}

pub fn synth(reports: usize, seed: u64, run: &mut StageRun) -> Result<String> {
    run.write("corpus.jsonl", synth_corpus_jsonl(reports, seed, true).as_bytes())?;
    run.write("concepts.rrf", synth_rrf().as_bytes())?;
    Ok(format!("wrote {reports} synthetic reports and a concept table"))
}

#[derive(Serialize)]
struct Dropped<'a> {
    id: &'a str,
    reason: String,
}

pub fn prepare(ctx: &Ctx, run: &mut StageRun) -> Result<String> {
    let cfg = ctx.config;
    run.read(&cfg.data.corpus)?;
    let parsed = parse_reports(&cfg.data.corpus, CorpusFormat::Jsonl)?;
    let seg = segmenter();
    let filtered = filter_reports(&parsed.reports, &seg, &cfg.data.filter());
    let split = split_corpus(&filtered.kept, run.seed())?;
    let train_ids: HashSet<&str> = split.train.iter().map(String::as_str).collect();
    let train_text: Vec<String> = filtered
        .kept
        .iter()
        .filter(|r| train_ids.contains(r.id.as_str()))
        .flat_map(|r| [norm(&seg, &r.findings), norm(&seg, &r.impression)])
        .collect();
    let vocab = Vocab::build(train_text.iter().map(String::as_str), Some(cfg.data.vocab_size));

    run.write_jsonl("reports.jsonl", &filtered.kept)?;
    run.write_json("split.json", &split)?;
    run.write("vocab.json", vocab.to_json()?.as_bytes())?;
    let dropped: Vec<Dropped> = filtered
        .dropped
        .iter()
        .map(|(id, reason)| Dropped { id, reason: reason.to_string() })
        .collect();
    run.write_jsonl("dropped.jsonl", &dropped)?;
    run.write_jsonl("rejected.jsonl", &parsed.rejected)?;
    Ok(format!(
        "kept {} reports ({} dropped, {} rejected); split {}/{}/{}; vocabulary {}",
        filtered.kept.len(),
        filtered.dropped.len(),
        parsed.rejected.len(),
        split.train.len(),
        split.val.len(),
        split.test.len(),
        vocab.len()
    ))
}

pub fn gsg(ctx: &Ctx, run: &mut StageRun) -> Result<String> {
    let path = run.upstream("prepare", "reports.jsonl");
    if !path.is_file() {
        bail!("missing prepared corpus: {} (run `prepare` first)", path.display());
    }
    let reports: Vec<Report> = read_jsonl(&run.read_string(&path)?, "reports.jsonl")?;
    let rows = build_gsg_dataset(&reports, &segmenter(), &ctx.config.gsg)?;
    run.write_jsonl("gsg.jsonl", &rows)?;
    let masked: usize = rows.iter().map(|r| r.masked_sentences.len()).sum();
    Ok(format!("{} gap-sentence rows, {masked} sentences masked", rows.len()))
}

pub fn pretrain(ctx: &Ctx, run: &mut StageRun) -> Result<String> {
    let prep = Prepared::load(run)?;
    let train = load_gsg(run, &prep.vocab, &prep.split.train)?;
    let val = load_gsg(run, &prep.vocab, &prep.split.val)?;
    let train = limit(ctx, train, run.seed());
    let config = ctx.config.model.model_config(prep.vocab.len(), run.seed());
    let mut model = Model::init(config.clone())?;
    let report = train_gsg(&mut model, &train, &val, &train_cfg(&ctx.config.pretrain, run), None)?;
    save_trained(run, &config, &report)?;
    Ok(format!(
        "pretrained on {} examples; best epoch {} train loss {:.4}",
        train.len(),
        report.best_epoch,
        report.epochs[report.best_epoch].train_loss
    ))
}

#[derive(Serialize)]
struct FisherSummary {
    examples: usize,
    samples: usize,
    total: f64,
    max: f64,
}

pub fn fisher(ctx: &Ctx, run: &mut StageRun) -> Result<String> {
    let model = load_checkpoint(run, "pretrain")?;
    let prep = Prepared::load(run)?;
    let mut examples = load_gsg(run, &prep.vocab, &prep.split.train)?;
    if let Some(n) = ctx.config.fisher.max_examples {
        examples = subsample_n(&examples, n, run.seed());
    }
    examples = limit(ctx, examples, run.seed());
    let samples = fisher_samples(&examples, ctx.config.fisher.granularity);
    let lm = Seq2SeqLikelihood {
        model: &model,
        labels: ctx.config.fisher.labels,
    };
    let f = estimate_fisher(&lm, &samples)?;
    run.write("fisher.rspt", &f.diag.to_bytes())?;
    let max = f.diag.iter().flat_map(|(_, t)| t.data()).fold(0.0f64, |a, &b| a.max(b));
    run.write_json(
        "summary.json",
        &FisherSummary {
            examples: examples.len(),
            samples: samples.len(),
            total: f.total(),
            max,
        },
    )?;
    Ok(format!("Fisher diagonal from {} samples, total {:.4e}", samples.len(), f.total()))
}

fn anchor(ctx: &Ctx, run: &mut StageRun, pretrained: &Model) -> Result<Option<EwcAnchor>> {
    let ft = &ctx.config.finetune;
    if ft.lambda0 == 0.0 {
        return Ok(None);
    }
    let path = run.require_checkpoint("fisher", "fisher.rspt")?;
    run.read(&path)?;
    let fisher = FisherDiag::load(&path)?;
    Ok(Some(EwcAnchor::new(pretrained.params.clone(), fisher, ft.lambda0, ft.schedule)?))
}

pub fn finetune(ctx: &Ctx, run: &mut StageRun) -> Result<String> {
    let mut model = load_checkpoint(run, "pretrain")?;
    let anchor = anchor(ctx, run, &model)?;
    let prep = Prepared::load(run)?;
    let train = limit(ctx, prep.summarization(&prep.split.train)?, run.seed());
    let val = prep.summarization(&prep.split.val)?;
    let cfg = train_cfg(&ctx.config.finetune.train, run);
    let report = finetune_summarization(&mut model, anchor.as_ref(), &train, &val, &cfg, None)?;
    save_trained(run, &model.config, &report)?;
    Ok(format!(
        "fine-tuned on {} examples{}; best epoch {}",
        train.len(),
        if anchor.is_some() { " with the Fisher anchor" } else { "" },
        report.best_epoch
    ))
}

/// One more layer group per epoch, output side first.
pub fn top_down_plan(params: &ParameterStore) -> UnfreezePlan {
    let mut groups = layer_groups(params);
    groups.reverse();
    UnfreezePlan {
        stages: groups
            .into_iter()
            .enumerate()
            .map(|(epoch, g)| UnfreezeStage {
                from_epoch: epoch,
                prefixes: vec![g],
            })
            .collect(),
    }
}

pub fn unfreeze_ablate(ctx: &Ctx, run: &mut StageRun) -> Result<String> {
    let mut model = load_checkpoint(run, "pretrain")?;
    let prep = Prepared::load(run)?;
    let train = limit(ctx, prep.summarization(&prep.split.train)?, run.seed());
    let val = prep.summarization(&prep.split.val)?;
    let plan = if ctx.config.unfreeze.stages.is_empty() {
        top_down_plan(&model.params)
    } else {
        UnfreezePlan {
            stages: ctx.config.unfreeze.stages.clone(),
        }
    };
    let cfg = train_cfg(&ctx.config.unfreeze.train, run);
    let report = layer_unfreeze_finetune(&mut model, &plan, &train, &val, &cfg, None)?;
    run.write_json("plan.json", &plan)?;
    save_trained(run, &model.config, &report)?;
    Ok(format!("layer-unfreezing run over {} stages; best epoch {}", plan.stages.len(), report.best_epoch))
}

#[derive(Serialize)]
struct DistillSummary {
    teacher_params: usize,
    student_params: usize,
    held_out_kl_t1: f64,
}

pub fn distill_stage(ctx: &Ctx, run: &mut StageRun) -> Result<String> {
    let teacher = load_checkpoint(run, "finetune")?;
    let prep = Prepared::load(run)?;
    let train = limit(ctx, prep.summarization(&prep.split.train)?, run.seed());
    let val = prep.summarization(&prep.split.val)?;
    let dc = &ctx.config.distill;
    let student_cfg = ctx.config.student.model_config(prep.vocab.len(), run.seed());
    let mut student = Model::init(student_cfg.clone())?;
    if dc.init_embeddings {
        init_student_embeddings(&mut student, &teacher, run.seed())?;
    }
    let report = distill(&teacher, &mut student, &train, &val, &dc.kd, &train_cfg(&dc.train, run), None)?;
    save_trained(run, &student_cfg, &report)?;
    student.params = report.best_params.clone();
    let kl = if val.is_empty() {
        f64::NAN
    } else {
        held_out_kl(&teacher, &student, &val, 1.0)?
    };
    let summary = DistillSummary {
        teacher_params: count_params_and_flops(&teacher.config)?.params,
        student_params: count_params_and_flops(&student_cfg)?.params,
        held_out_kl_t1: kl,
    };
    run.write_json("summary.json", &summary)?;
    Ok(format!(
        "distilled {} → {} parameters; held-out KL {:.4}",
        summary.teacher_params, summary.student_params, kl
    ))
}

#[derive(Serialize)]
struct ConceptSummary {
    english_rows: usize,
    non_english_rows: usize,
    skipped: Vec<(usize, String)>,
}

pub fn tag(ctx: &Ctx, run: &mut StageRun) -> Result<String> {
    let tc = &ctx.config.tag;
    let prep = Prepared::load(run)?;
    let concepts = parse_concepts(&run.read_string(&ctx.config.data.concepts)?);
    let seg = segmenter();
    let impressions: Vec<(String, Vec<String>)> = prep
        .reports
        .iter()
        .map(|r| (r.id.clone(), seg.tokenize(&r.impression)))
        .collect();
    let docs: Vec<Vec<String>> = impressions.iter().map(|(_, t)| t.clone()).collect();
    let model = fit_tfidf(&docs, tc.tfidf)?;
    let keywords = top_keywords(&model, &docs, tc.top_n)?;
    let terms: Vec<String> = keywords.iter().map(|k| k.term.clone()).collect();
    let assignments = assign_tags(&terms, &concepts.rows, &impressions, tc.tfidf.bigrams);
    let rows = build_tag_dataset(&prep.reports, &assignments, &seg);

    run.write_json("keywords.json", &keywords)?;
    run.write_json(
        "concepts.json",
        &ConceptSummary {
            english_rows: concepts.rows.len(),
            non_english_rows: concepts.non_english,
            skipped: concepts.skipped.clone(),
        },
    )?;
    run.write_jsonl::<TagRow>("tags.jsonl", &rows)?;
    let tagged = rows.iter().filter(|r| !r.tags.is_empty()).count();
    let mut msg = format!("{} keywords, {tagged}/{} reports tagged", keywords.len(), rows.len());

    if tc.train_model {
        let by_id: HashMap<&str, &TagRow> = rows.iter().map(|r| (r.id.as_str(), r)).collect();
        let examples = |ids: &[String]| -> Vec<Example> {
            ids.iter()
                .filter_map(|id| by_id.get(id.as_str()))
                .map(|r| Example {
                    src: prep.vocab.encode(&r.findings),
                    tgt: prep.vocab.encode(&r.target),
                })
                .collect()
        };
        let train = limit(ctx, examples(&prep.split.train), run.seed());
        let val = examples(&prep.split.val);
        let cfg = ctx.config.student.model_config(prep.vocab.len(), run.seed());
        let mut tagger = Model::init(cfg.clone())?;
        let report = finetune_summarization(&mut tagger, None, &train, &val, &train_cfg(&tc.train, run), None)?;
        save_trained(run, &cfg, &report)?;
        msg.push_str(&format!("; tagger best epoch {}", report.best_epoch));
    }
    Ok(msg)
}

pub fn evaluate(ctx: &Ctx, run: &mut StageRun) -> Result<String> {
    let ec = &ctx.config.evaluate;
    let model = load_checkpoint(run, ec.checkpoint.dir())?;
    let prep = Prepared::load(run)?;
    let items = prep.eval_items(prep.ids(ec.split))?;
    let summarizer = GreedySummarizer::new(&model, &prep.vocab, ec.max_len)?;
    let report = evaluate_checkpoint(&summarizer, &items)?;
    run.write("scores.csv", report.to_csv().as_bytes())?;
    run.write("scores.json", (report.to_json()? + "\n").as_bytes())?;
    run.write("examples.jsonl", report.examples_jsonl()?.as_bytes())?;
    let p = report.scores.primary;
    Ok(format!(
        "{} examples: R-1 {:.1} R-2 {:.1} R-L {:.1} B-1 {:.1} B-2 {:.1} B-3 {:.1}",
        items.len(),
        p.r1,
        p.r2,
        p.rl,
        p.b1,
        p.b2,
        p.b3
    ))
}

/// Each point fine-tunes exactly as `finetune` does (same derived seed), so
/// the fraction-1 point reproduces that stage's checkpoint.
pub fn sweep(ctx: &Ctx, run: &mut StageRun) -> Result<String> {
    let pretrained = load_checkpoint(run, "pretrain")?;
    let anchor = anchor(ctx, run, &pretrained)?;
    let prep = Prepared::load(run)?;
    let ft_seed = stage_seed(ctx.config.seed, "finetune");
    let train = limit(ctx, prep.summarization(&prep.split.train)?, ft_seed);
    let val = prep.summarization(&prep.split.val)?;
    let items = prep.eval_items(prep.ids(ctx.config.evaluate.split))?;
    let cfg = TrainConfig {
        seed: ft_seed.wrapping_add(ctx.config.finetune.train.seed),
        ..ctx.config.finetune.train.clone()
    };
    let seed = run.seed();
    // Surface a bad fraction before any training starts.
    for &f in &ctx.config.sweep.fractions {
        subsample(&train, f, seed)?;
    }
    let points = data_fraction_sweep(&train, &ctx.config.sweep.fractions, seed, |subset| {
        let mut model = pretrained.clone();
        let report = finetune_summarization(&mut model, anchor.as_ref(), subset, &val, &cfg, None)?;
        model.params = report.best_params;
        let summarizer = GreedySummarizer::new(&model, &prep.vocab, ctx.config.evaluate.max_len)?;
        Ok(evaluate_checkpoint(&summarizer, &items)?.scores)
    })?;
    run.write("sweep.csv", sweep_csv(&points).as_bytes())?;
    run.write_json("sweep.json", &points)?;
    Ok(format!("swept {} fractions", points.len()))
}

pub fn stats(ctx: &Ctx, run: &mut StageRun) -> Result<String> {
    let prep = Prepared::load(run)?;
    let seg = segmenter();
    let by_id = prep.by_id();
    let pick = |ids: &[String]| -> Vec<Report> { ids.iter().filter_map(|id| by_id.get(id.as_str()).map(|r| (*r).clone())).collect() };
    let punct = ctx.config.data.count_punctuation;
    let mut csv = format!("{STATS_HEADER}\n");
    for (name, reports) in [
        ("all", prep.reports.clone()),
        ("train", pick(&prep.split.train)),
        ("val", pick(&prep.split.val)),
        ("test", pick(&prep.split.test)),
    ] {
        csv.push_str(&corpus_stats(&reports, &seg, punct).csv_row(name));
        csv.push('\n');
    }
    run.write("stats.csv", csv.as_bytes())?;
    Ok(format!("statistics for {} reports", prep.reports.len()))
}
