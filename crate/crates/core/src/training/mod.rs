//! Training loop, AdamW, EWC penalty and the layer-unfreezing ablation.

mod fisher;

use std::collections::BTreeMap;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, Batch, Bound, Model, ParameterStore, PAD};
use crate::tensor::{Tape, Tensor, Var};

pub use fisher::{
    estimate_fisher, fisher_samples, FisherDiag, FisherGranularity, FisherLabels, FisherSample,
    LikelihoodModel, Seq2SeqLikelihood,
};

/// One tokenized (source, target) pair; targets end with EOS.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    AdamW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Stop once an epoch's mean training loss falls below this value.
    pub stop_below: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            lr: 0.003,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 0.01,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            stop_below: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Mean token cross-entropy of `logits` (`[B, T, V]`) against `targets`
/// (`B·T` ids), ignoring PAD targets.
pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let weights = token_weights(targets)?;
    let shape = tape.shape(logits).to_vec();
    let lp = tape.log_softmax(logits, shape.len() - 1)?;
    let picked = tape.gather_last(lp, targets)?;
    let w = tape.constant(Tensor::new(tape.shape(picked).to_vec(), weights)?);
    let weighted = tape.mul(picked, w)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, -1.0))
}

/// `1/n` at non-PAD targets, 0 elsewhere.
pub(crate) fn token_weights(targets: &[usize]) -> Result<Vec<f64>> {
    let n = targets.iter().filter(|&&t| t != PAD).count();
    if n == 0 {
        return Err(Error::invalid("batch has no non-pad target tokens"));
    }
    let w = 1.0 / n as f64;
    Ok(targets.iter().map(|&t| if t == PAD { 0.0 } else { w }).collect())
}

/// A per-batch training loss built on the tape from the model's logits.
pub trait Objective {
    /// Returns the scalar loss and named components for logging.
    fn loss(&self, tape: &mut Tape, logits: Var, batch: &Batch) -> Result<(Var, Vec<(String, f64)>)>;
}

/// Plain token cross-entropy against the batch targets.
pub struct CrossEntropy;

impl Objective for CrossEntropy {
    fn loss(&self, tape: &mut Tape, logits: Var, batch: &Batch) -> Result<(Var, Vec<(String, f64)>)> {
        let l = cross_entropy(tape, logits, &batch.tgt_out)?;
        let v = tape.value(l).item()?;
        Ok((l, vec![("ce".to_string(), v)]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaSchedule {
    LinearToZero,
    Constant,
    /// `λ0 · exp(-rate · epoch)`
    ExpDecay { rate: f64 },
}

/// Anchor for the EWC penalty `R(θ) = ½ Σ F_i (θ_i − θ*_i)²`.
#[derive(Debug, Clone)]
pub struct EwcAnchor {
    pub theta_star: ParameterStore,
    pub fisher: FisherDiag,
    pub lambda0: f64,
    pub schedule: LambdaSchedule,
}

impl EwcAnchor {
    pub fn new(
        theta_star: ParameterStore,
        fisher: FisherDiag,
        lambda0: f64,
        schedule: LambdaSchedule,
    ) -> Result<Self> {
        theta_star.check_compatible(&fisher.diag)?;
        if !(lambda0 >= 0.0) {
            return Err(Error::invalid(format!("lambda0 must be non-negative, got {lambda0}")));
        }
        Ok(EwcAnchor {
            theta_star,
            fisher,
            lambda0,
            schedule,
        })
    }
}

/// Penalty coefficient for `epoch` of `total_epochs`. The linear schedule
/// reaches zero on the last epoch; a single-epoch run keeps `λ0`.
pub fn lambda_schedule(epoch: usize, total_epochs: usize, anchor: &EwcAnchor) -> f64 {
    let l0 = anchor.lambda0;
    match anchor.schedule {
        LambdaSchedule::Constant => l0,
        LambdaSchedule::LinearToZero => {
            if total_epochs <= 1 {
                l0
            } else {
                let e = epoch.min(total_epochs - 1) as f64;
                l0 * (1.0 - e / (total_epochs - 1) as f64)
            }
        }
        LambdaSchedule::ExpDecay { rate } => l0 * (-rate * epoch as f64).exp(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Penalty {
    /// `R(θ)`
    pub r: f64,
    /// `λ·F_i·(θ_i − θ*_i)` per parameter.
    pub grad: IndexMap<String, Vec<f64>>,
}

pub fn ewc_penalty(params: &ParameterStore, anchor: &EwcAnchor, lambda: f64) -> Result<Penalty> {
    params.check_compatible(&anchor.theta_star)?;
    let mut r = 0.0;
    let mut grad = IndexMap::new();
    for ((name, theta), (star, f)) in params
        .iter()
        .zip(anchor.theta_star.iter().map(|x| x.1).zip(anchor.fisher.diag.iter().map(|x| x.1)))
    {
        let g: Vec<f64> = theta
            .data()
            .iter()
            .zip(star.data())
            .zip(f.data())
            .map(|((t, s), fi)| {
                let d = t - s;
                r += 0.5 * fi * d * d;
                lambda * fi * d
            })
            .collect();
        grad.insert(name.to_string(), g);
    }
    Ok(Penalty { r, grad })
}

/// Fisher-weighted drift `Σ F_i (θ_i − θ*_i)²`.
pub fn fisher_drift(params: &ParameterStore, anchor: &EwcAnchor) -> Result<f64> {
    Ok(2.0 * ewc_penalty(params, anchor, 0.0)?.r)
}

/// Which parameter groups train in which epochs. A stage's prefixes stay
/// trainable from `from_epoch` onward, so the trainable set only grows.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct UnfreezePlan {
    pub stages: Vec<UnfreezeStage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnfreezeStage {
    pub from_epoch: usize,
    /// Parameter-name prefixes ending at a `.` boundary, e.g. `decoder` or
    /// `encoder.2`.
    pub prefixes: Vec<String>,
}

fn prefix_matches(prefix: &str, name: &str) -> bool {
    name == prefix
        || (name.len() > prefix.len() && name.starts_with(prefix) && name.as_bytes()[prefix.len()] == b'.')
}

impl UnfreezePlan {
    pub fn validate(&self, store: &ParameterStore) -> Result<()> {
        for stage in &self.stages {
            for p in &stage.prefixes {
                if !store.names().any(|n| prefix_matches(p, n)) {
                    return Err(Error::invalid(format!("unfreeze plan names unknown layer {p:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn is_trainable(&self, name: &str, epoch: usize) -> bool {
        self.stages
            .iter()
            .filter(|s| s.from_epoch <= epoch)
            .any(|s| s.prefixes.iter().any(|p| prefix_matches(p, name)))
    }
}

/// AdamW with decoupled weight decay; per-parameter step counts so that
/// parameters unfrozen late start with fresh bias correction.
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    state: IndexMap<String, (Vec<f64>, Vec<f64>, i32)>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            state: IndexMap::new(),
        }
    }

    /// Updates exactly the parameters named in `grads`.
    pub fn step(&mut self, params: &mut ParameterStore, grads: &IndexMap<String, Vec<f64>>) -> Result<()> {
        for (name, g) in grads {
            let theta = params
                .get_mut(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name}")))?;
            let (m, v, t) = self
                .state
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()], 0));
            *t += 1;
            let bc1 = 1.0 - self.beta1.powi(*t);
            let bc2 = 1.0 - self.beta2.powi(*t);
            for (i, x) in theta.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                *x -= self.lr * (update + self.weight_decay * *x);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean task loss over the epoch's batches.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lambda: Option<f64>,
    /// Mean `λ·R(θ)` over the epoch's steps.
    pub penalty: Option<f64>,
    /// Fisher-weighted drift at the end of the epoch.
    pub drift: Option<f64>,
    pub components: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch with the lowest validation loss (training loss without a
    /// validation set).
    pub best_epoch: usize,
    pub best_params: ParameterStore,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn final_train_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.train_loss)
    }
}

pub type EpochCallback<'a> = &'a mut dyn FnMut(&EpochRecord, &ParameterStore) -> Result<()>;

pub struct FitOptions<'a> {
    pub objective: &'a dyn Objective,
    pub anchor: Option<&'a EwcAnchor>,
    pub plan: Option<&'a UnfreezePlan>,
}

impl Default for FitOptions<'_> {
    fn default() -> Self {
        FitOptions {
            objective: &CrossEntropy,
            anchor: None,
            plan: None,
        }
    }
}

fn make_batch(model: &Model, examples: &[Example], idx: &[usize]) -> Result<Batch> {
    let pairs: Vec<(&[usize], &[usize])> = idx
        .iter()
        .map(|&i| (&examples[i].src[..], &examples[i].tgt[..]))
        .collect();
    Batch::new(&pairs, &model.config)
}

/// Mean per-token cross-entropy over `examples`, batched by `batch_size`.
pub fn evaluate_loss(model: &Model, examples: &[Example], batch_size: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("no examples to evaluate"));
    }
    let mut total = 0.0;
    let mut tokens = 0usize;
    let idx: Vec<usize> = (0..examples.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = make_batch(model, examples, chunk)?;
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &model.params, &|_| false);
        let logits = forward(&mut tape, &bound, &model.config, &batch)?;
        let loss = cross_entropy(&mut tape, logits, &batch.tgt_out)?;
        let n = batch.target_tokens();
        total += tape.value(loss).item()? * n as f64;
        tokens += n;
    }
    Ok(total / tokens as f64)
}

fn clip_global_norm(grads: &mut IndexMap<String, Vec<f64>>, max_norm: f64) {
    let norm = grads.values().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Generic training loop shared by every stage.
///
/// Each epoch shuffles the training set with a generator seeded once from
/// `cfg.seed`, takes one AdamW step per batch, then scores the validation
/// set. Frozen parameters are recorded as tape constants and skipped by the
/// optimizer, so they stay bitwise unchanged.
pub fn fit(
    model: &mut Model,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    opts: FitOptions<'_>,
    mut on_epoch: Option<EpochCallback<'_>>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if let Some(plan) = opts.plan {
        plan.validate(&model.params)?;
    }
    if let Some(anchor) = opts.anchor {
        model.params.check_compatible(&anchor.theta_star)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = AdamW::new(cfg);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParameterStore)> = None;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lambda = opts.anchor.map(|a| lambda_schedule(epoch, cfg.epochs, a));
        let plan = opts.plan;
        let trainable = move |name: &str| plan.is_none_or(|p| p.is_trainable(name, epoch));
        let mut loss_sum = 0.0;
        let mut penalty_sum = 0.0;
        let mut components: BTreeMap<String, f64> = BTreeMap::new();
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = make_batch(model, train, chunk)?;
            let mut tape = Tape::new();
            let bound = Bound::new(&mut tape, &model.params, &trainable);
            let logits = forward(&mut tape, &bound, &model.config, &batch)?;
            let (loss, parts) = opts.objective.loss(&mut tape, logits, &batch)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, step, loss: value });
            }
            loss_sum += value;
            for (k, v) in parts {
                *components.entry(k).or_default() += v;
            }
            steps += 1;

            let any_trainable = bound.iter().any(|(name, _)| trainable(name));
            if !any_trainable {
                continue;
            }
            tape.backward(loss)?;
            let mut grads: IndexMap<String, Vec<f64>> = IndexMap::new();
            for (name, var) in bound.iter() {
                if !trainable(name) {
                    continue;
                }
                let g = match tape.grad(var) {
                    Some(g) => g.data().to_vec(),
                    None => vec![0.0; model.params.get(name).map_or(0, Tensor::numel)],
                };
                grads.insert(name.to_string(), g);
            }
            if let (Some(anchor), Some(l)) = (opts.anchor, lambda) {
                if l != 0.0 {
                    let pen = ewc_penalty(&model.params, anchor, l)?;
                    penalty_sum += l * pen.r;
                    for (name, g) in grads.iter_mut() {
                        for (a, b) in g.iter_mut().zip(&pen.grad[name]) {
                            *a += b;
                        }
                    }
                }
            }
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            optimizer.step(&mut model.params, &grads)?;
        }

        let train_loss = loss_sum / steps as f64;
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(evaluate_loss(model, val, cfg.batch_size)?)
        };
        let drift = match opts.anchor {
            Some(a) => Some(fisher_drift(&model.params, a)?),
            None => None,
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lambda,
            penalty: lambda.map(|_| penalty_sum / steps as f64),
            drift,
            components: components.into_iter().map(|(k, v)| (k, v / steps as f64)).collect(),
        };
        log::info!(
            "epoch {epoch}: train {train_loss:.5} val {}",
            val_loss.map_or("-".into(), |v| format!("{v:.5}"))
        );
        let score = val_loss.unwrap_or(train_loss);
        if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
            best = Some((score, epoch, model.params.clone()));
        }
        if let Some(cb) = on_epoch.as_mut() {
            cb(&record, &model.params)?;
        }
        records.push(record);
        if cfg.stop_below.is_some_and(|t| train_loss < t) {
            stopped_early = epoch + 1 < cfg.epochs;
            break;
        }
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch ran");
    Ok(TrainReport {
        epochs: records,
        best_epoch,
        best_params,
        stopped_early,
    })
}

/// Gap-sentence pretraining: plain cross-entropy on (masked source,
/// gap target) pairs.
pub fn train_gsg(
    model: &mut Model,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    on_epoch: Option<EpochCallback<'_>>,
) -> Result<TrainReport> {
    fit(model, train, val, cfg, FitOptions::default(), on_epoch)
}

/// Summarization fine-tuning from the pretrained parameters already in
/// `model`, optionally regularized towards `anchor`.
pub fn finetune_summarization(
    model: &mut Model,
    anchor: Option<&EwcAnchor>,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    on_epoch: Option<EpochCallback<'_>>,
) -> Result<TrainReport> {
    fit(
        model,
        train,
        val,
        cfg,
        FitOptions {
            anchor,
            ..Default::default()
        },
        on_epoch,
    )
}

/// Fine-tuning where only the layers the plan has unfrozen so far train.
pub fn layer_unfreeze_finetune(
    model: &mut Model,
    plan: &UnfreezePlan,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    on_epoch: Option<EpochCallback<'_>>,
) -> Result<TrainReport> {
    fit(
        model,
        train,
        val,
        cfg,
        FitOptions {
            plan: Some(plan),
            ..Default::default()
        },
        on_epoch,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, EOS};
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            layers: 1,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            vocab_size: 12,
            max_src: 8,
            max_tgt: 6,
            seed: 1,
            tie_embeddings: false,
        }
    }

    fn data(seed: u64, n: usize) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let len = rng.gen_range(2..6);
                let src: Vec<usize> = (0..len).map(|_| rng.gen_range(3..12)).collect();
                let mut tgt: Vec<usize> = src.iter().rev().take(3).copied().collect();
                let mut src = src;
                src.push(EOS);
                tgt.push(EOS);
                Example { src, tgt }
            })
            .collect()
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            lr: 0.01,
            ..Default::default()
        }
    }

    #[test]
    fn cross_entropy_hand_cases() {
        let mut tape = Tape::new();
        let v = 5;
        let uniform = tape.constant(Tensor::zeros(&[1, 2, v]));
        let l = cross_entropy(&mut tape, uniform, &[3, 4]).unwrap();
        assert!((tape.value(l).item().unwrap() - (v as f64).ln()).abs() < 1e-12);

        let mut peaked = Tensor::full(&[1, 2, v], -1e3);
        peaked.data_mut()[3] = 0.0;
        peaked.data_mut()[v + 4] = 0.0;
        let p = tape.constant(peaked);
        let l = cross_entropy(&mut tape, p, &[3, 4]).unwrap();
        assert!(tape.value(l).item().unwrap().abs() < 1e-12);

        let c = tape.constant(Tensor::zeros(&[1, 2, v]));
        assert!(cross_entropy(&mut tape, c, &[PAD, PAD]).is_err());
    }

    #[test]
    fn pad_targets_are_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_fn(&[1, 3, 4], |_| rng.gen_range(-2.0..2.0));
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let full = cross_entropy(&mut tape, a, &[1, 2, PAD]).unwrap();
        let y = Tensor::new(vec![1, 2, 4], x.data()[..8].to_vec()).unwrap();
        let b = tape.constant(y);
        let short = cross_entropy(&mut tape, b, &[1, 2]).unwrap();
        assert_eq!(tape.value(full).item().unwrap(), tape.value(short).item().unwrap());
    }

    #[test]
    fn zero_gradient_step_is_identity() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let before = store.clone();
        let mut opt = AdamW::new(&TrainConfig { weight_decay: 0.0, ..Default::default() });
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), vec![0.0; 3]);
        opt.step(&mut store, &grads).unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn schedule_values() {
        let anchor = |l0, schedule| EwcAnchor {
            theta_star: ParameterStore::new(),
            fisher: FisherDiag::default(),
            lambda0: l0,
            schedule,
        };
        let a = anchor(2.0, LambdaSchedule::LinearToZero);
        assert_eq!(lambda_schedule(0, 5, &a), 2.0);
        assert_eq!(lambda_schedule(2, 5, &a), 1.0);
        assert_eq!(lambda_schedule(4, 5, &a), 0.0);
        assert_eq!(lambda_schedule(0, 1, &a), 2.0);
        let c = anchor(3.0, LambdaSchedule::Constant);
        assert_eq!(lambda_schedule(7, 9, &c), 3.0);
        let e = anchor(1.0, LambdaSchedule::ExpDecay { rate: 0.5 });
        assert!((lambda_schedule(2, 9, &e) - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn penalty_hand_case() {
        let mut theta = ParameterStore::new();
        theta.insert("w", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let mut star = ParameterStore::new();
        star.insert("w", Tensor::zeros(&[2]));
        let mut f = ParameterStore::new();
        f.insert("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let anchor = EwcAnchor::new(star.clone(), FisherDiag { diag: f }, 1.0, LambdaSchedule::Constant).unwrap();
        let p = ewc_penalty(&theta, &anchor, 3.0).unwrap();
        assert_eq!(p.r, 1.5);
        assert_eq!(p.grad["w"], vec![3.0, 6.0]);
        assert_eq!(ewc_penalty(&star, &anchor, 1.0).unwrap().r, 0.0);
        assert_eq!(fisher_drift(&theta, &anchor).unwrap(), 3.0);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let train = data(1, 12);
        let run = || {
            let mut m = Model::init(tiny()).unwrap();
            let r = train_gsg(&mut m, &train, &train[..4], &cfg(15), None).unwrap();
            (m.params, r)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a, b);
        assert!(ra.final_train_loss() < ra.epochs[0].train_loss);
        assert_eq!(ra.epochs, rb.epochs);
        assert!(ra.epochs.iter().all(|e| e.val_loss.is_some()));
        let best = ra.epochs[ra.best_epoch].val_loss.unwrap();
        assert!(ra.epochs.iter().all(|e| e.val_loss.unwrap() >= best));
    }

    #[test]
    fn epochs_zero_rejected() {
        let mut m = Model::init(tiny()).unwrap();
        assert!(train_gsg(&mut m, &data(1, 4), &[], &cfg(0), None).is_err());
    }

    #[test]
    fn zero_lambda_matches_unanchored_bitwise() {
        let train = data(3, 8);
        let mut base = Model::init(tiny()).unwrap();
        let theta_star = base.params.clone();
        let fisher = FisherDiag {
            diag: theta_star.clone(),
        };
        let anchor = EwcAnchor::new(theta_star, fisher, 0.0, LambdaSchedule::LinearToZero).unwrap();
        let mut anchored = base.clone();
        finetune_summarization(&mut base, None, &train, &[], &cfg(3), None).unwrap();
        let r = finetune_summarization(&mut anchored, Some(&anchor), &train, &[], &cfg(3), None).unwrap();
        assert_eq!(base.params, anchored.params);
        assert!(r.epochs.iter().all(|e| e.drift.is_some()));
    }

    #[test]
    fn fully_frozen_plan_leaves_parameters_untouched() {
        let train = data(4, 8);
        let mut m = Model::init(tiny()).unwrap();
        let before = m.params.clone();
        layer_unfreeze_finetune(&mut m, &UnfreezePlan::default(), &train, &[], &cfg(2), None).unwrap();
        assert_eq!(m.params, before);
    }

    #[test]
    fn staged_plan_freezes_encoder_until_its_epoch() {
        let train = data(5, 8);
        let mut m = Model::init(tiny()).unwrap();
        let plan = UnfreezePlan {
            stages: vec![
                UnfreezeStage { from_epoch: 0, prefixes: vec!["decoder".into(), "lm_head".into()] },
                UnfreezeStage { from_epoch: 2, prefixes: vec!["encoder".into()] },
            ],
        };
        let start = m.params.clone();
        let mut snapshots = Vec::new();
        let mut cb = |_: &EpochRecord, p: &ParameterStore| {
            snapshots.push(p.clone());
            Ok(())
        };
        layer_unfreeze_finetune(&mut m, &plan, &train, &[], &cfg(4), Some(&mut cb)).unwrap();
        let enc = |p: &ParameterStore| -> Vec<Tensor> {
            p.iter().filter(|(n, _)| n.starts_with("encoder")).map(|(_, t)| t.clone()).collect()
        };
        assert_eq!(enc(&snapshots[1]), enc(&start));
        assert_ne!(enc(&snapshots[3]), enc(&start));
        assert_ne!(snapshots[0].get("decoder.0.ff.w1"), start.get("decoder.0.ff.w1"));
        assert_eq!(snapshots[3].get("embed.tokens"), start.get("embed.tokens"));
    }

    #[test]
    fn unknown_layer_rejected() {
        let mut m = Model::init(tiny()).unwrap();
        let plan = UnfreezePlan {
            stages: vec![UnfreezeStage { from_epoch: 0, prefixes: vec!["encoder.7".into()] }],
        };
        let err = layer_unfreeze_finetune(&mut m, &plan, &data(1, 4), &[], &cfg(1), None).unwrap_err();
        assert!(err.to_string().contains("encoder.7"));
        assert!(!prefix_matches("encoder.1", "encoder.10.ff.w1"));
    }
}
