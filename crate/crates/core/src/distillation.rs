//! Teacher-to-student distillation on temperature-softened logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{logits, Batch, Model};
use crate::tensor::{Tape, Tensor, Var};
use crate::training::{cross_entropy, fit, token_weights, EpochCallback, Example, FitOptions, Objective, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(teacher ‖ student)`
    #[default]
    TeacherStudent,
    /// `KL(student ‖ teacher)`
    StudentTeacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdConfig {
    pub alpha: f64,
    pub temperature: f64,
    pub direction: KlDirection,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            alpha: 0.7,
            temperature: 20.0,
            direction: KlDirection::TeacherStudent,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// `softmax(logits / T)` along the last axis.
pub fn soften(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    let width = *logits.shape().last().ok_or_else(|| Error::invalid("soften on a scalar"))?;
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks(width.max(1)) {
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exps: Vec<f64> = row.iter().map(|x| ((x - max) / temperature).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / sum));
    }
    Tensor::new(logits.shape().to_vec(), out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdParts {
    pub ce: f64,
    /// Token-mean KL before the `T²` factor.
    pub kl: f64,
    pub loss: f64,
}

/// `(1−α)·CE(S, Y) + α·T²·KL`, each term a mean over non-PAD target
/// positions. The teacher logits are constants. At `α = 0` no KL term is
/// recorded, so the result is the cross-entropy bit for bit.
pub fn kd_loss(
    tape: &mut Tape,
    student: Var,
    teacher: &Tensor,
    targets: &[usize],
    config: &KdConfig,
) -> Result<(Var, KdParts)> {
    config.validate()?;
    if tape.shape(student) != teacher.shape() {
        return Err(Error::Shape {
            op: "kd_loss",
            lhs: tape.shape(student).to_vec(),
            rhs: teacher.shape().to_vec(),
        });
    }
    let a = config.alpha;
    let t = config.temperature;
    let ce = if a < 1.0 {
        Some(cross_entropy(tape, student, targets)?)
    } else {
        None
    };
    let ce_value = match ce {
        Some(v) => tape.value(v).item()?,
        None => 0.0,
    };
    if a == 0.0 {
        let l = ce.expect("alpha < 1");
        return Ok((l, KdParts { ce: ce_value, kl: 0.0, loss: ce_value }));
    }
    let kl = kl_term(tape, student, teacher, targets, t, config.direction)?;
    let kl_value = tape.value(kl).item()?;
    let soft = tape.scale(kl, a * t * t);
    let loss = match ce {
        Some(c) => {
            let hard = tape.scale(c, 1.0 - a);
            tape.add(hard, soft)?
        }
        None => soft,
    };
    let value = tape.value(loss).item()?;
    Ok((
        loss,
        KdParts {
            ce: ce_value,
            kl: kl_value,
            loss: value,
        },
    ))
}

/// Token-mean KL between softened teacher and student distributions.
fn kl_term(
    tape: &mut Tape,
    student: Var,
    teacher: &Tensor,
    targets: &[usize],
    t: f64,
    direction: KlDirection,
) -> Result<Var> {
    let shape = teacher.shape().to_vec();
    let axis = shape.len() - 1;
    let v = shape[axis];
    let weights = token_weights(targets)?;
    if weights.len() * v != teacher.numel() {
        return Err(Error::Shape {
            op: "kd_loss targets",
            lhs: shape,
            rhs: vec![targets.len()],
        });
    }
    let p_t = soften(teacher, t)?;
    let log_p_t: Vec<f64> = p_t.data().iter().map(|&p| if p > 0.0 { p.ln() } else { 0.0 }).collect();
    let scaled = tape.scale(student, 1.0 / t);
    let log_q = tape.log_softmax(scaled, axis)?;
    match direction {
        KlDirection::TeacherStudent => {
            // Σ p (log p − log q): the entropy part is a constant.
            let coeff: Vec<f64> = p_t
                .data()
                .iter()
                .enumerate()
                .map(|(i, p)| -p * weights[i / v])
                .collect();
            let entropy: f64 = p_t
                .data()
                .iter()
                .zip(&log_p_t)
                .enumerate()
                .map(|(i, (p, lp))| p * lp * weights[i / v])
                .sum();
            let c = tape.constant(Tensor::new(shape, coeff)?);
            let cross = tape.mul(log_q, c)?;
            let cross = tape.sum(cross);
            let h = tape.constant(Tensor::scalar(entropy));
            tape.add(cross, h)
        }
        KlDirection::StudentTeacher => {
            // Σ q (log q − log p)
            let q = tape.softmax(scaled, axis)?;
            let lp = tape.constant(Tensor::new(shape.clone(), log_p_t)?);
            let diff = tape.sub(log_q, lp)?;
            let term = tape.mul(q, diff)?;
            let w = tape.constant(Tensor::new(
                shape,
                (0..teacher.numel()).map(|i| weights[i / v]).collect(),
            )?);
            let term = tape.mul(term, w)?;
            Ok(tape.sum(term))
        }
    }
}

/// Distillation objective: the teacher runs forward without gradients on
/// each batch and its logits become the soft targets.
pub struct KdObjective<'a> {
    pub teacher: &'a Model,
    pub config: KdConfig,
}

impl Objective for KdObjective<'_> {
    fn loss(&self, tape: &mut Tape, student: Var, batch: &Batch) -> Result<(Var, Vec<(String, f64)>)> {
        if self.config.alpha == 0.0 {
            let l = cross_entropy(tape, student, &batch.tgt_out)?;
            let v = tape.value(l).item()?;
            return Ok((l, vec![("ce".into(), v)]));
        }
        let teacher_logits = logits(&self.teacher.params, &self.teacher.config, batch)?;
        let (l, parts) = kd_loss(tape, student, &teacher_logits, &batch.tgt_out, &self.config)?;
        Ok((
            l,
            vec![
                ("ce".into(), parts.ce),
                ("kl".into(), parts.kl),
                ("combined".into(), parts.loss),
            ],
        ))
    }
}

/// Trains `student` against `teacher`. The teacher is only read.
pub fn distill(
    teacher: &Model,
    student: &mut Model,
    train: &[Example],
    val: &[Example],
    kd: &KdConfig,
    cfg: &TrainConfig,
    on_epoch: Option<EpochCallback<'_>>,
) -> Result<TrainReport> {
    kd.validate()?;
    if teacher.config.vocab_size != student.config.vocab_size {
        return Err(Error::invalid(format!(
            "teacher vocab ({}) and student vocab ({}) differ",
            teacher.config.vocab_size, student.config.vocab_size
        )));
    }
    let objective = KdObjective { teacher, config: *kd };
    fit(
        student,
        train,
        val,
        cfg,
        FitOptions {
            objective: &objective,
            ..Default::default()
        },
        on_epoch,
    )
}

/// Initializes the student's token embeddings from the teacher's through a
/// fixed random projection `E_s = E_t · P`, with `P ~ N(0, 1/d_teacher)`.
pub fn init_student_embeddings(student: &mut Model, teacher: &Model, seed: u64) -> Result<()> {
    let et = teacher
        .params
        .get("embed.tokens")
        .ok_or_else(|| Error::invalid("teacher has no token embedding"))?;
    let (v, dt) = (et.shape()[0], et.shape()[1]);
    let ds = student.config.d_model;
    if v != student.config.vocab_size {
        return Err(Error::invalid("teacher and student vocabularies differ"));
    }
    let normal = Normal::new(0.0, (dt as f64).powf(-0.5)).expect("valid std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p: Vec<f64> = (0..dt * ds).map(|_| normal.sample(&mut rng)).collect();
    let mut es = vec![0.0; v * ds];
    crate::tensor::gemm(v, dt, ds, et.data(), false, &p, false, &mut es, false);
    let target = student
        .params
        .get_mut("embed.tokens")
        .ok_or_else(|| Error::invalid("student has no token embedding"))?;
    *target = Tensor::new(vec![v, ds], es)?;
    Ok(())
}

/// Token-mean `KL(teacher ‖ student)` at temperature `t` over `examples`.
pub fn held_out_kl(teacher: &Model, student: &Model, examples: &[Example], t: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in examples {
        let batch = Batch::new(&[(&ex.src[..], &ex.tgt[..])], &student.config)?;
        let pt = soften(&logits(&teacher.params, &teacher.config, &batch)?, t)?;
        let ps = soften(&logits(&student.params, &student.config, &batch)?, t)?;
        let v = student.config.vocab_size;
        for (pos, &y) in batch.tgt_out.iter().enumerate() {
            if y == crate::model::PAD {
                continue;
            }
            let (a, b) = (&pt.data()[pos * v..(pos + 1) * v], &ps.data()[pos * v..(pos + 1) * v]);
            total += a
                .iter()
                .zip(b)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, q)| p * (p.ln() - q.ln()))
                .sum::<f64>();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("no target tokens to compare"));
    }
    Ok(total / count as f64)
}
