//! Diagonal Fisher information from squared log-likelihood gradients.

use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Example;
use crate::error::{Error, Result};
use crate::model::{forward, Batch, Bound, Model, ParameterStore, PAD};
use crate::tensor::{Tape, Tensor};

/// Per-element Fisher values, shaped like the model parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FisherDiag {
    pub diag: ParameterStore,
}

impl FisherDiag {
    pub fn save(&self, path: &Path) -> Result<()> {
        self.diag.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let diag = ParameterStore::load(path)?;
        if diag.iter().flat_map(|(_, t)| t.data()).any(|&v| !(v >= 0.0)) {
            return Err(Error::Checkpoint("Fisher diagonal has negative or NaN entries".into()));
        }
        Ok(FisherDiag { diag })
    }

    /// Sum over all entries; handy for logging.
    pub fn total(&self) -> f64 {
        self.diag.iter().flat_map(|(_, t)| t.data()).sum()
    }
}

/// Anything that can report `∂ log p(sample; θ) / ∂θ` for one sample.
pub trait LikelihoodModel {
    type Sample;

    /// Parameters at which gradients are taken; fixes names and shapes.
    fn parameters(&self) -> &ParameterStore;

    /// Gradient of the sample's log-likelihood, shape-matched to
    /// [`LikelihoodModel::parameters`].
    fn log_likelihood_grad(&self, sample: &Self::Sample) -> Result<ParameterStore>;
}

/// `F_i = mean over samples of (∂ log p / ∂θ_i)²`, one gradient per sample.
pub fn estimate_fisher<M: LikelihoodModel>(model: &M, samples: &[M::Sample]) -> Result<FisherDiag> {
    if samples.is_empty() {
        return Err(Error::invalid("Fisher estimation needs at least one sample"));
    }
    let mut acc: Vec<(String, Vec<f64>, Vec<usize>)> = model
        .parameters()
        .iter()
        .map(|(n, t)| (n.to_string(), vec![0.0; t.numel()], t.shape().to_vec()))
        .collect();
    for sample in samples {
        let grad = model.log_likelihood_grad(sample)?;
        model.parameters().check_compatible(&grad)?;
        for ((_, sum, _), (_, g)) in acc.iter_mut().zip(grad.iter()) {
            for (s, v) in sum.iter_mut().zip(g.data()) {
                *s += v * v;
            }
        }
    }
    let n = samples.len() as f64;
    let mut diag = ParameterStore::new();
    for (name, sum, shape) in acc {
        diag.insert(name, Tensor::new(shape, sum.into_iter().map(|s| s / n).collect())?);
    }
    Ok(FisherDiag { diag })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FisherGranularity {
    /// One sample per target token: `log p(y_t | x, y_<t)`.
    #[default]
    Token,
    /// One sample per example: the token-mean log-likelihood.
    Example,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FisherLabels {
    /// Empirical Fisher with the dataset's labels.
    #[default]
    Observed,
    /// Labels drawn from the model's own predictive distribution (with the
    /// observed prefix fed to the decoder).
    Sampled { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherSample {
    pub example: Example,
    /// Target position for token granularity; `None` means all positions.
    pub position: Option<usize>,
    /// Per-sample stream for sampled labels.
    pub draw: u64,
}

/// Expands examples into Fisher samples at the given granularity.
pub fn fisher_samples(examples: &[Example], granularity: FisherGranularity) -> Vec<FisherSample> {
    let mut out = Vec::new();
    for ex in examples {
        match granularity {
            FisherGranularity::Example => out.push(FisherSample {
                example: ex.clone(),
                position: None,
                draw: out.len() as u64,
            }),
            FisherGranularity::Token => {
                for t in 0..ex.tgt.len() {
                    out.push(FisherSample {
                        example: ex.clone(),
                        position: Some(t),
                        draw: out.len() as u64,
                    });
                }
            }
        }
    }
    out
}

/// The seq2seq model as a likelihood over target tokens.
pub struct Seq2SeqLikelihood<'a> {
    pub model: &'a Model,
    pub labels: FisherLabels,
}

impl LikelihoodModel for Seq2SeqLikelihood<'_> {
    type Sample = FisherSample;

    fn parameters(&self) -> &ParameterStore {
        &self.model.params
    }

    fn log_likelihood_grad(&self, sample: &FisherSample) -> Result<ParameterStore> {
        let ex = &sample.example;
        let batch = Batch::new(&[(&ex.src[..], &ex.tgt[..])], &self.model.config)?;
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &self.model.params, &|_| true);
        let logits = forward(&mut tape, &bound, &self.model.config, &batch)?;
        let lp = tape.log_softmax(logits, 2)?;

        let t_len = batch.tgt_len;
        let selected: Vec<bool> = (0..t_len)
            .map(|t| batch.tgt_out[t] != PAD && sample.position.is_none_or(|p| p == t))
            .collect();
        let n = selected.iter().filter(|&&s| s).count();
        if n == 0 {
            return Err(Error::invalid("Fisher sample selects no target token"));
        }
        let labels: Vec<usize> = match self.labels {
            FisherLabels::Observed => batch.tgt_out.clone(),
            FisherLabels::Sampled { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ sample.draw.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let v = self.model.config.vocab_size;
                let probs = tape.value(lp).data();
                (0..t_len)
                    .map(|t| {
                        let row = &probs[t * v..(t + 1) * v];
                        let w = WeightedIndex::new(row.iter().map(|l| l.exp())).expect("softmax row");
                        w.sample(&mut rng)
                    })
                    .collect()
            }
        };
        let picked = tape.gather_last(lp, &labels)?;
        let weights: Vec<f64> = selected.iter().map(|&s| if s { 1.0 / n as f64 } else { 0.0 }).collect();
        let w = tape.constant(Tensor::new(vec![1, t_len], weights)?);
        let weighted = tape.mul(picked, w)?;
        let ll = tape.sum(weighted);
        tape.backward(ll)?;

        let mut grads = ParameterStore::new();
        for (name, var) in bound.iter() {
            let g = match tape.grad(var) {
                Some(g) => g.clone(),
                None => Tensor::zeros(self.model.params.get(name).map_or(&[][..], |t| t.shape())),
            };
            grads.insert(name, g);
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, EOS};

    /// `log p(y | θ) = −½(θ − y)²` for a single scalar θ.
    struct Gaussian {
        params: ParameterStore,
    }

    impl LikelihoodModel for Gaussian {
        type Sample = f64;
        fn parameters(&self) -> &ParameterStore {
            &self.params
        }
        fn log_likelihood_grad(&self, y: &f64) -> Result<ParameterStore> {
            let theta = self.params.get("theta").unwrap().item()?;
            let mut g = ParameterStore::new();
            g.insert("theta", Tensor::scalar(y - theta));
            g.insert("unused", Tensor::zeros(&[2]));
            Ok(g)
        }
    }

    #[test]
    fn gaussian_fisher_is_one_and_zero_gradients_give_zero() {
        let mut params = ParameterStore::new();
        params.insert("theta", Tensor::scalar(0.3));
        params.insert("unused", Tensor::zeros(&[2]));
        let m = Gaussian { params };
        let f = estimate_fisher(&m, &[1.3, -0.7]).unwrap();
        assert!((f.diag.get("theta").unwrap().item().unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(f.diag.get("unused").unwrap().data(), &[0.0, 0.0]);
        assert!(estimate_fisher(&m, &[]).is_err());
    }

    fn tiny_model() -> Model {
        Model::init(ModelConfig {
            layers: 1,
            d_model: 4,
            heads: 2,
            d_ff: 8,
            vocab_size: 9,
            max_src: 6,
            max_tgt: 5,
            seed: 3,
            tie_embeddings: false,
        })
        .unwrap()
    }

    fn examples() -> Vec<Example> {
        vec![
            Example { src: vec![3, 4, EOS], tgt: vec![5, EOS] },
            Example { src: vec![6, EOS], tgt: vec![7, 8, EOS] },
        ]
    }

    #[test]
    fn granularities_expand_as_expected() {
        assert_eq!(fisher_samples(&examples(), FisherGranularity::Example).len(), 2);
        assert_eq!(fisher_samples(&examples(), FisherGranularity::Token).len(), 5);
    }

    #[test]
    fn seq2seq_fisher_is_nonnegative_and_order_invariant() {
        let model = tiny_model();
        for labels in [FisherLabels::Observed, FisherLabels::Sampled { seed: 9 }] {
            let lm = Seq2SeqLikelihood { model: &model, labels };
            let samples = fisher_samples(&examples(), FisherGranularity::Token);
            let f = estimate_fisher(&lm, &samples).unwrap();
            assert!(f.diag.iter().flat_map(|(_, t)| t.data()).all(|&v| v >= 0.0));
            assert!(f.total() > 0.0);
            let mut rev = samples.clone();
            rev.reverse();
            let g = estimate_fisher(&lm, &rev).unwrap();
            for ((_, a), (_, b)) in f.diag.iter().zip(g.diag.iter()) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert!((x - y).abs() <= 1e-10 * x.abs().max(1e-30) + 1e-18);
                }
            }
        }
    }
}
