//! Run configuration: one TOML file with a section per stage. Every field
//! has a default, so an empty file is a valid configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use radsum_core::corpus::FilterConfig;
use radsum_core::distillation::KdConfig;
use radsum_core::gsg::ScoringConfig;
use radsum_core::model::ModelConfig;
use radsum_core::tagging::TfidfConfig;
use radsum_core::training::{FisherGranularity, FisherLabels, LambdaSchedule, TrainConfig, UnfreezeStage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub data: DataSection,
    pub gsg: ScoringConfig,
    pub model: ArchSection,
    pub student: ArchSection,
    pub pretrain: TrainConfig,
    pub fisher: FisherSection,
    pub finetune: FinetuneSection,
    pub unfreeze: UnfreezeSection,
    pub distill: DistillSection,
    pub tag: TagSection,
    pub evaluate: EvaluateSection,
    pub sweep: SweepSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 42,
            data: DataSection::default(),
            gsg: ScoringConfig::default(),
            model: ArchSection::from_model(&ModelConfig::teacher()),
            student: ArchSection::from_model(&ModelConfig::student(8).expect("preset exists")),
            pretrain: TrainConfig::default(),
            fisher: FisherSection::default(),
            finetune: FinetuneSection::default(),
            unfreeze: UnfreezeSection::default(),
            distill: DistillSection::default(),
            tag: TagSection::default(),
            evaluate: EvaluateSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// JSONL with `id`, `findings`, `impression`; relative to the config file.
    pub corpus: PathBuf,
    /// Pipe-delimited concept table for `tag`.
    pub concepts: PathBuf,
    pub min_findings_words: usize,
    pub min_impression_words: usize,
    pub count_punctuation: bool,
    /// Cap on vocabulary entries, specials included.
    pub vocab_size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let f = FilterConfig::default();
        DataSection {
            corpus: PathBuf::from("corpus.jsonl"),
            concepts: PathBuf::from("concepts.rrf"),
            min_findings_words: f.min_findings_words,
            min_impression_words: f.min_impression_words,
            count_punctuation: f.count_punctuation,
            vocab_size: 32128,
        }
    }
}

impl DataSection {
    pub fn filter(&self) -> FilterConfig {
        FilterConfig {
            min_findings_words: self.min_findings_words,
            min_impression_words: self.min_impression_words,
            count_punctuation: self.count_punctuation,
        }
    }
}

/// Architecture without the vocabulary size, which comes from `prepare`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSection {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_src: usize,
    pub max_tgt: usize,
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl ArchSection {
    fn from_model(m: &ModelConfig) -> Self {
        ArchSection {
            layers: m.layers,
            d_model: m.d_model,
            heads: m.heads,
            d_ff: m.d_ff,
            max_src: m.max_src,
            max_tgt: m.max_tgt,
            tie_embeddings: m.tie_embeddings,
        }
    }

    pub fn model_config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            vocab_size,
            max_src: self.max_src,
            max_tgt: self.max_tgt,
            seed,
            tie_embeddings: self.tie_embeddings,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FisherSection {
    pub granularity: FisherGranularity,
    pub labels: FisherLabels,
    /// Use at most this many training examples.
    pub max_examples: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub train: TrainConfig,
    /// Zero disables the Fisher anchor.
    pub lambda0: f64,
    pub schedule: LambdaSchedule,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            train: TrainConfig::default(),
            lambda0: 1.0,
            schedule: LambdaSchedule::LinearToZero,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnfreezeSection {
    pub train: TrainConfig,
    /// Empty means top-down: one more layer group per epoch, starting from
    /// the output side.
    pub stages: Vec<UnfreezeStage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub train: TrainConfig,
    pub kd: KdConfig,
    /// Start the student's token embeddings from a projection of the
    /// teacher's.
    pub init_embeddings: bool,
}

impl Default for DistillSection {
    fn default() -> Self {
        DistillSection {
            train: TrainConfig::default(),
            kd: KdConfig::default(),
            init_embeddings: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TagSection {
    pub top_n: usize,
    pub tfidf: TfidfConfig,
    /// Also train a findings-to-tags model with the student architecture.
    pub train_model: bool,
    pub train: TrainConfig,
}

impl Default for TagSection {
    fn default() -> Self {
        TagSection {
            top_n: 500,
            tfidf: TfidfConfig::default(),
            train_model: true,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointStage {
    Pretrain,
    Finetune,
    UnfreezeAblate,
    Distill,
}

impl CheckpointStage {
    pub fn dir(self) -> &'static str {
        match self {
            CheckpointStage::Pretrain => "pretrain",
            CheckpointStage::Finetune => "finetune",
            CheckpointStage::UnfreezeAblate => "unfreeze-ablate",
            CheckpointStage::Distill => "distill",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub checkpoint: CheckpointStage,
    pub split: SplitName,
    /// Decode length cap; the model's `max_tgt` when absent.
    pub max_len: Option<usize>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            checkpoint: CheckpointStage::Finetune,
            split: SplitName::Test,
            max_len: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub fractions: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            fractions: vec![0.1, 0.25, 0.5, 1.0],
        }
    }
}

impl Config {
    /// Parses `path`; relative data paths are resolved against its folder.
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Config =
            toml::from_str(&text).map_err(|e| anyhow::anyhow!("config schema violation in {}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.corpus, &mut cfg.data.concepts] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("pretrain", &self.pretrain),
            ("finetune.train", &self.finetune.train),
            ("unfreeze.train", &self.unfreeze.train),
            ("distill.train", &self.distill.train),
            ("tag.train", &self.tag.train),
        ] {
            t.validate().with_context(|| format!("config section {name}"))?;
        }
        self.distill.kd.validate().context("config section distill.kd")?;
        if !(self.finetune.lambda0 >= 0.0) {
            bail!("finetune.lambda0 must be non-negative");
        }
        if self.tag.top_n == 0 {
            bail!("tag.top_n must be at least 1");
        }
        if self.sweep.fractions.is_empty() {
            bail!("sweep.fractions is empty");
        }
        for &f in &self.sweep.fractions {
            if !(f > 0.0 && f <= 1.0) {
                bail!("sweep.fractions entry {f} is outside (0, 1]");
            }
        }
        for (name, arch) in [("model", &self.model), ("student", &self.student)] {
            arch.model_config(16, 0).validate().with_context(|| format!("config section {name}"))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_documented_defaults() {
        let cfg: Config = toml::from_str("").unwrap();
        assert_eq!(cfg.pretrain.epochs, 20);
        assert_eq!(cfg.pretrain.batch_size, 32);
        assert_eq!(cfg.pretrain.lr, 0.003);
        assert_eq!(cfg.distill.kd.alpha, 0.7);
        assert_eq!(cfg.distill.kd.temperature, 20.0);
        assert_eq!((cfg.model.layers, cfg.model.d_model, cfg.model.heads), (6, 512, 8));
        assert_eq!((cfg.student.layers, cfg.student.d_model, cfg.student.heads), (3, 128, 4));
        cfg.validate().unwrap();
    }

    #[test]
    fn schema_errors_name_the_field() {
        let err = toml::from_str::<Config>("[pretrain]\nepochs = \"many\"\n").unwrap_err().to_string();
        assert!(err.contains("epochs"), "{err}");
        assert!(err.contains("integer") || err.contains("usize"), "{err}");
        let err = toml::from_str::<Config>("[pretrain]\nepoch = 3\n").unwrap_err().to_string();
        assert!(err.contains("epoch"), "{err}");
    }
}
