//! Run configuration: a TOML file with one section per concern, overridden
//! by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::ValueEnum;
use drift_core::biaslab::{CheatConfig, CheatMode, SweepConfig};
use drift_core::evalkit::AuditConfig;
use drift_core::featurize::ExtractorKind;
use drift_core::model::ModelSpec;
use drift_core::netcore::DEFAULT_DROPOUT;
use drift_core::objectives::{Objective, TrainPlan};
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Synthetic,
    Tsv,
    Jsonl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BiasedKind {
    Hypo,
    Cbow,
    Hand,
    Oracle,
}

impl BiasedKind {
    pub fn extractor(self) -> Option<ExtractorKind> {
        match self {
            BiasedKind::Hypo => Some(ExtractorKind::Hypo),
            BiasedKind::Cbow => Some(ExtractorKind::Cbow),
            BiasedKind::Hand => Some(ExtractorKind::Hand),
            BiasedKind::Oracle => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub format: DataFormat,
    /// A TSV/JSONL file to split, or a directory written by `prepare`.
    pub path: Option<PathBuf>,
    pub n: usize,
    pub vocab_size: usize,
    pub fractions: [f64; 3],
    pub min_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            format: DataFormat::Synthetic,
            path: None,
            n: 3000,
            vocab_size: drift_core::corpus::DEFAULT_SYNTHETIC_VOCAB,
            fractions: [0.8, 0.1, 0.1],
            min_count: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub extractor: ExtractorKind,
    pub embedding_dim: usize,
    /// Omit for a linear classifier.
    pub hidden_dim: Option<usize>,
    pub dropout: f64,
    pub trainable_embeddings: bool,
    /// Text word-vector file whose rows replace matching random rows.
    pub word_vectors: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            extractor: ExtractorKind::Full,
            embedding_dim: drift_core::featurize::DEFAULT_DIM,
            hidden_dim: Some(drift_core::model::DEFAULT_HIDDEN),
            dropout: DEFAULT_DROPOUT,
            trainable_embeddings: true,
            word_vectors: None,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            extractor: self.extractor,
            embedding_dim: self.embedding_dim,
            hidden_dim: self.hidden_dim,
            dropout_rate: self.dropout,
            trainable_embeddings: self.trainable_embeddings,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasedConfig {
    pub kind: Option<BiasedKind>,
    pub checkpoint: Option<PathBuf>,
}

/// Unset keys fall back to the library defaults for the objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub weight_decay: Option<f64>,
    pub warmup_fraction: Option<f64>,
    pub dropout_on: Option<bool>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Mle,
            epochs: None,
            batch_size: None,
            lr: None,
            beta1: None,
            beta2: None,
            eps: None,
            weight_decay: None,
            warmup_fraction: None,
            dropout_on: None,
        }
    }
}

impl TrainConfig {
    /// Library defaults for `objective`, with every key set here applied.
    pub fn plan(&self, objective: Objective, seed: u64) -> TrainPlan {
        let mut p = TrainPlan::new(objective, seed);
        if let Some(v) = self.epochs {
            p.epochs = v;
        }
        self.apply_optimizer(&mut p);
        p
    }

    /// Like [`plan`](Self::plan) but leaves the epoch count alone.
    fn apply_optimizer(&self, p: &mut TrainPlan) {
        if let Some(v) = self.batch_size {
            p.batch_size = v;
        }
        if let Some(v) = self.lr {
            p.base_lr = v;
        }
        if let Some(v) = self.beta1 {
            p.beta1 = v;
        }
        if let Some(v) = self.beta2 {
            p.beta2 = v;
        }
        if let Some(v) = self.eps {
            p.eps = v;
        }
        if let Some(v) = self.weight_decay {
            p.weight_decay = v;
        }
        if let Some(v) = self.warmup_fraction {
            p.warmup_fraction = v;
        }
        if let Some(v) = self.dropout_on {
            p.dropout_on = v;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheatSection {
    pub p_cheat: f64,
    /// Injection mode for train and dev; test always gets random cheats.
    pub mode: CheatMode,
}

impl Default for CheatSection {
    fn default() -> Self {
        CheatSection { p_cheat: 0.0, mode: CheatMode::Biased }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub rates: Vec<f64>,
    pub biased_hidden_dim: Option<usize>,
    pub biased_dropout: Option<f64>,
    pub biased_epochs: Option<usize>,
    pub mle_epochs: Option<usize>,
    pub drift_epochs: Option<usize>,
    pub parallel: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            rates: SweepConfig::DEFAULT_RATES.to_vec(),
            biased_hidden_dim: None,
            biased_dropout: None,
            biased_epochs: None,
            mle_epochs: None,
            drift_epochs: None,
            parallel: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditSection {
    pub extractors: Vec<ExtractorKind>,
    pub threshold_points: f64,
}

impl Default for AuditSection {
    fn default() -> Self {
        AuditSection {
            extractors: vec![ExtractorKind::Hypo, ExtractorKind::Cbow, ExtractorKind::Hand],
            threshold_points: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Not recorded in the manifest, so runs into different directories
    /// produce identical artifacts.
    #[serde(skip_serializing)]
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub biased: BiasedConfig,
    pub train: TrainConfig,
    pub cheat: Option<CheatSection>,
    pub sweep: SweepSection,
    pub audit: AuditSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            out_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            biased: BiasedConfig::default(),
            train: TrainConfig::default(),
            cheat: None,
            sweep: SweepSection::default(),
            audit: AuditSection::default(),
        }
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn train_plan(&self) -> TrainPlan {
        self.train.plan(self.train.objective, self.seed)
    }

    pub fn cheat_config(&self) -> Option<CheatConfig> {
        self.cheat.as_ref().map(|c| CheatConfig { p_cheat: c.p_cheat, mode: c.mode, seed: self.seed })
    }

    pub fn sweep_config(&self) -> SweepConfig {
        let m = &self.model;
        let hidden = m.hidden_dim.unwrap_or(drift_core::model::DEFAULT_HIDDEN);
        let mut cfg = SweepConfig::new(m.embedding_dim, hidden, self.seed);
        cfg.rates = self.sweep.rates.clone();
        cfg.debiased_spec = ModelSpec { extractor: ExtractorKind::Full, ..m.spec() };
        if let Some(h) = self.sweep.biased_hidden_dim {
            cfg.biased_spec.hidden_dim = Some(h);
        }
        if let Some(d) = self.sweep.biased_dropout {
            cfg.biased_spec.dropout_rate = d;
        }
        for plan in [&mut cfg.biased_plan, &mut cfg.mle_plan, &mut cfg.drift_plan] {
            self.train.apply_optimizer(plan);
        }
        let s = &self.sweep;
        for (plan, epochs) in [
            (&mut cfg.biased_plan, s.biased_epochs),
            (&mut cfg.mle_plan, s.mle_epochs),
            (&mut cfg.drift_plan, s.drift_epochs),
        ] {
            if let Some(e) = epochs {
                plan.epochs = e;
            }
        }
        cfg.parallel = s.parallel;
        cfg
    }

    pub fn audit_config(&self) -> AuditConfig {
        let m = &self.model;
        let mut cfg =
            AuditConfig::new(m.embedding_dim, m.hidden_dim.unwrap_or(drift_core::model::DEFAULT_HIDDEN), self.seed);
        cfg.extractors = self.audit.extractors.clone();
        cfg.threshold_points = self.audit.threshold_points;
        cfg.plan = self.train.plan(Objective::Mle, self.seed);
        cfg
    }

    /// Check everything that can be checked before any data is touched.
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.format != DataFormat::Synthetic {
            let path = d.path.as_ref().ok_or_else(|| usage(format!("data format {:?} needs a data path", d.format)))?;
            if !path.exists() {
                return Err(usage(format!("data path {} does not exist", path.display())));
            }
        }
        if let Some(p) = &self.model.word_vectors {
            if !p.exists() {
                return Err(usage(format!("word-vector file {} does not exist", p.display())));
            }
        }
        let [a, b, c] = d.fractions;
        if [a, b, c].iter().any(|f| !f.is_finite() || *f < 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(usage(format!("split fractions must be non-negative and sum to 1, got {:?}", d.fractions)));
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(usage(format!("dropout must be in [0,1), got {}", self.model.dropout)));
        }
        self.train_plan().validate().map_err(|e| usage(e.to_string()))?;
        if let Some(c) = self.cheat_config() {
            c.validate().map_err(|e| usage(e.to_string()))?;
        }
        self.sweep_config().validate().map_err(|e| usage(e.to_string()))?;
        Ok(())
    }
}
