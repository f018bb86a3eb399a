//! Accuracy, confusion matrices, per-class F1 and bias audits.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Example, Label, Vocabulary, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::featurize::ExtractorKind;
use crate::model::{Model, ModelSpec};
use crate::objectives::{train_mle, Objective, TrainPlan};

/// Rows are gold labels, columns are predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion(pub [[u64; NUM_CLASSES]; NUM_CLASSES]);

impl Confusion {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (Label, Label)>) -> Self {
        let mut c = Confusion::default();
        for (gold, pred) in pairs {
            c.0[gold.index()][pred.index()] += 1;
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|k| self.0[k][k]).sum()
    }

    pub fn gold_count(&self, k: usize) -> u64 {
        self.0[k].iter().sum()
    }

    pub fn predicted_count(&self, k: usize) -> u64 {
        self.0.iter().map(|row| row[k]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }
}

/// Per-class F1; any zero denominator yields 0.
pub fn per_class_f1(conf: &Confusion) -> [f64; NUM_CLASSES] {
    std::array::from_fn(|k| {
        let tp = conf.0[k][k] as f64;
        let (col, row) = (conf.predicted_count(k) as f64, conf.gold_count(k) as f64);
        if col == 0.0 || row == 0.0 {
            return 0.0;
        }
        let (p, r) = (tp / col, tp / row);
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub dataset_id: String,
    pub accuracy: f64,
    /// Entailment, contradiction, neutral.
    pub f1: [f64; NUM_CLASSES],
    /// `false` where the class has no gold examples and F1 is a convention.
    pub f1_defined: [bool; NUM_CLASSES],
    pub confusion: Confusion,
}

impl EvalReport {
    pub fn from_confusion(confusion: Confusion, model_id: &str, dataset_id: &str) -> Self {
        EvalReport {
            model_id: model_id.to_string(),
            dataset_id: dataset_id.to_string(),
            accuracy: confusion.accuracy(),
            f1: per_class_f1(&confusion),
            f1_defined: std::array::from_fn(|k| confusion.gold_count(k) > 0),
            confusion,
        }
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "model,dataset,accuracy,f1_entailment,f1_contradiction,f1_neutral")?;
        writeln!(
            out,
            "{},{},{},{},{},{}",
            self.model_id, self.dataset_id, self.accuracy, self.f1[0], self.f1[1], self.f1[2]
        )?;
        Ok(())
    }

    /// Aligned plain-text table in percent.
    pub fn to_table(&self) -> String {
        let cell = |k: usize| if self.f1_defined[k] { format!("{:>6.1}", 100.0 * self.f1[k]) } else { format!("{:>6}", "-") };
        let mut s = format!("model: {}  dataset: {}\n", self.model_id, self.dataset_id);
        s += &format!("{:<10} {:>6} {:>6} {:>6}\n", "accuracy", "F1-E", "F1-C", "F1-N");
        s += &format!("{:<10.1} {} {} {}\n", 100.0 * self.accuracy, cell(0), cell(1), cell(2));
        s += "confusion (rows gold E/C/N, columns predicted E/C/N):\n";
        for row in &self.confusion.0 {
            s += &format!("  {:>6} {:>6} {:>6}\n", row[0], row[1], row[2]);
        }
        s
    }
}

/// Evaluate any predictor over a dataset.
pub fn evaluate_with(
    dataset: &Dataset,
    model_id: &str,
    mut predict: impl FnMut(&Example) -> Result<Label>,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut pairs = Vec::with_capacity(dataset.len());
    for ex in dataset.iter() {
        pairs.push((ex.label, predict(ex)?));
    }
    Ok(EvalReport::from_confusion(Confusion::from_pairs(pairs), model_id, &dataset.name))
}

pub fn evaluate(model: &Model, dataset: &Dataset, vocab: &Vocabulary) -> Result<EvalReport> {
    let id = format!("{}-{}", model.extractor, model.classifier.arch.input_dim);
    evaluate_with(dataset, &id, |ex| model.predict(ex, vocab))
}

/// `baseline - report` in percentage points.
pub fn accuracy_gap(baseline_accuracy: f64, accuracy: f64) -> f64 {
    100.0 * (baseline_accuracy - accuracy)
}

/// Most frequent training label (ties to the smallest code).
pub fn majority_label(train: &Dataset) -> Label {
    let counts = train.label_counts();
    let mut best = 0;
    for k in 1..NUM_CLASSES {
        if counts[k] > counts[best] {
            best = k;
        }
    }
    Label::ALL[best]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub extractors: Vec<ExtractorKind>,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub plan: TrainPlan,
    /// Points above the majority baseline that count as a bias signal.
    pub threshold_points: f64,
    pub seed: u64,
}

impl AuditConfig {
    pub fn new(embedding_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        AuditConfig {
            extractors: vec![ExtractorKind::Hypo, ExtractorKind::Cbow, ExtractorKind::Hand],
            embedding_dim,
            hidden_dim,
            plan: TrainPlan::new(Objective::Mle, seed),
            threshold_points: 5.0,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub extractor: ExtractorKind,
    pub dev_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub margin_points: f64,
    pub signals_bias: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditTable {
    pub majority_label: Label,
    pub majority_dev_accuracy: f64,
    pub rows: Vec<AuditRow>,
}

impl AuditTable {
    pub fn row(&self, extractor: ExtractorKind) -> Option<&AuditRow> {
        self.rows.iter().find(|r| r.extractor == extractor)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<10} {:>8} {:>8} {:>8}  bias\n", "model", "dev", "test", "margin");
        s += &format!("{:<10} {:>8.1} {:>8} {:>8}\n", "majority", 100.0 * self.majority_dev_accuracy, "", "");
        for r in &self.rows {
            let test = r.test_accuracy.map(|t| format!("{:.1}", 100.0 * t)).unwrap_or_default();
            s += &format!(
                "{:<10} {:>8.1} {:>8} {:>+8.1}  {}\n",
                r.extractor.id(),
                100.0 * r.dev_accuracy,
                test,
                r.margin_points,
                if r.signals_bias { "yes" } else { "no" }
            );
        }
        s
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "model,dev_accuracy,test_accuracy,margin_points,signals_bias")?;
        writeln!(out, "majority,{},,0,false", self.majority_dev_accuracy)?;
        for r in &self.rows {
            let test = r.test_accuracy.map(|t| t.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{},{}", r.extractor, r.dev_accuracy, test, r.margin_points, r.signals_bias)?;
        }
        Ok(())
    }
}

/// Train each insufficient-feature model by MLE and compare its dev accuracy
/// with the majority-class baseline.
pub fn bias_audit(
    train: &Dataset,
    dev: &Dataset,
    test: Option<&Dataset>,
    vocab: &Vocabulary,
    cfg: &AuditConfig,
) -> Result<AuditTable> {
    if train.is_empty() || dev.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let majority = majority_label(train);
    let majority_dev_accuracy = evaluate_with(dev, "majority", |_| Ok(majority))?.accuracy;
    let plan = TrainPlan { objective: Objective::Mle, ..cfg.plan };
    let mut rows = Vec::new();
    for (i, &extractor) in cfg.extractors.iter().enumerate() {
        let spec = ModelSpec::mlp(extractor, cfg.embedding_dim, cfg.hidden_dim);
        let model = Model::new(spec, vocab.len(), cfg.seed.wrapping_add(i as u64))?;
        let (model, _) = train_mle(model, train, None, vocab, &plan)?;
        let dev_accuracy = evaluate(&model, dev, vocab)?.accuracy;
        let test_accuracy = test.map(|t| evaluate(&model, t, vocab).map(|r| r.accuracy)).transpose()?;
        let margin_points = -accuracy_gap(majority_dev_accuracy, dev_accuracy);
        rows.push(AuditRow {
            extractor,
            dev_accuracy,
            test_accuracy,
            margin_points,
            signals_bias: margin_points > cfg.threshold_points,
        });
    }
    Ok(AuditTable { majority_label: majority, majority_dev_accuracy, rows })
}
