//! Controlled dataset bias: cheating-feature injection, the oracle biased
//! classifier, stress-test distractors and the cheating-rate sweep.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Example, Label, Vocabulary, CONNECTOR, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::evalkit::{accuracy_gap, evaluate, evaluate_with};
use crate::featurize::ExtractorKind;
use crate::model::{Model, ModelSpec};
use crate::netcore::{argmax, Logits};
use crate::objectives::{filter_remove, train_drift, train_mle, BiasSource, Objective, TrainPlan};
use crate::rng;

/// Logit given to the gold class by the oracle on cheated-true examples.
pub const ORACLE_LOGIT: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheatMode {
    /// Gold label word with probability `p_cheat`, otherwise a uniform label word.
    Biased,
    /// Always a uniform label word.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheatConfig {
    pub p_cheat: f64,
    pub mode: CheatMode,
    pub seed: u64,
}

impl CheatConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_cheat) {
            return Err(Error::InvalidArgument(format!("cheating rate must be in [0,1], got {}", self.p_cheat)));
        }
        Ok(())
    }
}

/// Prepend `"{label} and"` to every hypothesis and record the chosen label.
pub fn inject_cheat(dataset: &Dataset, cfg: &CheatConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, 0xc4ea7);
    let examples = dataset
        .iter()
        .map(|ex| {
            let keep_gold = rng.gen::<f64>() < cfg.p_cheat;
            let random = Label::ALL[rng.gen_range(0..NUM_CLASSES)];
            let word = match cfg.mode {
                CheatMode::Biased if keep_gold => ex.label,
                _ => random,
            };
            let mut hypothesis = Vec::with_capacity(ex.hypothesis.len() + 2);
            hypothesis.push(word.word().to_string());
            hypothesis.push(CONNECTOR.to_string());
            hypothesis.extend(ex.hypothesis.iter().cloned());
            let cheat_from_gold = cfg.mode == CheatMode::Biased && keep_gold;
            Example { hypothesis, cheat_token: Some(word), cheat_from_gold, ..ex.clone() }
        })
        .collect();
    Ok(Dataset::new(dataset.name.clone(), examples))
}

/// Certain (`+30` on the gold class) on examples whose cheat token was
/// copied from the gold label, uniform otherwise.
pub fn oracle_biased_logits(ex: &Example) -> Result<Logits> {
    ex.cheat_token.ok_or(Error::MissingCheatToken)?;
    let mut z = [0.0; NUM_CLASSES];
    if ex.cheat_from_gold {
        z[ex.label.index()] = ORACLE_LOGIT;
    }
    Ok(Logits(z))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StressKind {
    /// Appends "and true is true".
    Overlap,
    /// Appends "and false is not true".
    Negation,
}

impl StressKind {
    pub fn suffix(self) -> &'static [&'static str] {
        match self {
            StressKind::Overlap => &["and", "true", "is", "true"],
            StressKind::Negation => &["and", "false", "is", "not", "true"],
        }
    }
}

impl FromStr for StressKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overlap" => Ok(StressKind::Overlap),
            "negation" => Ok(StressKind::Negation),
            other => Err(Error::InvalidArgument(format!("unknown stress kind `{other}`"))),
        }
    }
}

/// Append a label-preserving distractor phrase to every hypothesis.
pub fn stress_transform(dataset: &Dataset, kind: StressKind) -> Dataset {
    let examples = dataset
        .iter()
        .map(|ex| {
            let mut ex = ex.clone();
            ex.hypothesis.extend(kind.suffix().iter().map(|t| t.to_string()));
            ex
        })
        .collect();
    Dataset::new(format!("{}/stress-{kind:?}", dataset.name).to_lowercase(), examples)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SweepMethod {
    Mle,
    DriftHypo,
    /// Best case: residual fitting against the cheat oracle.
    DriftOracle,
    RemoveHypo,
    /// Remove the cheated-true examples, then MLE.
    RemoveOracle,
}

impl SweepMethod {
    pub const ALL: [SweepMethod; 5] = [
        SweepMethod::Mle,
        SweepMethod::DriftHypo,
        SweepMethod::DriftOracle,
        SweepMethod::RemoveHypo,
        SweepMethod::RemoveOracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepMethod::Mle => "MLE",
            SweepMethod::DriftHypo => "DRiFt-hypo",
            SweepMethod::DriftOracle => "DRiFt-oracle",
            SweepMethod::RemoveHypo => "Remove-hypo",
            SweepMethod::RemoveOracle => "Remove-oracle",
        }
    }

    fn uses_oracle(self) -> bool {
        matches!(self, SweepMethod::DriftOracle | SweepMethod::RemoveOracle)
    }
}

impl fmt::Display for SweepMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub rates: Vec<f64>,
    pub methods: Vec<SweepMethod>,
    /// Hypothesis-only biased model.
    pub biased_spec: ModelSpec,
    /// Full-input debiased model.
    pub debiased_spec: ModelSpec,
    pub biased_plan: TrainPlan,
    /// Used for MLE and Remove.
    pub mle_plan: TrainPlan,
    pub drift_plan: TrainPlan,
    pub seed: u64,
    /// Train Remove for as many optimizer steps as MLE takes on the full
    /// training set, rather than for the same number of epochs.
    pub match_remove_steps: bool,
    /// Run cells on the rayon pool. Results do not depend on this.
    pub parallel: bool,
}

impl SweepConfig {
    pub const DEFAULT_RATES: [f64; 5] = [0.0, 0.3, 0.6, 0.8, 0.9];

    pub fn new(embedding_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        SweepConfig {
            rates: Self::DEFAULT_RATES.to_vec(),
            methods: SweepMethod::ALL.to_vec(),
            biased_spec: ModelSpec::mlp(ExtractorKind::Hypo, embedding_dim, hidden_dim),
            debiased_spec: ModelSpec::mlp(ExtractorKind::Full, embedding_dim, hidden_dim),
            biased_plan: TrainPlan::new(Objective::Mle, seed),
            mle_plan: TrainPlan::new(Objective::Mle, seed),
            drift_plan: TrainPlan::new(Objective::Drift, seed),
            seed,
            match_remove_steps: true,
            parallel: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rates.is_empty() {
            return Err(Error::InvalidArgument("sweep needs at least one rate".into()));
        }
        for &p_cheat in &self.rates {
            CheatConfig { p_cheat, mode: CheatMode::Biased, seed: 0 }.validate()?;
        }
        if self.biased_spec.extractor != ExtractorKind::Hypo {
            return Err(Error::InvalidArgument("the sweep's biased model must use the hypo extractor".into()));
        }
        self.biased_plan.validate()?;
        self.mle_plan.validate()?;
        self.drift_plan.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rate: f64,
    pub method: SweepMethod,
    pub test_accuracy: f64,
    pub dev_accuracy: f64,
    pub biased_test_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn get(&self, rate: f64, method: SweepMethod) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.rate == rate && r.method == method)
    }

    /// Test accuracy drop in points from the lowest to the highest rate.
    pub fn drop_points(&self, method: SweepMethod) -> Option<f64> {
        let rows: Vec<&SweepRow> = self.rows.iter().filter(|r| r.method == method).collect();
        let lo = rows.iter().min_by(|a, b| a.rate.total_cmp(&b.rate))?;
        let hi = rows.iter().max_by(|a, b| a.rate.total_cmp(&b.rate))?;
        Some(accuracy_gap(lo.test_accuracy, hi.test_accuracy))
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "rate,method,test_accuracy,dev_accuracy,biased_model_test_accuracy")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.rate, r.method, r.test_accuracy, r.dev_accuracy, r.biased_test_accuracy
            )?;
        }
        Ok(())
    }
}

fn rate_tag(rate: f64) -> u64 {
    rate.to_bits()
}

struct RateData {
    rate: f64,
    train: Dataset,
    dev: Dataset,
    test: Dataset,
    hypo: Option<Model>,
    hypo_test_accuracy: f64,
    oracle_test_accuracy: f64,
}

fn prepare_rate(
    rate: f64,
    base: (&Dataset, &Dataset, &Dataset),
    vocab: &Vocabulary,
    cfg: &SweepConfig,
) -> Result<RateData> {
    let seed = cfg.seed ^ rate_tag(rate).rotate_left(17);
    let biased = |s: u64| CheatConfig { p_cheat: rate, mode: CheatMode::Biased, seed: s };
    let train = inject_cheat(base.0, &biased(seed))?;
    let dev = inject_cheat(base.1, &biased(seed.wrapping_add(1)))?;
    let test = inject_cheat(base.2, &CheatConfig { p_cheat: rate, mode: CheatMode::Random, seed: seed.wrapping_add(2) })?;

    let needs_hypo = cfg.methods.iter().any(|m| !m.uses_oracle());
    let (hypo, hypo_test_accuracy) = if needs_hypo {
        let model = Model::new(cfg.biased_spec, vocab.len(), seed.wrapping_add(3))?;
        let plan = TrainPlan { seed: seed.wrapping_add(4), ..cfg.biased_plan };
        let (model, _) = train_mle(model, &train, None, vocab, &plan)?;
        let acc = evaluate(&model, &test, vocab)?.accuracy;
        (Some(model), acc)
    } else {
        (None, f64::NAN)
    };
    let oracle_test_accuracy =
        evaluate_with(&test, "oracle", |ex| Ok(argmax(&oracle_biased_logits(ex)?)))?.accuracy;
    Ok(RateData { rate, train, dev, test, hypo, hypo_test_accuracy, oracle_test_accuracy })
}

/// Epochs on `kept` examples that take at least as many steps as
/// `plan.epochs` epochs on `full` examples.
pub fn matched_epochs(plan: &TrainPlan, full: usize, kept: usize) -> usize {
    let total = plan.epochs * plan.steps_per_epoch(full);
    total.div_ceil(plan.steps_per_epoch(kept).max(1))
}

fn run_cell(data: &RateData, method: SweepMethod, vocab: &Vocabulary, cfg: &SweepConfig) -> Result<SweepRow> {
    let seed = cfg.seed ^ rate_tag(data.rate).rotate_left(17);
    let deb = Model::new(cfg.debiased_spec, vocab.len(), seed.wrapping_add(5))?;
    let reseed = |p: &TrainPlan| TrainPlan { seed: seed.wrapping_add(6), ..*p };
    let hypo = || data.hypo.as_ref().map(BiasSource::Model).ok_or(Error::InvalidArgument("no hypo model".into()));
    let dev = Some(&data.dev);
    let (model, _) = match method {
        SweepMethod::Mle => train_mle(deb, &data.train, dev, vocab, &reseed(&cfg.mle_plan))?,
        SweepMethod::DriftHypo => train_drift(&hypo()?, deb, &data.train, dev, vocab, &reseed(&cfg.drift_plan))?,
        SweepMethod::DriftOracle => {
            train_drift(&BiasSource::Oracle, deb, &data.train, dev, vocab, &reseed(&cfg.drift_plan))?
        }
        SweepMethod::RemoveHypo | SweepMethod::RemoveOracle => {
            let source = if method == SweepMethod::RemoveHypo { hypo()? } else { BiasSource::Oracle };
            let kept = filter_remove(&source, &data.train, vocab)?;
            let mut plan = reseed(&cfg.mle_plan);
            if cfg.match_remove_steps {
                plan.epochs = matched_epochs(&plan, data.train.len(), kept.len());
            }
            train_mle(deb, &kept, dev, vocab, &plan)?
        }
    };
    Ok(SweepRow {
        rate: data.rate,
        method,
        test_accuracy: evaluate(&model, &data.test, vocab)?.accuracy,
        dev_accuracy: evaluate(&model, &data.dev, vocab)?.accuracy,
        biased_test_accuracy: if method.uses_oracle() { data.oracle_test_accuracy } else { data.hypo_test_accuracy },
    })
}

/// For each cheating rate: inject Biased-mode cheats into train/dev and
/// Random-mode cheats into test, train the hypothesis-only biased model,
/// then train and evaluate a debiased model under each method.
///
/// Every cell's randomness is derived from `(cfg.seed, rate)`, so serial and
/// parallel runs produce identical tables.
pub fn cheat_sweep(
    train: &Dataset,
    dev: &Dataset,
    test: &Dataset,
    vocab: &Vocabulary,
    cfg: &SweepConfig,
) -> Result<SweepResult> {
    cfg.validate()?;
    let base = (train, dev, test);
    let prepared: Vec<RateData> = if cfg.parallel {
        cfg.rates.par_iter().map(|&r| prepare_rate(r, base, vocab, cfg)).collect::<Result<_>>()?
    } else {
        cfg.rates.iter().map(|&r| prepare_rate(r, base, vocab, cfg)).collect::<Result<_>>()?
    };
    let cells: Vec<(&RateData, SweepMethod)> =
        prepared.iter().flat_map(|d| cfg.methods.iter().map(move |&m| (d, m))).collect();
    let rows = if cfg.parallel {
        cells.par_iter().map(|&(d, m)| run_cell(d, m, vocab, cfg)).collect::<Result<Vec<_>>>()?
    } else {
        cells.iter().map(|&(d, m)| run_cell(d, m, vocab, cfg)).collect::<Result<Vec<_>>>()?
    };
    Ok(SweepResult { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_synthetic_task;
    use crate::netcore::softmax;

    #[test]
    fn oracle_rules() {
        let mut ex = Example::new(vec!["a".into()], vec!["b".into()], Label::Contradiction);
        assert!(matches!(oracle_biased_logits(&ex), Err(Error::MissingCheatToken)));
        ex.cheat_token = Some(Label::Contradiction);
        ex.cheat_from_gold = true;
        let z = oracle_biased_logits(&ex).unwrap();
        assert_eq!(z, Logits([0.0, 30.0, 0.0]));
        assert!(softmax(&z)[1] >= 1.0 - 1e-12);
        ex.cheat_from_gold = false;
        assert_eq!(oracle_biased_logits(&ex).unwrap(), Logits([0.0; 3]));
    }

    #[test]
    fn full_rate_cheat_matches_gold() {
        let ds = generate_synthetic_task(90, 20, 3).unwrap();
        let out = inject_cheat(&ds, &CheatConfig { p_cheat: 1.0, mode: CheatMode::Biased, seed: 1 }).unwrap();
        for (a, b) in ds.iter().zip(out.iter()) {
            assert_eq!(b.hypothesis[0], a.label.word());
            assert_eq!(b.hypothesis[1], "and");
            assert_eq!(&b.hypothesis[2..], &a.hypothesis[..]);
            assert_eq!(b.cheat_token, Some(a.label));
            assert!(b.cheat_from_gold);
            assert_eq!((&b.premise, b.label), (&a.premise, a.label));
        }
        assert!(ds.iter().all(|e| e.cheat_token.is_none()));
    }

    #[test]
    fn invalid_rate_rejected() {
        let ds = generate_synthetic_task(9, 20, 3).unwrap();
        assert!(inject_cheat(&ds, &CheatConfig { p_cheat: 1.2, mode: CheatMode::Biased, seed: 1 }).is_err());
    }

    #[test]
    fn matched_epochs_cover_the_step_budget() {
        let plan = TrainPlan { batch_size: 32, epochs: 30, ..TrainPlan::new(Objective::Mle, 0) };
        assert_eq!(matched_epochs(&plan, 2400, 2400), 30);
        // 75 steps per full epoch, 8 per filtered epoch: 2250 / 8 rounded up
        assert_eq!(matched_epochs(&plan, 2400, 240), 282);
        assert_eq!(matched_epochs(&plan, 10, 1), 30);
    }

    #[test]
    fn stress_suffixes() {
        let ex = Example::new(vec!["x".into()], vec!["a".into(), "dog".into(), "runs".into()], Label::Neutral);
        let ds = Dataset::new("s", vec![ex]);
        let out = stress_transform(&ds, StressKind::Negation);
        assert_eq!(out.examples[0].hypothesis, ["a", "dog", "runs", "and", "false", "is", "not", "true"]);
        let out = stress_transform(&ds, StressKind::Overlap);
        assert_eq!(out.examples[0].hypothesis.len(), 7);
        assert_eq!(out.examples[0].label, Label::Neutral);
    }
}
