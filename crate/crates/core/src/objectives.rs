//! Training procedures: MLE, residual fitting against a frozen biased model,
//! and the Remove baseline, all driven by Adam with linear warmup and decay.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::biaslab::oracle_biased_logits;
use crate::corpus::{Dataset, Example, Label, Vocabulary};
use crate::error::{Error, Result};
use crate::featurize::EncodedExample;
use crate::model::Model;
use crate::netcore::{argmax, GradMode, Logits, ProbDist};
use crate::rng;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Mle,
    Drift,
    Remove,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Mle => "mle",
            Objective::Drift => "drift",
            Objective::Remove => "remove",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mle" => Ok(Objective::Mle),
            "drift" => Ok(Objective::Drift),
            "remove" => Ok(Objective::Remove),
            other => Err(Error::InvalidArgument(format!("unknown objective `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub objective: Objective,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Adam denominator offset. The only scale-dependent term in the update.
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub dropout_on: bool,
}

impl TrainPlan {
    pub const DEFAULT_LR: f64 = 5e-3;

    /// Defaults: 30 epochs and weight decay 1.0 for MLE/Remove, 300 epochs
    /// and weight decay 0.2 for residual fitting.
    pub fn new(objective: Objective, seed: u64) -> Self {
        let drift = objective == Objective::Drift;
        TrainPlan {
            objective,
            epochs: if drift { 300 } else { 30 },
            batch_size: 32,
            base_lr: Self::DEFAULT_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: ADAM_EPS,
            weight_decay: if drift { 0.2 } else { 1.0 },
            warmup_fraction: 0.1,
            seed,
            dropout_on: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.epochs == 0 {
            return bad("epochs must be ≥ 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction must be in [0,1), got {}", self.warmup_fraction));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must be in [0,1)".into());
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative".into());
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// Learning rate for zero-based step `t`: linear warmup over the first
/// `ceil(warmup_fraction · total)` steps, then linear decay to 0.
pub fn lr_schedule(t: usize, total_steps: usize, plan: &TrainPlan) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidArgument("lr schedule needs at least one step".into()));
    }
    let warmup = ((plan.warmup_fraction * total_steps as f64 - 1e-9).ceil() as usize).max(1);
    let step = t + 1;
    let lr = if step <= warmup {
        plan.base_lr * step as f64 / warmup as f64
    } else {
        plan.base_lr * total_steps.saturating_sub(step) as f64 / (total_steps - warmup) as f64
    };
    Ok(lr.max(0.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        OptimizerState { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}

/// One Adam step with decoupled weight decay. `decay_mask[i] == false`
/// exempts entry `i` (biases) from decay; `None` decays every entry.
pub fn adam_step(
    state: &mut OptimizerState,
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    plan: &TrainPlan,
    decay_mask: Option<&[bool]>,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: grads.len() });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(i));
    }
    state.t += 1;
    let (b1, b2) = (plan.beta1, plan.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..n {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        let decay = if decay_mask.map_or(true, |m| m[i]) { plan.weight_decay * params[i] } else { 0.0 };
        params[i] -= lr * (m_hat / (v_hat.sqrt() + plan.eps) + decay);
    }
    Ok(())
}

/// `R = -log Σ_k ps(k)·pd(k)`.
pub fn residual_regularizer(ps: &ProbDist, pd: &ProbDist) -> Result<f64> {
    let z: f64 = (0..crate::corpus::NUM_CLASSES).map(|k| ps[k] * pd[k]).sum();
    if z <= 0.0 {
        return Err(Error::Degenerate("inner product of biased and debiased distributions is zero"));
    }
    Ok(-z.ln())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub dev_accuracy: Option<f64>,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
    /// Sum over the epoch's steps of the batch gradient's L2 norm.
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn final_dev_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.dev_accuracy)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "epoch,mean_train_loss,dev_accuracy,lr")?;
        for e in &self.epochs {
            let dev = e.dev_accuracy.map(|a| a.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{}", e.epoch, e.mean_train_loss, dev, e.lr)?;
        }
        Ok(())
    }
}

/// Where frozen biased logits come from.
#[derive(Clone, Copy, Debug)]
pub enum BiasSource<'a> {
    /// A trained biased model over its own (insufficient) extractor.
    Model(&'a Model),
    /// The cheat-token oracle: certain on cheated-true examples, uniform otherwise.
    Oracle,
}

impl BiasSource<'_> {
    pub fn logits(&self, ex: &Example, vocab: &Vocabulary) -> Result<Logits> {
        match self {
            BiasSource::Model(m) => m.logits_for(ex, vocab),
            BiasSource::Oracle => oracle_biased_logits(ex),
        }
    }

    /// Whether the biased model gets `ex` right, as used by the Remove filter.
    ///
    /// A learned model is right when its tie-broken argmax equals the gold
    /// label. The oracle only commits on examples whose cheat token was copied
    /// from the gold label; its uniform output elsewhere is not a prediction.
    pub fn predicts_correctly(&self, ex: &Example, vocab: &Vocabulary) -> Result<bool> {
        match self {
            BiasSource::Model(m) => Ok(argmax(&m.logits_for(ex, vocab)?) == ex.label),
            BiasSource::Oracle => match ex.cheat_token {
                Some(_) => Ok(ex.cheat_from_gold),
                None => Err(Error::MissingCheatToken),
            },
        }
    }
}

struct Prepared {
    encoded: Vec<EncodedExample>,
    labels: Vec<Label>,
}

fn prepare(dataset: &Dataset, vocab: &Vocabulary) -> Result<Prepared> {
    let encoded = dataset.iter().map(|ex| EncodedExample::new(ex, vocab)).collect::<Result<Vec<_>>>()?;
    Ok(Prepared { encoded, labels: dataset.iter().map(|e| e.label).collect() })
}

fn accuracy(model: &Model, data: &Prepared) -> Result<f64> {
    let mut correct = 0usize;
    for (enc, y) in data.encoded.iter().zip(&data.labels) {
        if argmax(&model.logits(enc)?) == *y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.labels.len() as f64)
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>()
}

/// Mean gradient of a batch. Per-example gradients are summed in batch
/// order, then scaled by `1 / len`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchGradient {
    pub params: Vec<f64>,
    /// Dense embedding-table gradient; empty when the table is frozen.
    pub embedding: Vec<f64>,
    pub loss_sum: f64,
}

pub fn batch_gradient(
    model: &Model,
    items: &[(&EncodedExample, Label, GradMode)],
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<BatchGradient> {
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = model.embedding.dim();
    let mut params = vec![0.0; model.classifier.params.len()];
    let mut embedding = if model.embedding.trainable { vec![0.0; model.embedding.values().len()] } else { Vec::new() };
    let mut loss_sum = 0.0;
    for &(enc, y, mode) in items {
        let g = model.gradient(enc, y, mode, dropout.as_deref_mut())?;
        loss_sum += g.loss;
        params.iter_mut().zip(&g.params).for_each(|(a, v)| *a += v);
        if model.embedding.trainable {
            g.rows.scatter_into(&mut embedding, dim, 1.0);
        }
    }
    let scale = 1.0 / items.len() as f64;
    params.iter_mut().for_each(|g| *g *= scale);
    embedding.iter_mut().for_each(|g| *g *= scale);
    Ok(BatchGradient { params, embedding, loss_sum })
}

/// Shared minibatch loop. With `biased` set, each example's loss is the
/// residual-fitting loss against its cached biased logits.
fn fit(
    model: &mut Model,
    train: &Prepared,
    biased: Option<&[Logits]>,
    dev: Option<&Prepared>,
    plan: &TrainPlan,
) -> Result<TrainHistory> {
    plan.validate()?;
    let n = train.labels.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let steps_per_epoch = plan.steps_per_epoch(n);
    let total_steps = plan.epochs * steps_per_epoch;
    let mut order_rng = rng::stream(plan.seed, 0x0de7);
    let mut dropout_rng = rng::stream(plan.seed, 0xd409);

    let decay_mask = model.classifier.arch.weight_mask();
    let mut param_opt = OptimizerState::new(model.classifier.params.len());
    let mut emb_opt = OptimizerState::new(model.embedding.values().len());

    let mut order: Vec<usize> = (0..n).collect();
    let mut history = TrainHistory::default();
    let mut step = 0;
    for epoch in 1..=plan.epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut grad_norm = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(plan.batch_size) {
            let items: Vec<(&EncodedExample, Label, GradMode)> = batch
                .iter()
                .map(|&i| (&train.encoded[i], train.labels[i], biased.map_or(GradMode::Mle, |b| GradMode::Drift(b[i]))))
                .collect();
            let g = batch_gradient(model, &items, plan.dropout_on.then_some(&mut dropout_rng))?;
            loss_sum += g.loss_sum;
            grad_norm += (l2(&g.params) + l2(&g.embedding)).sqrt();

            lr = lr_schedule(step, total_steps, plan)?;
            adam_step(&mut param_opt, &mut model.classifier.params, &g.params, lr, plan, Some(&decay_mask))?;
            if model.embedding.trainable {
                adam_step(&mut emb_opt, model.embedding.values_mut(), &g.embedding, lr, plan, None)?;
            }
            step += 1;
        }
        let dev_accuracy = dev.map(|d| accuracy(model, d)).transpose()?;
        history.epochs.push(EpochRecord { epoch, mean_train_loss: loss_sum / n as f64, dev_accuracy, lr, grad_norm });
    }
    Ok(history)
}

fn require(plan: &TrainPlan, objective: Objective) -> Result<()> {
    if plan.objective != objective {
        return Err(Error::InvalidArgument(format!("plan objective is {}, expected {objective}", plan.objective)));
    }
    Ok(())
}

/// Standard maximum-likelihood training.
pub fn train_mle(
    mut model: Model,
    train: &Dataset,
    dev: Option<&Dataset>,
    vocab: &Vocabulary,
    plan: &TrainPlan,
) -> Result<(Model, TrainHistory)> {
    require(plan, Objective::Mle)?;
    let data = prepare(train, vocab)?;
    let dev = dev.map(|d| prepare(d, vocab)).transpose()?;
    let history = fit(&mut model, &data, None, dev.as_ref(), plan)?;
    Ok((model, history))
}

/// Residual fitting with precomputed biased logits (one per training example).
pub fn train_drift_with_logits(
    mut deb: Model,
    train: &Dataset,
    biased_logits: &[Logits],
    dev: Option<&Dataset>,
    vocab: &Vocabulary,
    plan: &TrainPlan,
) -> Result<(Model, TrainHistory)> {
    require(plan, Objective::Drift)?;
    if biased_logits.len() != train.len() {
        return Err(Error::DimensionMismatch { expected: train.len(), got: biased_logits.len() });
    }
    let data = prepare(train, vocab)?;
    let dev = dev.map(|d| prepare(d, vocab)).transpose()?;
    let history = fit(&mut deb, &data, Some(biased_logits), dev.as_ref(), plan)?;
    Ok((deb, history))
}

/// Residual fitting: the biased model is evaluated once in eval mode and
/// its logits are cached, so it cannot change during training.
pub fn train_drift(
    biased: &BiasSource<'_>,
    deb: Model,
    train: &Dataset,
    dev: Option<&Dataset>,
    vocab: &Vocabulary,
    plan: &TrainPlan,
) -> Result<(Model, TrainHistory)> {
    let logits = train.iter().map(|ex| biased.logits(ex, vocab)).collect::<Result<Vec<_>>>()?;
    train_drift_with_logits(deb, train, &logits, dev, vocab, plan)
}

/// Keep exactly the examples the biased model gets wrong, in order.
pub fn filter_remove(biased: &BiasSource<'_>, dataset: &Dataset, vocab: &Vocabulary) -> Result<Dataset> {
    let mut kept = Vec::new();
    for ex in dataset.iter() {
        if !biased.predicts_correctly(ex, vocab)? {
            kept.push(ex.clone());
        }
    }
    if kept.is_empty() {
        return Err(Error::RemoveEliminatedAll);
    }
    Ok(Dataset::new(format!("{}/remove", dataset.name), kept))
}

/// The Remove baseline: filter, then MLE on what is left.
pub fn train_remove(
    biased: &BiasSource<'_>,
    deb: Model,
    train: &Dataset,
    dev: Option<&Dataset>,
    vocab: &Vocabulary,
    plan: &TrainPlan,
) -> Result<(Model, TrainHistory)> {
    require(plan, Objective::Remove)?;
    let kept = filter_remove(biased, train, vocab)?;
    let mle_plan = TrainPlan { objective: Objective::Mle, ..*plan };
    train_mle(deb, &kept, dev, vocab, &mle_plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Example;
    use crate::featurize::ExtractorKind;
    use crate::model::ModelSpec;

    fn plan(objective: Objective) -> TrainPlan {
        TrainPlan { dropout_on: false, ..TrainPlan::new(objective, 1) }
    }

    #[test]
    fn schedule_points() {
        let p = TrainPlan { base_lr: 1.0, ..plan(Objective::Mle) };
        assert_eq!(lr_schedule(9, 100, &p).unwrap(), 1.0);
        assert_eq!(lr_schedule(99, 100, &p).unwrap(), 0.0);
        assert_eq!(lr_schedule(4, 100, &p).unwrap(), 0.5);
        assert!(lr_schedule(0, 0, &p).is_err());
        let none = TrainPlan { warmup_fraction: 0.0, ..p };
        assert_eq!(lr_schedule(0, 10, &none).unwrap(), 1.0);
        assert_eq!(lr_schedule(0, 1, &none).unwrap(), 1.0);
    }

    #[test]
    fn adam_zero_grad_and_sign_step() {
        let p = TrainPlan { weight_decay: 0.0, ..plan(Objective::Mle) };
        let mut state = OptimizerState::new(3);
        let mut params = vec![1.0, -2.0, 0.5];
        adam_step(&mut state, &mut params, &[0.0; 3], 0.1, &p, None).unwrap();
        assert_eq!(params, vec![1.0, -2.0, 0.5]);

        let mut state = OptimizerState::new(3);
        let grads = [0.02, -5.0, 1e-2];
        let before = params.clone();
        adam_step(&mut state, &mut params, &grads, 0.1, &p, None).unwrap();
        for i in 0..3 {
            let delta = params[i] - before[i];
            assert!((delta + 0.1 * grads[i].signum()).abs() <= 0.1 * 1e-6, "{delta}");
        }
        let err = adam_step(&mut state, &mut params, &[0.0, f64::NAN, 0.0], 0.1, &p, None).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(1)));
    }

    #[test]
    fn adam_bias_entries_skip_decay() {
        let p = TrainPlan { weight_decay: 0.5, ..plan(Objective::Mle) };
        let mut state = OptimizerState::new(2);
        let mut params = vec![1.0, 1.0];
        adam_step(&mut state, &mut params, &[0.0, 0.0], 0.1, &p, Some(&[true, false])).unwrap();
        assert_eq!(params, vec![1.0 - 0.1 * 0.5, 1.0]);
    }

    #[test]
    fn regularizer_values() {
        let pd = ProbDist::new([0.2, 0.3, 0.5]).unwrap();
        assert!((residual_regularizer(&ProbDist::uniform(), &pd).unwrap() - 3f64.ln()).abs() < 1e-15);
        let one = ProbDist::one_hot(Label::Contradiction);
        assert_eq!(residual_regularizer(&one, &one).unwrap(), 0.0);
        let ps = ProbDist::new([0.5, 0.3, 0.2]).unwrap();
        assert!((residual_regularizer(&ps, &pd).unwrap() - 1.237874356).abs() < 1e-9);
        assert!(residual_regularizer(&one, &ProbDist::one_hot(Label::Neutral)).is_err());
    }

    #[test]
    fn plan_validation() {
        assert!(TrainPlan { epochs: 0, ..plan(Objective::Mle) }.validate().is_err());
        assert!(TrainPlan { batch_size: 0, ..plan(Objective::Mle) }.validate().is_err());
        assert!(TrainPlan { base_lr: 0.0, ..plan(Objective::Mle) }.validate().is_err());
        assert!(TrainPlan { warmup_fraction: 1.0, ..plan(Objective::Mle) }.validate().is_err());
        assert!(plan(Objective::Drift).validate().is_ok());
        assert_eq!(TrainPlan::new(Objective::Drift, 0).epochs, 300);
        assert_eq!(TrainPlan::new(Objective::Mle, 0).epochs, 30);
    }

    fn toy() -> (Dataset, Vocabulary) {
        let ex = |p: &str, h: &str, l| {
            Example::new(p.split(' ').map(String::from).collect(), h.split(' ').map(String::from).collect(), l)
        };
        let ds = Dataset::new(
            "toy",
            vec![
                ex("a b", "a", Label::Entailment),
                ex("c d", "x", Label::Neutral),
                ex("a c", "y", Label::Contradiction),
                ex("b d", "b", Label::Entailment),
            ],
        );
        let vocab = crate::corpus::build_vocab(&ds, 1).unwrap();
        (ds, vocab)
    }

    #[test]
    fn filter_remove_keeps_wrong_in_order() {
        let (mut ds, vocab) = toy();
        // oracle: correct exactly where the cheat was copied from the label
        let cheats = [Label::Entailment, Label::Entailment, Label::Contradiction, Label::Neutral];
        for (ex, c) in ds.examples.iter_mut().zip(cheats) {
            ex.cheat_token = Some(c);
            ex.cheat_from_gold = c == ex.label;
        }
        let kept = filter_remove(&BiasSource::Oracle, &ds, &vocab).unwrap();
        assert_eq!(kept.examples, vec![ds.examples[1].clone(), ds.examples[3].clone()]);

        for ex in ds.examples.iter_mut() {
            ex.cheat_token = Some(ex.label);
            ex.cheat_from_gold = true;
        }
        assert!(matches!(filter_remove(&BiasSource::Oracle, &ds, &vocab), Err(Error::RemoveEliminatedAll)));
    }

    #[test]
    fn wrong_objective_rejected() {
        let (ds, vocab) = toy();
        let model = Model::new(ModelSpec::linear(ExtractorKind::Full, 4), vocab.len(), 0).unwrap();
        assert!(train_mle(model, &ds, None, &vocab, &plan(Objective::Drift)).is_err());
    }
}
