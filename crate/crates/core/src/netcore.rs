//! Softmax classifiers with exact analytic gradients.
//!
//! Parameter layout (row-major, flat):
//! - `Linear`: `W[3 × in]`, `b[3]`
//! - `Mlp`: `W1[h × in]`, `b1[h]`, `W2[3 × h]`, `b2[3]`

use std::ops::Index;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Label, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_DROPOUT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ArchKind {
    Linear,
    Mlp { hidden_dim: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: ArchKind,
    pub input_dim: usize,
    pub dropout_rate: f64,
}

impl Architecture {
    pub fn linear(input_dim: usize) -> Self {
        Architecture { kind: ArchKind::Linear, input_dim, dropout_rate: 0.0 }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, dropout_rate: f64) -> Self {
        Architecture { kind: ArchKind::Mlp { hidden_dim }, input_dim, dropout_rate }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArgument("input_dim must be ≥ 1".into()));
        }
        if let ArchKind::Mlp { hidden_dim: 0 } = self.kind {
            return Err(Error::InvalidArgument("hidden_dim must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(format!("dropout_rate must be in [0,1), got {}", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let k = NUM_CLASSES;
        match self.kind {
            ArchKind::Linear => k * self.input_dim + k,
            ArchKind::Mlp { hidden_dim: h } => h * self.input_dim + h + k * h + k,
        }
    }

    /// `true` for weight entries, `false` for biases.
    pub fn weight_mask(&self) -> Vec<bool> {
        let k = NUM_CLASSES;
        let block = |n: usize, w: bool| std::iter::repeat(w).take(n);
        match self.kind {
            ArchKind::Linear => block(k * self.input_dim, true).chain(block(k, false)).collect(),
            ArchKind::Mlp { hidden_dim: h } => block(h * self.input_dim, true)
                .chain(block(h, false))
                .chain(block(k * h, true))
                .chain(block(k, false))
                .collect(),
        }
    }
}

/// Per-class scores.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Logits(pub [f64; NUM_CLASSES]);

impl Index<usize> for Logits {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl Logits {
    pub fn log_sum_exp(&self) -> f64 {
        let max = self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max + self.0.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
    }

    /// `log softmax(z)[y]`.
    pub fn log_prob(&self, y: Label) -> f64 {
        self.0[y.index()] - self.log_sum_exp()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbDist([f64; NUM_CLASSES]);

impl ProbDist {
    pub fn new(p: [f64; NUM_CLASSES]) -> Result<Self> {
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("not a probability distribution: {p:?}")));
        }
        Ok(ProbDist(p))
    }

    pub fn uniform() -> Self {
        ProbDist([1.0 / NUM_CLASSES as f64; NUM_CLASSES])
    }

    pub fn one_hot(y: Label) -> Self {
        let mut p = [0.0; NUM_CLASSES];
        p[y.index()] = 1.0;
        ProbDist(p)
    }

    pub fn values(&self) -> [f64; NUM_CLASSES] {
        self.0
    }
}

impl Index<usize> for ProbDist {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

pub fn softmax(z: &Logits) -> ProbDist {
    let max = z.0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = z.0.map(|v| (v - max).exp());
    let s: f64 = e.iter().sum();
    ProbDist(e.map(|v| v / s))
}

/// `fs + fd`, with `fs` shifted so its largest entry is zero. The shift leaves
/// the softmax unchanged and makes a constant `fs` drop out exactly.
pub fn combine_logits(fs: &Logits, fd: &Logits) -> Logits {
    let m = fs.0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Logits(std::array::from_fn(|k| (fs.0[k] - m) + fd.0[k]))
}

/// `p_a(k) = ps(k)·pd(k) / Σ_j ps(j)·pd(j)`.
pub fn gradient_weights(ps: &ProbDist, pd: &ProbDist) -> Result<ProbDist> {
    let prod: [f64; NUM_CLASSES] = std::array::from_fn(|k| ps.0[k] * pd.0[k]);
    let z: f64 = prod.iter().sum();
    if z <= 0.0 {
        return Err(Error::Degenerate("biased and debiased distributions have disjoint support"));
    }
    Ok(ProbDist(prod.map(|v| v / z)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub arch: Architecture,
    pub params: Vec<f64>,
}

/// Which per-example objective a gradient is taken of.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GradMode {
    Mle,
    /// Residual fitting against frozen biased logits.
    Drift(Logits),
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Activations {
    pre: Vec<f64>,
    /// Post-relu, post-dropout hidden units.
    hidden: Vec<f64>,
    /// Per hidden unit: 0 if dropped, 1/(1-rate) otherwise (1 in eval mode).
    keep: Vec<f64>,
    pub logits: Logits,
}

impl Activations {
    /// Hidden pre-activations; empty for a linear classifier.
    pub fn pre_activations(&self) -> &[f64] {
        &self.pre
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub params: Vec<f64>,
    /// Gradient with respect to the input features.
    pub input: Vec<f64>,
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(arch: Architecture, seed: u64) -> Result<Classifier> {
    arch.validate()?;
    let mut rng = rng::stream(seed, 0x1417);
    let mut params = Vec::with_capacity(arch.param_count());
    let mut layer = |params: &mut Vec<f64>, fan_out: usize, fan_in: usize| {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        params.extend((0..fan_in * fan_out).map(|_| rng.gen_range(-bound..=bound)));
        params.extend(std::iter::repeat(0.0).take(fan_out));
    };
    match arch.kind {
        ArchKind::Linear => layer(&mut params, NUM_CLASSES, arch.input_dim),
        ArchKind::Mlp { hidden_dim } => {
            layer(&mut params, hidden_dim, arch.input_dim);
            layer(&mut params, NUM_CLASSES, hidden_dim);
        }
    }
    Ok(Classifier { arch, params })
}

fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.extend(w.chunks_exact(x.len()).zip(b).map(|(row, bias)| {
        bias + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>()
    }));
}

impl Classifier {
    pub fn new(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::DimensionMismatch { expected: arch.param_count(), got: params.len() });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("classifier parameters must be finite".into()));
        }
        Ok(Classifier { arch, params })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        Self::new(arch, vec![0.0; arch.param_count()])
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arch.input_dim {
            return Err(Error::DimensionMismatch { expected: self.arch.input_dim, got: x.len() });
        }
        Ok(())
    }

    /// Forward pass. Dropout is applied to hidden units only when an RNG is given.
    pub fn activations(&self, x: &[f64], dropout: Option<&mut ChaCha8Rng>) -> Result<Activations> {
        self.check_input(x)?;
        let d = self.arch.input_dim;
        let mut logits = Vec::with_capacity(NUM_CLASSES);
        match self.arch.kind {
            ArchKind::Linear => {
                let (w, b) = self.params.split_at(NUM_CLASSES * d);
                affine(w, b, x, &mut logits);
                Ok(Activations {
                    pre: Vec::new(),
                    hidden: Vec::new(),
                    keep: Vec::new(),
                    logits: Logits([logits[0], logits[1], logits[2]]),
                })
            }
            ArchKind::Mlp { hidden_dim: h } => {
                let (w1, rest) = self.params.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(NUM_CLASSES * h);
                let mut pre = Vec::with_capacity(h);
                affine(w1, b1, x, &mut pre);
                let rate = self.arch.dropout_rate;
                let keep: Vec<f64> = match dropout {
                    Some(rng) if rate > 0.0 => {
                        (0..h).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { 1.0 / (1.0 - rate) }).collect()
                    }
                    _ => vec![1.0; h],
                };
                let hidden: Vec<f64> = pre.iter().zip(&keep).map(|(p, k)| p.max(0.0) * k).collect();
                affine(w2, b2, &hidden, &mut logits);
                Ok(Activations { pre, hidden, keep, logits: Logits([logits[0], logits[1], logits[2]]) })
            }
        }
    }

    pub fn forward_eval(&self, x: &[f64]) -> Result<Logits> {
        Ok(self.activations(x, None)?.logits)
    }

    /// Backward pass from the output error `p - onehot(y)`.
    pub fn backward_from(&self, x: &[f64], acts: &Activations, y: Label, mode: GradMode) -> Gradient {
        let p = match mode {
            GradMode::Mle => softmax(&acts.logits),
            GradMode::Drift(fs) => softmax(&combine_logits(&fs, &acts.logits)),
        };
        let mut delta = p.0;
        delta[y.index()] -= 1.0;
        self.backward_delta(x, acts, &delta)
    }

    fn backward_delta(&self, x: &[f64], acts: &Activations, delta: &[f64; NUM_CLASSES]) -> Gradient {
        let d = self.arch.input_dim;
        let mut params = vec![0.0; self.params.len()];
        let mut input = vec![0.0; d];
        match self.arch.kind {
            ArchKind::Linear => {
                let (gw, gb) = params.split_at_mut(NUM_CLASSES * d);
                let w = &self.params[..NUM_CLASSES * d];
                for k in 0..NUM_CLASSES {
                    for j in 0..d {
                        gw[k * d + j] = delta[k] * x[j];
                        input[j] += w[k * d + j] * delta[k];
                    }
                    gb[k] = delta[k];
                }
            }
            ArchKind::Mlp { hidden_dim: h } => {
                let w1 = &self.params[..h * d];
                let w2 = &self.params[h * d + h..h * d + h + NUM_CLASSES * h];
                let (gw1, rest) = params.split_at_mut(h * d);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(NUM_CLASSES * h);
                let mut d_hidden = vec![0.0; h];
                for k in 0..NUM_CLASSES {
                    for i in 0..h {
                        gw2[k * h + i] = delta[k] * acts.hidden[i];
                        d_hidden[i] += w2[k * h + i] * delta[k];
                    }
                    gb2[k] = delta[k];
                }
                for i in 0..h {
                    let d_pre = if acts.pre[i] > 0.0 { d_hidden[i] * acts.keep[i] } else { 0.0 };
                    gb1[i] = d_pre;
                    if d_pre != 0.0 {
                        for j in 0..d {
                            gw1[i * d + j] = d_pre * x[j];
                            input[j] += w1[i * d + j] * d_pre;
                        }
                    }
                }
            }
        }
        Gradient { params, input }
    }
}

/// Logits for `x`. In train mode dropout masks are drawn from `seed`.
pub fn forward(clf: &Classifier, x: &[f64], train_mode: bool, seed: u64) -> Result<Logits> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(clf.activations(x, train_mode.then_some(&mut rng))?.logits)
}

/// `-log softmax(f(x))[y]`.
pub fn loss_mle(clf: &Classifier, x: &[f64], y: Label) -> Result<f64> {
    Ok(-clf.forward_eval(x)?.log_prob(y))
}

/// `-log softmax(fs + f(x))[y]` with `fs` frozen.
pub fn loss_drift(clf: &Classifier, x: &[f64], y: Label, fs: &Logits) -> Result<f64> {
    Ok(-combine_logits(fs, &clf.forward_eval(x)?).log_prob(y))
}

/// Exact eval-mode gradient of the per-example loss selected by `mode`.
pub fn backward(clf: &Classifier, x: &[f64], y: Label, mode: GradMode) -> Result<Gradient> {
    let acts = clf.activations(x, None)?;
    Ok(clf.backward_from(x, &acts, y, mode))
}

/// Argmax with ties going to the smallest class code.
pub fn argmax(z: &Logits) -> Label {
    let mut best = 0;
    for k in 1..NUM_CLASSES {
        if z.0[k] > z.0[best] {
            best = k;
        }
    }
    Label::ALL[best]
}

pub fn predict(clf: &Classifier, x: &[f64]) -> Result<Label> {
    Ok(argmax(&clf.forward_eval(x)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn init_layout_and_determinism() {
        let arch = Architecture::linear(10);
        let c = init_params(arch, 5).unwrap();
        assert_eq!(c.params.len(), 33);
        assert!(c.params[30..].iter().all(|b| *b == 0.0));
        assert_eq!(c, init_params(arch, 5).unwrap());

        let mlp = Architecture::mlp(4, 6, 0.1);
        let c = init_params(mlp, 5).unwrap();
        assert_eq!(c.params.len(), 6 * 4 + 6 + 3 * 6 + 3);
        let bound = (6.0f64 / 10.0).sqrt();
        assert!(c.params[..24].iter().all(|w| w.abs() <= bound));
        assert!(c.params[24..30].iter().all(|b| *b == 0.0));
        assert!(init_params(Architecture::mlp(4, 6, 1.0), 0).is_err());
    }

    #[test]
    fn forward_cases() {
        let zero = Classifier::zeros(Architecture::mlp(3, 4, 0.5)).unwrap();
        assert_eq!(forward(&zero, &[1.0, 2.0, 3.0], true, 1).unwrap(), Logits([0.0; 3]));

        // W rows pick x0, x1 and x0 + x2
        let params = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        let lin = Classifier::new(Architecture::linear(3), params).unwrap();
        assert_eq!(lin.forward_eval(&[1.0, 2.0, 3.0]).unwrap(), Logits([1.0, 2.0, 4.0]));
        assert!(matches!(lin.forward_eval(&[1.0]), Err(Error::DimensionMismatch { expected: 3, got: 1 })));

        let mlp = init_params(Architecture::mlp(3, 8, 0.5), 2).unwrap();
        let x = [0.3, -0.2, 0.9];
        assert_eq!(forward(&mlp, &x, false, 1).unwrap(), forward(&mlp, &x, false, 2).unwrap());
    }

    #[test]
    fn softmax_cases() {
        let u = softmax(&Logits([0.0; 3]));
        assert!(u.0.iter().all(|p| close(*p, 1.0 / 3.0, 1e-15)));
        let p = softmax(&Logits([2f64.ln(), 0.0, 0.0]));
        assert!(close(p[0], 0.5, 1e-15) && close(p[1], 0.25, 1e-15) && close(p[2], 0.25, 1e-15));
        let big = softmax(&Logits([1000.0, 0.0, 0.0]));
        assert!(big.0.iter().all(|v| v.is_finite()));
        assert!(big[0] >= 1.0 - 1e-300);
        // exp(-1000) underflows to exactly 0 in double precision
        assert_eq!(big[1], 0.0);
    }

    #[test]
    fn combine_and_weights() {
        let fs = Logits([1.0, 0.0, 0.0]);
        assert_eq!(combine_logits(&fs, &Logits([0.0; 3])), Logits([0.0, -1.0, -1.0]));
        assert_eq!(combine_logits(&fs, &Logits([0.0, 1.0, 0.0])), Logits([0.0, 0.0, -1.0]));
        assert_eq!(combine_logits(&Logits([4.0; 3]), &fs), fs);

        let pd = ProbDist::new([0.2, 0.3, 0.5]).unwrap();
        let w = gradient_weights(&ProbDist::uniform(), &pd).unwrap();
        assert!((0..3).all(|k| close(w[k], pd[k], 1e-15)));
        let w = gradient_weights(&ProbDist::one_hot(Label::Neutral), &pd).unwrap();
        assert_eq!(w.values(), [0.0, 0.0, 1.0]);
        let w = gradient_weights(&ProbDist::new([0.5, 0.3, 0.2]).unwrap(), &pd).unwrap();
        for (k, e) in [10.0 / 29.0, 9.0 / 29.0, 10.0 / 29.0].iter().enumerate() {
            assert!(close(w[k], *e, 1e-15));
        }
        let err = gradient_weights(&ProbDist::one_hot(Label::Entailment), &ProbDist::one_hot(Label::Neutral));
        assert!(err.is_err());
    }

    #[test]
    fn losses() {
        let zero = Classifier::zeros(Architecture::linear(2)).unwrap();
        assert!(close(loss_mle(&zero, &[1.0, 1.0], Label::Neutral).unwrap(), 3f64.ln(), 1e-15));
        let x = [0.7, -1.1];
        let clf = init_params(Architecture::linear(2), 3).unwrap();
        let uniform = Logits([0.0; 3]);
        assert_eq!(
            loss_drift(&clf, &x, Label::Contradiction, &uniform).unwrap(),
            loss_mle(&clf, &x, Label::Contradiction).unwrap()
        );
        let solved = loss_drift(&zero, &x, Label::Entailment, &Logits([50.0, 0.0, 0.0])).unwrap();
        assert!(solved < 1e-20);

        let strong = Classifier::new(Architecture::linear(2), vec![40.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
            .unwrap();
        assert!(loss_mle(&strong, &[1.0, 0.0], Label::Entailment).unwrap() < 1e-16);
    }

    #[test]
    fn predict_tie_break() {
        assert_eq!(argmax(&Logits([3.0, 1.0, 1.0])), Label::Entailment);
        assert_eq!(argmax(&Logits([2.0, 2.0, 0.0])), Label::Entailment);
        assert_eq!(argmax(&Logits([0.0, 0.0, 0.0])), Label::Entailment);
        assert_eq!(argmax(&Logits([0.0, 1.0, 1.0])), Label::Contradiction);
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let mlp = init_params(Architecture::mlp(3, 64, 0.5), 9).unwrap();
        let x = [0.5, 0.5, -0.5];
        let eval = forward(&mlp, &x, false, 0).unwrap();
        let a = forward(&mlp, &x, true, 1).unwrap();
        assert_ne!(a, eval);
        assert_eq!(a, forward(&mlp, &x, true, 1).unwrap());
    }
}
