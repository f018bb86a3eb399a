use drift_core::biaslab::{inject_cheat, CheatConfig, CheatMode};
use drift_core::corpus::{
    build_vocab, generate_synthetic_task, parse_jsonl, parse_snli_tsv, split, tokenize, write_jsonl,
    write_snli_tsv, Dataset, Example, Label,
};
use drift_core::evalkit::evaluate_with;
use drift_core::featurize::{EncodedExample, ExtractorKind};
use drift_core::model::{Model, ModelSpec};
use drift_core::netcore::{
    backward, combine_logits, init_params, loss_drift, softmax, Architecture, GradMode, Logits, ProbDist,
};
use drift_core::objectives::{batch_gradient, residual_regularizer};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn label() -> impl Strategy<Value = Label> {
    (0usize..3).prop_map(|i| Label::ALL[i])
}

fn logits(scale: f64) -> impl Strategy<Value = Logits> {
    prop::array::uniform3(-scale..scale).prop_map(Logits)
}

fn antonym(token: &str) -> String {
    let n: usize = token[1..].parse().unwrap();
    format!("w{}", if n % 2 == 1 { n + 1 } else { n - 1 })
}

fn rule_label(ex: &Example) -> Label {
    if ex.hypothesis.iter().all(|h| ex.premise.contains(h)) {
        Label::Entailment
    } else if ex.hypothesis.iter().any(|h| ex.premise.contains(&antonym(h))) {
        Label::Contradiction
    } else {
        Label::Neutral
    }
}

fn cheated(seed: u64, p_cheat: f64) -> Dataset {
    let ds = generate_synthetic_task(60, 24, seed).unwrap();
    inject_cheat(&ds, &CheatConfig { p_cheat, mode: CheatMode::Biased, seed }).unwrap()
}

fn linear_input(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tokenize_is_idempotent(s in "[a-zA-Z' .,!?;:-]{0,60}") {
        let once = tokenize(&s);
        prop_assert_eq!(tokenize(&once.join(" ")), once);
    }

    #[test]
    fn jsonl_roundtrip(seed in 0u64..1000, p in 0.0..1.0f64) {
        let ds = cheated(seed, p);
        let mut buf = Vec::new();
        write_jsonl(&ds, &mut buf).unwrap();
        let back = parse_jsonl(buf.as_slice(), "x").unwrap();
        prop_assert_eq!(back.examples, ds.examples);
    }

    #[test]
    fn tsv_roundtrip(seed in 0u64..1000, p in 0.0..1.0f64, inject in any::<bool>()) {
        let ds = if inject { cheated(seed, p) } else { generate_synthetic_task(60, 24, seed).unwrap() };
        let mut buf = Vec::new();
        write_snli_tsv(&ds, &mut buf).unwrap();
        let back = parse_snli_tsv(buf.as_slice(), "x").unwrap();
        prop_assert_eq!(back.examples, ds.examples);
    }

    #[test]
    fn synthetic_labels_follow_the_token_rule(seed in 0u64..10_000, pairs in 10usize..30) {
        let ds = generate_synthetic_task(90, 2 * pairs, seed).unwrap();
        for ex in ds.iter() {
            prop_assert_eq!(rule_label(ex), ex.label);
        }
        let counts = ds.label_counts();
        prop_assert!(counts.iter().all(|&c| c == 30));
    }

    #[test]
    fn split_partitions_the_input(seed in 0u64..1000, n in 10usize..200) {
        let ds = generate_synthetic_task(n, 20, seed).unwrap();
        let (a, b, c) = split(&ds, (0.8, 0.1, 0.1), seed).unwrap();
        prop_assert_eq!(a.len() + b.len() + c.len(), n);
        let key = |e: &Example| format!("{e:?}");
        let mut union: Vec<String> = a.iter().chain(b.iter()).chain(c.iter()).map(key).collect();
        let mut all: Vec<String> = ds.iter().map(key).collect();
        union.sort();
        all.sort();
        prop_assert_eq!(union, all);
    }

    #[test]
    fn softmax_is_shift_invariant(z in logits(50.0), c in -100.0..100.0f64) {
        let shifted = Logits(z.0.map(|v| v + c));
        let (p, q) = (softmax(&z).values(), softmax(&shifted).values());
        for k in 0..3 {
            prop_assert!((p[k] - q[k]).abs() <= 1e-12);
        }
    }

    #[test]
    fn product_of_experts_identity(fs in logits(20.0), fd in logits(20.0)) {
        let pa = softmax(&combine_logits(&fs, &fd)).values();
        let (ps, pd) = (softmax(&fs).values(), softmax(&fd).values());
        let z: f64 = (0..3).map(|k| ps[k] * pd[k]).sum();
        for k in 0..3 {
            prop_assert!((pa[k] - ps[k] * pd[k] / z).abs() <= 1e-12);
        }
    }

    #[test]
    fn regularizer_is_nonnegative(fs in logits(10.0), fd in logits(10.0)) {
        let r = residual_regularizer(&softmax(&fs), &softmax(&fd)).unwrap();
        prop_assert!(r >= 0.0);
    }

    #[test]
    fn drift_loss_decomposes(seed in 0u64..1000, x in linear_input(4), y in label(), fs in logits(8.0)) {
        let clf = init_params(Architecture::mlp(4, 5, 0.0), seed).unwrap();
        let fd = clf.forward_eval(&x).unwrap();
        let (ps, pd) = (softmax(&fs), softmax(&fd));
        let rhs = -pd[y.index()].ln() - ps[y.index()].ln() - residual_regularizer(&ps, &pd).unwrap();
        prop_assert!((loss_drift(&clf, &x, y, &fs).unwrap() - rhs).abs() <= 1e-9);
    }

    #[test]
    fn uniform_bias_gives_the_mle_gradient(seed in 0u64..1000, x in linear_input(3), y in label(), c in -5.0..5.0f64) {
        let clf = init_params(Architecture::mlp(3, 4, 0.0), seed).unwrap();
        let mle = backward(&clf, &x, y, GradMode::Mle).unwrap();
        let drift = backward(&clf, &x, y, GradMode::Drift(Logits([c; 3]))).unwrap();
        let diff = mle.params.iter().zip(&drift.params).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(diff <= 1e-15, "diff {diff:e}");
    }

    #[test]
    fn confident_bias_cancels_monotonically(seed in 0u64..1000, x in linear_input(3), y in label(), other in logits(2.0)) {
        let clf = init_params(Architecture::linear(3), seed).unwrap();
        let norm = |boost: f64| {
            let mut fs = other;
            fs.0[y.index()] += boost;
            let g = backward(&clf, &x, y, GradMode::Drift(fs)).unwrap();
            g.params.iter().map(|v| v * v).sum::<f64>().sqrt()
        };
        let mut prev = norm(0.0);
        for step in 1..=12 {
            let cur = norm(step as f64 * 2.5);
            prop_assert!(cur <= prev + 1e-15, "{cur} > {prev}");
            prev = cur;
        }
        prop_assert!(prev <= 1e-9);
    }

    #[test]
    fn batch_gradient_is_the_mean(seed in 0u64..500, bias in logits(3.0), drift in any::<bool>()) {
        let ds = generate_synthetic_task(12, 20, seed).unwrap();
        let vocab = build_vocab(&ds, 1).unwrap();
        let model = Model::new(ModelSpec::mlp(ExtractorKind::Full, 4, 6), vocab.len(), seed).unwrap();
        let mode = if drift { GradMode::Drift(bias) } else { GradMode::Mle };
        let enc: Vec<EncodedExample> = ds.iter().map(|e| EncodedExample::new(e, &vocab).unwrap()).collect();
        let items: Vec<_> = enc.iter().zip(ds.iter()).map(|(e, ex)| (e, ex.label, mode)).collect();
        let batch = batch_gradient(&model, &items, None).unwrap();

        let mut params = vec![0.0; batch.params.len()];
        let mut emb = vec![0.0; batch.embedding.len()];
        for &(e, y, m) in &items {
            let g = model.gradient(e, y, m, None).unwrap();
            params.iter_mut().zip(&g.params).for_each(|(a, v)| *a += v / items.len() as f64);
            g.rows.scatter_into(&mut emb, 4, 1.0 / items.len() as f64);
        }
        for (a, b) in batch.params.iter().zip(&params).chain(batch.embedding.iter().zip(&emb)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn injection_preserves_content(seed in 0u64..1000, p in 0.0..=1.0f64, biased in any::<bool>()) {
        let ds = generate_synthetic_task(45, 20, seed).unwrap();
        let mode = if biased { CheatMode::Biased } else { CheatMode::Random };
        let out = inject_cheat(&ds, &CheatConfig { p_cheat: p, mode, seed }).unwrap();
        for (a, b) in ds.iter().zip(out.iter()) {
            let cheat = b.cheat_token.unwrap();
            prop_assert_eq!(&b.hypothesis[0], cheat.word());
            prop_assert_eq!(b.hypothesis[1].as_str(), "and");
            prop_assert_eq!(&b.hypothesis[2..], &a.hypothesis[..]);
            prop_assert_eq!((&b.premise, b.label), (&a.premise, a.label));
            if b.cheat_from_gold {
                prop_assert!(biased);
                prop_assert_eq!(cheat, b.label);
            }
        }
    }

    #[test]
    fn random_mode_ignores_the_rate(seed in 0u64..1000, p in 0.0..=1.0f64, q in 0.0..=1.0f64) {
        let ds = generate_synthetic_task(30, 20, seed).unwrap();
        let run = |p_cheat| inject_cheat(&ds, &CheatConfig { p_cheat, mode: CheatMode::Random, seed }).unwrap();
        prop_assert_eq!(run(p).examples, run(q).examples);
    }

    #[test]
    fn evaluation_ignores_order(seed in 0u64..1000) {
        let ds = generate_synthetic_task(60, 20, seed).unwrap();
        let mut shuffled = ds.clone();
        shuffled.examples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let predictor = |ex: &Example| Ok(Label::ALL[ex.premise[0].len() % 3]);
        let a = evaluate_with(&ds, "m", predictor).unwrap();
        let b = evaluate_with(&shuffled, "m", predictor).unwrap();
        prop_assert_eq!(a.confusion, b.confusion);
        prop_assert_eq!(a.f1, b.f1);
        prop_assert_eq!(a.accuracy, b.accuracy);
    }
}

#[test]
fn cheat_rates_are_statistically_right() {
    let ds = generate_synthetic_task(9000, 20, 11).unwrap();
    let match_rate = |mode, p_cheat| {
        let out = inject_cheat(&ds, &CheatConfig { p_cheat, mode, seed: 5 }).unwrap();
        out.iter().filter(|e| e.cheat_token == Some(e.label)).count() as f64 / out.len() as f64
    };
    assert!((match_rate(CheatMode::Random, 0.9) - 1.0 / 3.0).abs() <= 0.02);
    assert!((match_rate(CheatMode::Biased, 0.0) - 1.0 / 3.0).abs() <= 0.02);
    // gold copies plus chance agreement on the rest
    assert!((match_rate(CheatMode::Biased, 0.6) - (0.6 + 0.4 / 3.0)).abs() <= 0.02);

    let out = inject_cheat(&ds, &CheatConfig { p_cheat: 0.0, mode: CheatMode::Biased, seed: 5 }).unwrap();
    let mut counts = [0usize; 3];
    out.iter().for_each(|e| counts[e.cheat_token.unwrap().index()] += 1);
    assert!(counts.iter().all(|&c| (c as f64 / 9000.0 - 1.0 / 3.0).abs() <= 0.02), "{counts:?}");
}

#[test]
fn prob_dist_rejects_non_distributions() {
    assert!(ProbDist::new([0.5, 0.5, 0.5]).is_err());
    assert!(ProbDist::new([1.2, -0.1, -0.1]).is_err());
    assert!(ProbDist::new([0.2, 0.3, 0.5]).is_ok());
}
