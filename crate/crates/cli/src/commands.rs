use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use drift_core::biaslab::{cheat_sweep, inject_cheat, stress_transform, CheatConfig, CheatMode, StressKind};
use drift_core::checkpoint::Checkpoint;
use drift_core::corpus::{
    build_vocab, generate_synthetic_task, parse_jsonl, parse_snli_tsv, split, write_jsonl, Dataset, Vocabulary,
};
use drift_core::evalkit::{bias_audit, evaluate};
use drift_core::featurize::ExtractorKind;
use drift_core::model::Model;
use drift_core::objectives::{train_drift, train_mle, train_remove, BiasSource, Objective};

use crate::config::{BiasedKind, DataFormat, RunConfig};
use crate::output::OutDir;
use crate::UsageError;

pub struct Splits {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
    pub vocab: Vocabulary,
}

const PREPARED: [&str; 3] = ["train.jsonl", "dev.jsonl", "test.jsonl"];
const VOCAB_FILE: &str = "vocab.txt";

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn load_prepared(dir: &Path, min_count: usize) -> Result<Splits> {
    let mut sets = Vec::with_capacity(3);
    for name in PREPARED {
        let path = dir.join(name);
        let stem = name.trim_end_matches(".jsonl");
        sets.push(parse_jsonl(open(&path)?, stem).with_context(|| format!("reading {}", path.display()))?);
    }
    let test = sets.pop().unwrap();
    let dev = sets.pop().unwrap();
    let train = sets.pop().unwrap();
    let vocab_path = dir.join(VOCAB_FILE);
    let vocab = if vocab_path.exists() { Vocabulary::read(open(&vocab_path)?)? } else { build_vocab(&train, min_count)? };
    Ok(Splits { train, dev, test, vocab })
}

/// A directory written by `prepare`, or a source to generate or parse and split.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let d = &cfg.data;
    if let Some(dir) = d.path.as_deref().filter(|p| p.is_dir()) {
        return load_prepared(dir, d.min_count);
    }
    let full = match d.format {
        DataFormat::Synthetic => generate_synthetic_task(d.n, d.vocab_size, cfg.seed)?,
        DataFormat::Tsv | DataFormat::Jsonl => {
            let path = d.path.as_deref().context("no data path")?;
            let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let parsed = if d.format == DataFormat::Tsv {
                parse_snli_tsv(open(path)?, &name)
            } else {
                parse_jsonl(open(path)?, &name)
            };
            parsed.with_context(|| format!("reading {}", path.display()))?
        }
    };
    let [a, b, c] = d.fractions;
    let (train, dev, test) = split(&full, (a, b, c), cfg.seed)?;
    let vocab = build_vocab(&train, d.min_count)?;
    Ok(Splits { train, dev, test, vocab })
}

pub fn prepare(cfg: &RunConfig) -> Result<()> {
    let mut s = load_splits(cfg)?;
    if let Some(cheat) = cfg.cheat_config() {
        s.train = inject_cheat(&s.train, &cheat)?;
        s.dev = inject_cheat(&s.dev, &CheatConfig { seed: cheat.seed.wrapping_add(1), ..cheat })?;
        let test_cheat = CheatConfig { mode: CheatMode::Random, seed: cheat.seed.wrapping_add(2), ..cheat };
        s.test = inject_cheat(&s.test, &test_cheat)?;
    }
    let mut out = OutDir::create(&cfg.out_dir)?;
    for (name, ds) in PREPARED.iter().zip([&s.train, &s.dev, &s.test]) {
        out.write(name, |w| Ok(write_jsonl(ds, w)?))?;
        println!("{:<6} {}", name.trim_end_matches(".jsonl"), ds.len());
    }
    out.write(VOCAB_FILE, |w| Ok(s.vocab.write(w)?))?;
    println!("vocab  {} (hash {})", s.vocab.len(), s.vocab.hash());
    out.finish("prepare", cfg)
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::read(open(path)?).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Fail fast on a DRiFt or Remove run that names no biased model.
pub fn check_biased(cfg: &RunConfig) -> Result<()> {
    if cfg.train.objective == Objective::Mle {
        return Ok(());
    }
    match (cfg.biased.kind, &cfg.biased.checkpoint) {
        (Some(BiasedKind::Oracle), _) => Ok(()),
        (_, None) => Err(UsageError(format!(
            "objective {} needs --biased-checkpoint (or --biased oracle)",
            cfg.train.objective
        ))
        .into()),
        (_, Some(p)) if !p.exists() => {
            Err(UsageError(format!("biased checkpoint {} does not exist", p.display())).into())
        }
        _ => Ok(()),
    }
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    check_biased(cfg)?;
    let biased_ckpt = match (&cfg.biased.checkpoint, cfg.biased.kind) {
        (_, Some(BiasedKind::Oracle)) | (None, _) => None,
        (Some(path), kind) => {
            let ckpt = read_checkpoint(path)?;
            if let Some(want) = kind.and_then(BiasedKind::extractor) {
                if want != ckpt.extractor_id {
                    return Err(UsageError(format!(
                        "--biased {want} but checkpoint {} uses extractor {}",
                        path.display(),
                        ckpt.extractor_id
                    ))
                    .into());
                }
            }
            Some(ckpt)
        }
    };

    let s = load_splits(cfg)?;
    let plan = cfg.train_plan();
    let mut model = Model::new(cfg.model.spec(), s.vocab.len(), cfg.seed)?;
    if let Some(path) = &cfg.model.word_vectors {
        let n = model.embedding.load_word_vectors(open(path)?, &s.vocab)?;
        println!("loaded {n} word vectors");
    }
    let biased_model = biased_ckpt.map(|c| c.into_model(&s.vocab)).transpose()?;
    let source = match &biased_model {
        Some(m) => Some(BiasSource::Model(m)),
        None if plan.objective != Objective::Mle => Some(BiasSource::Oracle),
        None => None,
    };
    let dev = Some(&s.dev);
    let (model, history) = match (plan.objective, source) {
        (Objective::Drift, Some(src)) => train_drift(&src, model, &s.train, dev, &s.vocab, &plan)?,
        (Objective::Remove, Some(src)) => train_remove(&src, model, &s.train, dev, &s.vocab, &plan)?,
        _ => train_mle(model, &s.train, dev, &s.vocab, &plan)?,
    };

    let dev_report = evaluate(&model, &s.dev, &s.vocab)?;
    let mut out = OutDir::create(&cfg.out_dir)?;
    let ckpt_path = out.write("model.json", |w| Ok(Checkpoint::new(&model, &s.vocab).write(w)?))?;
    out.write("history.csv", |w| Ok(history.write_csv(w)?))?;
    println!("objective {}  extractor {}  epochs {}", plan.objective, model.extractor, plan.epochs);
    println!("dev accuracy: {:.1}", 100.0 * dev_report.accuracy);
    println!("checkpoint: {}", ckpt_path.display());
    out.finish("train", cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub extractor: Option<ExtractorKind>,
    pub split: SplitName,
    pub stress: Option<StressKind>,
    pub dump_examples: Option<usize>,
}

pub fn eval(cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    if !args.checkpoint.exists() {
        return Err(UsageError(format!("checkpoint {} does not exist", args.checkpoint.display())).into());
    }
    let ckpt = read_checkpoint(&args.checkpoint)?;
    if let Some(want) = args.extractor {
        if want != ckpt.extractor_id {
            return Err(UsageError(format!(
                "--extractor {want} but checkpoint {} uses extractor {}",
                args.checkpoint.display(),
                ckpt.extractor_id
            ))
            .into());
        }
    }
    let s = load_splits(cfg)?;
    let model = ckpt.into_model(&s.vocab)?;
    let mut ds = match args.split {
        SplitName::Train => s.train,
        SplitName::Dev => s.dev,
        SplitName::Test => s.test,
    };
    if let Some(kind) = args.stress {
        ds = stress_transform(&ds, kind);
    }
    if let Some(n) = args.dump_examples {
        let stdout = std::io::stdout();
        let mut lock = stdout.lock();
        for ex in ds.iter().take(n) {
            writeln!(lock, "{}\t{}\t{}", ex.label, ex.premise.join(" "), ex.hypothesis.join(" "))?;
        }
    }
    let report = evaluate(&model, &ds, &s.vocab)?;
    print!("{}", report.to_table());
    let mut out = OutDir::create(&cfg.out_dir)?;
    out.write("eval.csv", |w| Ok(report.write_csv(w)?))?;
    out.finish("eval", cfg)
}

pub fn sweep(cfg: &RunConfig) -> Result<()> {
    let s = load_splits(cfg)?;
    let scfg = cfg.sweep_config();
    let result = cheat_sweep(&s.train, &s.dev, &s.test, &s.vocab, &scfg)?;
    println!("{:>5}  {:<14} {:>6} {:>6} {:>7}", "rate", "method", "test", "dev", "biased");
    for r in &result.rows {
        println!(
            "{:>5}  {:<14} {:>6.1} {:>6.1} {:>7.1}",
            r.rate,
            r.method.name(),
            100.0 * r.test_accuracy,
            100.0 * r.dev_accuracy,
            100.0 * r.biased_test_accuracy
        );
    }
    for &m in &scfg.methods {
        if let Some(drop) = result.drop_points(m) {
            println!("{} drop: {:.1}", m.name(), drop);
        }
    }
    let mut out = OutDir::create(&cfg.out_dir)?;
    out.write("sweep.csv", |w| Ok(result.write_csv(w)?))?;
    out.finish("sweep", cfg)
}

pub fn audit(cfg: &RunConfig) -> Result<()> {
    let s = load_splits(cfg)?;
    let table = bias_audit(&s.train, &s.dev, Some(&s.test), &s.vocab, &cfg.audit_config())?;
    print!("{}", table.to_table());
    let mut out = OutDir::create(&cfg.out_dir)?;
    out.write("audit.csv", |w| Ok(table.write_csv(w)?))?;
    out.finish("audit", cfg)
}
