//! Data model, tokenization and dataset ingestion.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

pub const NUM_CLASSES: usize = 3;

/// Three-way inference label. The integer codes are used for confusion
/// matrix rows/columns and one-hot targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Entailment = 0,
    Contradiction = 1,
    Neutral = 2,
}

impl Label {
    pub const ALL: [Label; NUM_CLASSES] = [Label::Entailment, Label::Contradiction, Label::Neutral];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    /// The label name, also used as the injected cheat token.
    pub fn word(self) -> &'static str {
        match self {
            Label::Entailment => "entailment",
            Label::Contradiction => "contradiction",
            Label::Neutral => "neutral",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entailment" => Ok(Label::Entailment),
            "contradiction" => Ok(Label::Contradiction),
            "neutral" => Ok(Label::Neutral),
            other => Err(Error::UnknownLabel(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub premise: Vec<String>,
    pub hypothesis: Vec<String>,
    pub label: Label,
    /// Label word prepended by the bias injector, if the example went through it.
    pub cheat_token: Option<Label>,
    /// Set when the injector copied the gold label rather than drawing a
    /// random one. A random draw can still coincide with the gold label.
    #[serde(default)]
    pub cheat_from_gold: bool,
}

impl Example {
    pub fn new(premise: Vec<String>, hypothesis: Vec<String>, label: Label) -> Self {
        Example { premise, hypothesis, label, cheat_token: None, cheat_from_gold: false }
    }

    /// Build from raw sentences; fails if either side tokenizes to nothing.
    pub fn from_text(premise: &str, hypothesis: &str, label: Label) -> std::result::Result<Self, String> {
        let premise = tokenize(premise);
        let hypothesis = tokenize(hypothesis);
        if premise.is_empty() {
            return Err("empty premise".into());
        }
        if hypothesis.is_empty() {
            return Err("empty hypothesis".into());
        }
        Ok(Example::new(premise, hypothesis, label))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, examples: Vec<Example>) -> Self {
        Dataset { name: name.into(), examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Example> {
        self.examples.iter()
    }

    pub fn label_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for ex in &self.examples {
            counts[ex.label.index()] += 1;
        }
        counts
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// Lowercase, split on whitespace, split punctuation into single-character
/// tokens, and split the `n't` contraction suffix into its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let mut out = Vec::new();
    for chunk in lowered.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut word = String::new();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if is_word_char(c) {
                word.push(c);
                i += 1;
                continue;
            }
            let negation = c == '\''
                && word.ends_with('n')
                && chars.get(i + 1) == Some(&'t')
                && !chars.get(i + 2).is_some_and(|&c| is_word_char(c));
            if negation {
                word.pop();
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push("n't".to_string());
                i += 2;
                continue;
            }
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            out.push(c.to_string());
            i += 1;
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

fn parse_flag(line_no: usize, s: &str) -> Result<Option<bool>> {
    match s.trim() {
        "" => Ok(None),
        "1" | "true" => Ok(Some(true)),
        "0" | "false" => Ok(Some(false)),
        other => Err(Error::Parse { line: line_no, msg: format!("bad cheat_from_gold value `{other}`") }),
    }
}

fn parse_row(
    line_no: usize,
    gold: &str,
    s1: &str,
    s2: &str,
    cheat: Option<&str>,
    from_gold: Option<bool>,
) -> Result<Option<Example>> {
    let gold = gold.trim();
    if gold == "-" {
        return Ok(None);
    }
    let label: Label = gold.parse()?;
    let mut ex = Example::from_text(s1, s2, label).map_err(|msg| Error::Parse { line: line_no, msg })?;
    if let Some(c) = cheat.map(str::trim).filter(|c| !c.is_empty()) {
        let c: Label = c.parse()?;
        ex.cheat_token = Some(c);
        // Files without the flag column fall back to comparing labels.
        ex.cheat_from_gold = from_gold.unwrap_or(c == label);
    }
    Ok(Some(ex))
}

/// Parse the SNLI/MNLI tab-separated distribution format. Rows whose gold
/// label is `-` are skipped. Optional `cheat_label` and
/// `cheat_from_gold` columns are recognized.
pub fn parse_snli_tsv<R: BufRead>(reader: R, name: &str) -> Result<Dataset> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => return Ok(Dataset::new(name, Vec::new())),
    };
    let columns: Vec<&str> = header.split('\t').map(str::trim).collect();
    let find = |col: &str| columns.iter().position(|c| *c == col);
    let missing = |col: &str| Error::Parse { line: 1, msg: format!("header lacks column `{col}`") };
    let gold_col = find("gold_label").ok_or_else(|| missing("gold_label"))?;
    let s1_col = find("sentence1").ok_or_else(|| missing("sentence1"))?;
    let s2_col = find("sentence2").ok_or_else(|| missing("sentence2"))?;
    let cheat_col = find("cheat_label");
    let flag_col = find("cheat_from_gold");
    let needed = gold_col.max(s1_col).max(s2_col) + 1;

    let mut examples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < needed {
            return Err(Error::Parse { line: line_no, msg: format!("expected ≥{needed} columns") });
        }
        let cheat = cheat_col.and_then(|c| fields.get(c).copied());
        let flag = match flag_col.and_then(|c| fields.get(c)) {
            Some(f) => parse_flag(line_no, f)?,
            None => None,
        };
        if let Some(ex) = parse_row(line_no, fields[gold_col], fields[s1_col], fields[s2_col], cheat, flag)? {
            examples.push(ex);
        }
    }
    Ok(Dataset::new(name, examples))
}

#[derive(Serialize, Deserialize)]
struct JsonRow {
    gold_label: String,
    sentence1: String,
    sentence2: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cheat_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cheat_from_gold: Option<bool>,
}

/// Parse one JSON object per line with `gold_label`, `sentence1`, `sentence2`.
pub fn parse_jsonl<R: BufRead>(reader: R, name: &str) -> Result<Dataset> {
    let mut examples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonRow =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        if let Some(ex) =
            parse_row(line_no, &row.gold_label, &row.sentence1, &row.sentence2, row.cheat_label.as_deref(), row.cheat_from_gold)?
        {
            examples.push(ex);
        }
    }
    Ok(Dataset::new(name, examples))
}

pub fn write_jsonl<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    for ex in &dataset.examples {
        let row = JsonRow {
            gold_label: ex.label.word().to_string(),
            sentence1: ex.premise.join(" "),
            sentence2: ex.hypothesis.join(" "),
            cheat_label: ex.cheat_token.map(|l| l.word().to_string()),
            cheat_from_gold: ex.cheat_token.map(|_| ex.cheat_from_gold),
        };
        serde_json::to_writer(&mut out, &row).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_snli_tsv<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    writeln!(out, "gold_label\tsentence1\tsentence2\tcheat_label\tcheat_from_gold")?;
    for ex in &dataset.examples {
        let cheat = ex.cheat_token.map(Label::word).unwrap_or("");
        let flag = match ex.cheat_token {
            Some(_) => if ex.cheat_from_gold { "1" } else { "0" },
            None => "",
        };
        writeln!(out, "{}\t{}\t{}\t{}\t{}", ex.label, ex.premise.join(" "), ex.hypothesis.join(" "), cheat, flag)?;
    }
    Ok(())
}

pub const UNK: &str = "<unk>";
pub const CONNECTOR: &str = "and";

/// Token/id bijection. Id 0 is the unknown token, ids 1..=4 are the three
/// label words and the connector `and`, then counted tokens by descending
/// count with lexicographic tie-break.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    pub const UNK_ID: usize = 0;

    fn specials() -> impl Iterator<Item = &'static str> {
        std::iter::once(UNK).chain(Label::ALL.iter().map(|l| l.word())).chain(std::iter::once(CONNECTOR))
    }

    /// Build from an explicit id-ordered token list (as written by [`Vocabulary::write`]).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in Self::specials().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(s) {
                return Err(Error::InvalidArgument(format!("vocabulary id {i} must be `{s}`")));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or [`Vocabulary::UNK_ID`] when unknown.
    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Short content hash identifying the id assignment.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.tokens {
            hasher.update(t.as_bytes());
            hasher.update(b"\n");
        }
        hasher.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        for t in &self.tokens {
            writeln!(out, "{t}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let tokens = reader.lines().collect::<std::io::Result<Vec<_>>>()?;
        Self::from_tokens(tokens)
    }
}

pub fn build_vocab(dataset: &Dataset, min_count: usize) -> Result<Vocabulary> {
    if min_count == 0 {
        return Err(Error::InvalidArgument("min_count must be ≥ 1".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for ex in &dataset.examples {
        for t in ex.premise.iter().chain(&ex.hypothesis) {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let specials: BTreeSet<&str> = Vocabulary::specials().collect();
    let mut kept: Vec<(&str, usize)> =
        counts.into_iter().filter(|(t, c)| *c >= min_count && !specials.contains(t)).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let tokens = Vocabulary::specials().map(str::to_string).chain(kept.into_iter().map(|(t, _)| t.to_string())).collect();
    Vocabulary::from_tokens(tokens)
}

fn synthetic_word(index: usize) -> String {
    format!("w{}", index + 1)
}

/// Content-word count used when a configuration does not name one.
pub const DEFAULT_SYNTHETIC_VOCAB: usize = 20;

/// Generate a balanced pair task whose label is decidable from tokens.
///
/// Content words `w1..wV` form antonym pairs `(w1,w2), (w3,w4), ...`. A
/// premise holds six words from six distinct pairs. Entailment hypotheses
/// are three premise words, contradictions swap one of three premise words
/// for its antonym, and neutral hypotheses add a word from an unused pair.
pub fn generate_synthetic_task(n: usize, vocab_size: usize, seed: u64) -> Result<Dataset> {
    const PREMISE_LEN: usize = 6;
    if n < 3 {
        return Err(Error::InvalidArgument(format!("synthetic task needs n ≥ 3, got {n}")));
    }
    if vocab_size % 2 != 0 || vocab_size < 20 {
        return Err(Error::InvalidArgument(format!(
            "vocab_size must be even and ≥ 20 to sample a fresh non-antonym token, got {vocab_size}"
        )));
    }
    let pairs = vocab_size / 2;
    let mut rng = rng::stream(seed, 0x5e_7a5c);

    let mut labels: Vec<Label> = (0..n).map(|i| Label::ALL[i % NUM_CLASSES]).collect();
    labels.shuffle(&mut rng);

    let pair_ids: Vec<usize> = (0..pairs).collect();
    let mut examples = Vec::with_capacity(n);
    for label in labels {
        let chosen: Vec<usize> = pair_ids.choose_multiple(&mut rng, PREMISE_LEN + 1).copied().collect();
        let (premise_pairs, fresh_pair) = (&chosen[..PREMISE_LEN], chosen[PREMISE_LEN]);
        let premise: Vec<usize> = premise_pairs.iter().map(|&p| 2 * p + rng.gen_range(0..2)).collect();

        let picks: Vec<usize> = premise.choose_multiple(&mut rng, 3).copied().collect();
        let mut hypothesis = match label {
            Label::Entailment => picks,
            Label::Contradiction => vec![picks[0], picks[1], picks[2] ^ 1],
            Label::Neutral => vec![picks[0], picks[1], 2 * fresh_pair + rng.gen_range(0..2)],
        };
        hypothesis.shuffle(&mut rng);

        examples.push(Example::new(
            premise.into_iter().map(synthetic_word).collect(),
            hypothesis.into_iter().map(synthetic_word).collect(),
            label,
        ));
    }
    Ok(Dataset::new(format!("synthetic-n{n}-v{vocab_size}-s{seed}"), examples))
}

/// Seeded shuffle then contiguous train/dev/test slicing. Dev and test
/// sizes are floored, the remainder goes to train.
pub fn split(dataset: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let (ft, fd, fs) = fractions;
    if [ft, fd, fs].iter().any(|f| !f.is_finite() || *f < 0.0) || ((ft + fd + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions must be non-negative and sum to 1, got ({ft}, {fd}, {fs})"
        )));
    }
    let n = dataset.len();
    let floor = |f: f64| ((n as f64) * f + 1e-9).floor() as usize;
    let (n_dev, n_test) = (floor(fd), floor(fs));
    let n_train = n.saturating_sub(n_dev + n_test);
    for (size, name) in [(n_train, "train"), (n_dev, "dev"), (n_test, "test")] {
        if size == 0 {
            return Err(Error::EmptySplit(name));
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, 0x5917));
    let take = |range: std::ops::Range<usize>, suffix: &str| {
        Dataset::new(
            format!("{}/{suffix}", dataset.name),
            order[range].iter().map(|&i| dataset.examples[i].clone()).collect(),
        )
    };
    Ok((
        take(0..n_train, "train"),
        take(n_train..n_train + n_dev, "dev"),
        take(n_train + n_dev..n, "test"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("The dog runs."), toks(&["the", "dog", "runs", "."]));
        assert_eq!(tokenize("I don't know"), toks(&["i", "do", "n't", "know"]));
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("n't"), toks(&["n't"]));
        assert_eq!(tokenize("dog's, (big)"), toks(&["dog", "'", "s", ",", "(", "big", ")"]));
        assert_eq!(tokenize("CAN'T!"), toks(&["ca", "n't", "!"]));
    }

    #[test]
    fn label_roundtrip_and_errors() {
        for l in Label::ALL {
            assert_eq!(l.word().parse::<Label>().unwrap(), l);
            assert_eq!(Label::from_index(l.index()), Some(l));
        }
        assert!(matches!("maybe".parse::<Label>(), Err(Error::UnknownLabel(v)) if v == "maybe"));
    }

    #[test]
    fn tsv_parsing() {
        let text = "gold_label\tsentence1\tsentence2\textra\n\
                    entailment\tA man runs.\tA person moves.\tx\n\
                    -\tA b.\tC d.\tx\n";
        let ds = parse_snli_tsv(text.as_bytes(), "t").unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.examples[0].label, Label::Entailment);
        assert_eq!(ds.examples[0].premise, toks(&["a", "man", "runs", "."]));

        let bad = "gold_label\tsentence1\tsentence2\nentailment\ta\tb\nneutral\tonly\n";
        let err = parse_snli_tsv(bad.as_bytes(), "t").unwrap_err();
        assert_eq!(err.to_string(), "line 3: expected ≥3 columns");

        let unknown = "gold_label\tsentence1\tsentence2\nmaybe\ta\tb\n";
        let err = parse_snli_tsv(unknown.as_bytes(), "t").unwrap_err();
        assert!(err.to_string().contains("maybe"));
    }

    #[test]
    fn jsonl_parsing() {
        let ok = r#"{"gold_label":"neutral","sentence1":"A b.","sentence2":"C d."}"#;
        assert_eq!(parse_jsonl(ok.as_bytes(), "j").unwrap().len(), 1);
        let dash = r#"{"gold_label":"-","sentence1":"A b.","sentence2":"C d."}"#;
        assert_eq!(parse_jsonl(dash.as_bytes(), "j").unwrap().len(), 0);
        let bad = format!("{ok}\n{{not json\n");
        let err = parse_jsonl(bad.as_bytes(), "j").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn empty_sentence_is_rejected() {
        let text = "gold_label\tsentence1\tsentence2\nneutral\t \tb\n";
        assert!(matches!(parse_snli_tsv(text.as_bytes(), "t"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn vocab_threshold_and_ties() {
        let ex = |p: &[&str], h: &[&str]| Example::new(toks(p), toks(h), Label::Neutral);
        let ds = Dataset::new(
            "v",
            vec![ex(&["dog", "cat", "bee"], &["dog"]), ex(&["dog", "cat", "bee", "ant"], &["zebra"])],
        );
        let v = build_vocab(&ds, 5).unwrap();
        assert_eq!(v.id("dog"), Vocabulary::UNK_ID);
        assert_eq!(v.len(), 5);

        let v = build_vocab(&ds, 1).unwrap();
        assert_eq!(v.token(0), Some(UNK));
        assert_eq!(v.id("entailment"), 1);
        assert_eq!(v.id("and"), 4);
        // dog: 3, then bee/cat tie at 2, then ant/zebra tie at 1
        assert_eq!(v.tokens()[5..], toks(&["dog", "bee", "cat", "ant", "zebra"]));
        assert!(build_vocab(&ds, 0).is_err());

        let mut buf = Vec::new();
        v.write(&mut buf).unwrap();
        let back = Vocabulary::read(buf.as_slice()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
    }

    #[test]
    fn synthetic_balance_and_determinism() {
        let ds = generate_synthetic_task(300, 40, 7).unwrap();
        let counts = ds.label_counts();
        assert!(counts.iter().all(|&c| (99..=101).contains(&c)), "{counts:?}");
        assert_eq!(ds, generate_synthetic_task(300, 40, 7).unwrap());
        for ex in ds.iter().filter(|e| e.label == Label::Entailment) {
            assert!(ex.hypothesis.iter().all(|t| ex.premise.contains(t)));
        }
        assert!(generate_synthetic_task(300, 18, 7).is_err());
        assert!(generate_synthetic_task(300, 41, 7).is_err());
        assert!(generate_synthetic_task(2, 40, 7).is_err());
    }

    #[test]
    fn split_sizes_and_errors() {
        let ds = generate_synthetic_task(10, 20, 1).unwrap();
        let (tr, dv, te) = split(&ds, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!((tr.len(), dv.len(), te.len()), (8, 1, 1));
        assert_eq!(split(&ds, (0.8, 0.1, 0.1), 3).unwrap(), (tr, dv, te));
        let err = split(&ds, (1.0, 0.0, 0.0), 3).unwrap_err();
        assert_eq!(err.to_string(), "empty split: dev");
        assert!(split(&ds, (0.5, 0.1, 0.1), 3).is_err());
    }
}
