//! Feature extractors over premise/hypothesis pairs.
//!
//! Biased models see insufficient views of the pair (`hypo`, `cbow`, `hand`);
//! debiased models see the full view (`full`). Every extractor is built from
//! sums of embedding rows, so each one also knows how to push a feature
//! gradient back into the rows it read.

use std::collections::HashSet;
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, Vocabulary};
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_DIM: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    dim: usize,
    rows: usize,
    values: Vec<f64>,
    pub trainable: bool,
}

impl EmbeddingTable {
    /// Seeded uniform init in `[-0.5/d, 0.5/d]`.
    pub fn random(rows: usize, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be ≥ 1".into()));
        }
        let bound = 0.5 / dim as f64;
        let mut rng = rng::stream(seed, 0xe3b);
        let values = (0..rows * dim).map(|_| rng.gen_range(-bound..=bound)).collect();
        Ok(EmbeddingTable { dim, rows, values, trainable: true })
    }

    pub fn from_values(rows: usize, dim: usize, values: Vec<f64>, trainable: bool) -> Result<Self> {
        if dim == 0 || values.len() != rows * dim {
            return Err(Error::DimensionMismatch { expected: rows * dim, got: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("embedding values must be finite".into()));
        }
        Ok(EmbeddingTable { dim, rows, values, trainable })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn row(&self, id: usize) -> &[f64] {
        &self.values[id * self.dim..(id + 1) * self.dim]
    }

    pub fn row_mut(&mut self, id: usize) -> &mut [f64] {
        &mut self.values[id * self.dim..(id + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Overwrite rows from a text word-vector file (`word v1 ... vd` per
    /// line). Words missing from the vocabulary are skipped. Returns the
    /// number of rows replaced.
    pub fn load_word_vectors<R: BufRead>(&mut self, reader: R, vocab: &Vocabulary) -> Result<usize> {
        let mut replaced = 0;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            if !vocab.contains(word) {
                continue;
            }
            let vector = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
            if vector.len() != self.dim {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("vector dimension {} does not match table dimension {}", vector.len(), self.dim),
                });
            }
            if vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse { line: i + 1, msg: "non-finite vector entry".into() });
            }
            self.row_mut(vocab.id(word)).copy_from_slice(&vector);
            replaced += 1;
        }
        Ok(replaced)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    /// Hypothesis embedding sum.
    Hypo,
    /// `[e_p; e_h; e_p - e_h; e_p * e_h]`.
    Cbow,
    /// Overlap/non-overlap sums plus Jaccard, negation and length difference.
    Hand,
    /// Same computation as `Cbow`, designated as the debiased model's input.
    Full,
}

impl ExtractorKind {
    pub const ALL: [ExtractorKind; 4] =
        [ExtractorKind::Hypo, ExtractorKind::Cbow, ExtractorKind::Hand, ExtractorKind::Full];

    pub fn id(self) -> &'static str {
        match self {
            ExtractorKind::Hypo => "hypo",
            ExtractorKind::Cbow => "cbow",
            ExtractorKind::Hand => "hand",
            ExtractorKind::Full => "full",
        }
    }

    pub fn output_dim(self, d: usize) -> usize {
        match self {
            ExtractorKind::Hypo => d,
            ExtractorKind::Cbow | ExtractorKind::Full => 4 * d,
            ExtractorKind::Hand => 2 * d + 3,
        }
    }
}

impl fmt::Display for ExtractorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for ExtractorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExtractorKind::ALL
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown extractor `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub extractor: ExtractorKind,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Example pre-resolved against a vocabulary: token ids plus the scalar
/// cues, so training loops do not re-hash strings every epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedExample {
    pub premise: Vec<usize>,
    pub hypothesis: Vec<usize>,
    /// Per hypothesis position: whether that token also occurs in the premise.
    pub overlap: Vec<bool>,
    pub jaccard: f64,
    pub negation: f64,
    pub length_diff: f64,
}

impl EncodedExample {
    pub fn new(ex: &Example, vocab: &Vocabulary) -> Result<Self> {
        let premise_set: HashSet<&str> = ex.premise.iter().map(String::as_str).collect();
        Ok(EncodedExample {
            premise: vocab.encode(&ex.premise),
            hypothesis: vocab.encode(&ex.hypothesis),
            overlap: ex.hypothesis.iter().map(|t| premise_set.contains(t.as_str())).collect(),
            jaccard: jaccard(&ex.premise, &ex.hypothesis)?,
            negation: negation_flag(&ex.hypothesis),
            length_diff: length_diff(ex.premise.len(), ex.hypothesis.len())?,
        })
    }
}

fn sum_rows<'a>(ids: impl IntoIterator<Item = &'a usize>, emb: &EmbeddingTable) -> Vec<f64> {
    let mut acc = vec![0.0; emb.dim()];
    for &id in ids {
        for (a, v) in acc.iter_mut().zip(emb.row(id)) {
            *a += v;
        }
    }
    acc
}

/// Sum of embedding rows; unknown tokens use the unknown row, `[]` gives zeros.
pub fn embed_sum(tokens: &[String], vocab: &Vocabulary, emb: &EmbeddingTable) -> Vec<f64> {
    sum_rows(&vocab.encode(tokens), emb)
}

pub fn jaccard(p_tokens: &[String], h_tokens: &[String]) -> Result<f64> {
    let p: HashSet<&str> = p_tokens.iter().map(String::as_str).collect();
    let h: HashSet<&str> = h_tokens.iter().map(String::as_str).collect();
    let union = p.union(&h).count();
    if union == 0 {
        return Err(Error::InvalidArgument("jaccard of two empty token lists is undefined".into()));
    }
    Ok(p.intersection(&h).count() as f64 / union as f64)
}

/// `|Lp - Lh| / (Lp + Lh)`.
pub fn length_diff(lp: usize, lh: usize) -> Result<f64> {
    if lp + lh == 0 {
        return Err(Error::InvalidArgument("length difference of two empty sentences is undefined".into()));
    }
    Ok(lp.abs_diff(lh) as f64 / (lp + lh) as f64)
}

pub fn negation_flag(h_tokens: &[String]) -> f64 {
    if h_tokens.iter().any(|t| t == "not" || t == "n't") {
        1.0
    } else {
        0.0
    }
}

fn cbow_block(premise: &[usize], hypothesis: &[usize], emb: &EmbeddingTable) -> Vec<f64> {
    let ep = sum_rows(premise, emb);
    let eh = sum_rows(hypothesis, emb);
    let mut out = Vec::with_capacity(4 * emb.dim());
    out.extend_from_slice(&ep);
    out.extend_from_slice(&eh);
    out.extend(ep.iter().zip(&eh).map(|(p, h)| p - h));
    out.extend(ep.iter().zip(&eh).map(|(p, h)| p * h));
    out
}

/// Features of an already-encoded example.
pub fn extract_encoded(kind: ExtractorKind, enc: &EncodedExample, emb: &EmbeddingTable) -> FeatureVector {
    let values = match kind {
        ExtractorKind::Hypo => sum_rows(&enc.hypothesis, emb),
        ExtractorKind::Cbow | ExtractorKind::Full => cbow_block(&enc.premise, &enc.hypothesis, emb),
        ExtractorKind::Hand => {
            let overlap = enc.hypothesis.iter().zip(&enc.overlap).filter(|(_, &o)| o).map(|(id, _)| id);
            let unique = enc.hypothesis.iter().zip(&enc.overlap).filter(|(_, &o)| !o).map(|(id, _)| id);
            let mut out = sum_rows(overlap, emb);
            out.extend(sum_rows(unique, emb));
            out.extend([enc.jaccard, enc.negation, enc.length_diff]);
            out
        }
    };
    FeatureVector { values, extractor: kind }
}

pub fn extract(kind: ExtractorKind, ex: &Example, vocab: &Vocabulary, emb: &EmbeddingTable) -> Result<FeatureVector> {
    Ok(extract_encoded(kind, &EncodedExample::new(ex, vocab)?, emb))
}

pub fn hypo_features(ex: &Example, vocab: &Vocabulary, emb: &EmbeddingTable) -> FeatureVector {
    FeatureVector { values: embed_sum(&ex.hypothesis, vocab, emb), extractor: ExtractorKind::Hypo }
}

pub fn cbow_features(ex: &Example, vocab: &Vocabulary, emb: &EmbeddingTable) -> FeatureVector {
    let values = cbow_block(&vocab.encode(&ex.premise), &vocab.encode(&ex.hypothesis), emb);
    FeatureVector { values, extractor: ExtractorKind::Cbow }
}

pub fn full_features(ex: &Example, vocab: &Vocabulary, emb: &EmbeddingTable) -> FeatureVector {
    FeatureVector { extractor: ExtractorKind::Full, ..cbow_features(ex, vocab, emb) }
}

pub fn hand_features(ex: &Example, vocab: &Vocabulary, emb: &EmbeddingTable) -> Result<FeatureVector> {
    extract(ExtractorKind::Hand, ex, vocab, emb)
}

/// Sparse per-row embedding gradient, accumulated in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RowGradients {
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl RowGradients {
    fn add(&mut self, id: usize, g: &[f64]) {
        match self.rows.iter_mut().find(|(r, _)| *r == id) {
            Some((_, acc)) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
            None => self.rows.push((id, g.to_vec())),
        }
    }

    /// Add `scale * self` into a dense table-shaped buffer.
    pub fn scatter_into(&self, dense: &mut [f64], dim: usize, scale: f64) {
        for (id, g) in &self.rows {
            for (d, v) in dense[id * dim..(id + 1) * dim].iter_mut().zip(g) {
                *d += scale * v;
            }
        }
    }
}

/// Chain rule from a feature-space gradient into the embedding rows that
/// produced the features.
pub fn backprop_encoded(
    kind: ExtractorKind,
    enc: &EncodedExample,
    emb: &EmbeddingTable,
    grad_features: &[f64],
) -> RowGradients {
    let d = emb.dim();
    let mut out = RowGradients::default();
    match kind {
        ExtractorKind::Hypo => {
            for &id in &enc.hypothesis {
                out.add(id, grad_features);
            }
        }
        ExtractorKind::Cbow | ExtractorKind::Full => {
            let ep = sum_rows(&enc.premise, emb);
            let eh = sum_rows(&enc.hypothesis, emb);
            let (g_p, rest) = grad_features.split_at(d);
            let (g_h, rest) = rest.split_at(d);
            let (g_diff, g_prod) = rest.split_at(d);
            let d_ep: Vec<f64> = (0..d).map(|i| g_p[i] + g_diff[i] + g_prod[i] * eh[i]).collect();
            let d_eh: Vec<f64> = (0..d).map(|i| g_h[i] - g_diff[i] + g_prod[i] * ep[i]).collect();
            for &id in &enc.premise {
                out.add(id, &d_ep);
            }
            for &id in &enc.hypothesis {
                out.add(id, &d_eh);
            }
        }
        ExtractorKind::Hand => {
            let (g_overlap, rest) = grad_features.split_at(d);
            let g_unique = &rest[..d];
            for (&id, &o) in enc.hypothesis.iter().zip(&enc.overlap) {
                out.add(id, if o { g_overlap } else { g_unique });
            }
        }
    }
    out
}
