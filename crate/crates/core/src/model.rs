//! A classifier bundled with the extractor and embedding table that feed it.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, Label, Vocabulary};
use crate::error::{Error, Result};
use crate::featurize::{backprop_encoded, extract_encoded, EmbeddingTable, EncodedExample, ExtractorKind, RowGradients};
use crate::netcore::{init_params, ArchKind, Architecture, Classifier, GradMode, Logits};

/// Hidden width used when a configuration does not name one.
pub const DEFAULT_HIDDEN: usize = 100;

/// Shape of a model before initialization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub extractor: ExtractorKind,
    pub embedding_dim: usize,
    /// `None` for a linear classifier.
    pub hidden_dim: Option<usize>,
    pub dropout_rate: f64,
    pub trainable_embeddings: bool,
}

impl ModelSpec {
    pub fn mlp(extractor: ExtractorKind, embedding_dim: usize, hidden_dim: usize) -> Self {
        ModelSpec {
            extractor,
            embedding_dim,
            hidden_dim: Some(hidden_dim),
            dropout_rate: crate::netcore::DEFAULT_DROPOUT,
            trainable_embeddings: true,
        }
    }

    pub fn linear(extractor: ExtractorKind, embedding_dim: usize) -> Self {
        ModelSpec { extractor, embedding_dim, hidden_dim: None, dropout_rate: 0.0, trainable_embeddings: true }
    }

    pub fn architecture(&self) -> Architecture {
        let input_dim = self.extractor.output_dim(self.embedding_dim);
        match self.hidden_dim {
            Some(h) => Architecture::mlp(input_dim, h, self.dropout_rate),
            None => Architecture { kind: ArchKind::Linear, input_dim, dropout_rate: self.dropout_rate },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub extractor: ExtractorKind,
    pub embedding: EmbeddingTable,
    pub classifier: Classifier,
}

/// Per-example gradient of a model: classifier parameters plus embedding rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradient {
    pub params: Vec<f64>,
    pub rows: RowGradients,
    pub loss: f64,
}

impl Model {
    pub fn new(spec: ModelSpec, vocab_len: usize, seed: u64) -> Result<Self> {
        let mut embedding = EmbeddingTable::random(vocab_len, spec.embedding_dim, seed)?;
        embedding.trainable = spec.trainable_embeddings;
        let classifier = init_params(spec.architecture(), seed)?;
        Ok(Model { extractor: spec.extractor, embedding, classifier })
    }

    pub fn from_parts(extractor: ExtractorKind, embedding: EmbeddingTable, classifier: Classifier) -> Result<Self> {
        let expected = extractor.output_dim(embedding.dim());
        if classifier.arch.input_dim != expected {
            return Err(Error::DimensionMismatch { expected, got: classifier.arch.input_dim });
        }
        Ok(Model { extractor, embedding, classifier })
    }

    pub fn features(&self, enc: &EncodedExample) -> Vec<f64> {
        extract_encoded(self.extractor, enc, &self.embedding).values
    }

    pub fn logits(&self, enc: &EncodedExample) -> Result<Logits> {
        self.classifier.forward_eval(&self.features(enc))
    }

    pub fn logits_for(&self, ex: &Example, vocab: &Vocabulary) -> Result<Logits> {
        self.check_vocab(vocab)?;
        self.logits(&EncodedExample::new(ex, vocab)?)
    }

    pub fn predict(&self, ex: &Example, vocab: &Vocabulary) -> Result<Label> {
        Ok(crate::netcore::argmax(&self.logits_for(ex, vocab)?))
    }

    fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        if vocab.len() != self.embedding.rows() {
            return Err(Error::DimensionMismatch { expected: self.embedding.rows(), got: vocab.len() });
        }
        Ok(())
    }

    /// Per-example loss of the selected objective, eval mode.
    pub fn loss(&self, enc: &EncodedExample, y: Label, mode: GradMode) -> Result<f64> {
        let z = self.logits(enc)?;
        Ok(match mode {
            GradMode::Mle => -z.log_prob(y),
            GradMode::Drift(fs) => -crate::netcore::combine_logits(&fs, &z).log_prob(y),
        })
    }

    /// Gradient of the per-example loss with respect to every trainable
    /// parameter. Embedding rows are included only when the table is trainable.
    pub fn gradient(
        &self,
        enc: &EncodedExample,
        y: Label,
        mode: GradMode,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<ModelGradient> {
        let x = self.features(enc);
        let acts = self.classifier.activations(&x, dropout)?;
        let loss = match mode {
            GradMode::Mle => -acts.logits.log_prob(y),
            GradMode::Drift(fs) => -crate::netcore::combine_logits(&fs, &acts.logits).log_prob(y),
        };
        let g = self.classifier.backward_from(&x, &acts, y, mode);
        let rows = if self.embedding.trainable {
            backprop_encoded(self.extractor, enc, &self.embedding, &g.input)
        } else {
            RowGradients::default()
        };
        Ok(ModelGradient { params: g.params, rows, loss })
    }
}
