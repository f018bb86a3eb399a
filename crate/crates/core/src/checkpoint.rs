//! Versioned JSON checkpoints.
//!
//! A checkpoint records the extractor, the architecture, the flat parameter
//! vector, the embedding table and a hash of the vocabulary it was trained
//! against. Floats are written in shortest round-trip form, so a reload
//! reproduces eval-mode logits exactly.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::featurize::{EmbeddingTable, ExtractorKind};
use crate::model::Model;
use crate::netcore::{Architecture, Classifier};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub extractor_id: ExtractorKind,
    pub arch: Architecture,
    pub vocab_hash: String,
    pub params: Vec<f64>,
    pub embedding: EmbeddingTable,
}

impl Checkpoint {
    pub fn new(model: &Model, vocab: &Vocabulary) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            extractor_id: model.extractor,
            arch: model.classifier.arch,
            vocab_hash: vocab.hash(),
            params: model.classifier.params.clone(),
            embedding: model.embedding.clone(),
        }
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut out, self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn read<R: Read>(reader: R) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_reader(reader).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }

    /// Rebuild the model, refusing a vocabulary other than the one trained on.
    pub fn into_model(self, vocab: &Vocabulary) -> Result<Model> {
        let data = vocab.hash();
        if self.vocab_hash != data {
            return Err(Error::VocabMismatch { checkpoint: self.vocab_hash, data });
        }
        let embedding = EmbeddingTable::from_values(
            self.embedding.rows(),
            self.embedding.dim(),
            self.embedding.values().to_vec(),
            self.embedding.trainable,
        )?;
        Model::from_parts(self.extractor_id, embedding, Classifier::new(self.arch, self.params)?)
    }
}
