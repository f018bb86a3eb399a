//! Residual-fitting debiasing for premise/hypothesis classification.
//!
//! A *biased* classifier is trained on deliberately insufficient features
//! (hypothesis only, bag of words, handcrafted overlap cues). A *debiased*
//! classifier is then trained on the full input by minimizing the loss of the
//! summed logits with the biased model frozen, so it only learns what the
//! biased model cannot explain. At test time the debiased model is used alone.
//!
//! Module map:
//! - [`corpus`]: labels, examples, tokenization, SNLI-format ingestion and a
//!   synthetic pair task.
//! - [`featurize`]: embedding tables and the feature extractors.
//! - [`netcore`]: linear / one-hidden-layer softmax classifiers with exact
//!   gradients for both objectives.
//! - [`model`]: a classifier bundled with its extractor and embedding table.
//! - [`objectives`]: Adam, the warmup/linear-decay schedule and the MLE,
//!   residual-fitting and Remove training procedures.
//! - [`biaslab`]: cheating-feature injection, stress transforms and the
//!   cheating-rate sweep.
//! - [`evalkit`]: accuracy, confusion, per-class F1 and bias audits.
//! - [`checkpoint`]: versioned model persistence.

pub mod biaslab;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod featurize;
pub mod model;
pub mod netcore;
pub mod objectives;

pub use error::{Error, Result};

pub(crate) mod rng {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Derive an independent stream from a base seed and a tag.
    pub fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(tag);
        rng
    }
}
