//! Text processing, dataset formats, corpus mixing and the synthetic task.

mod dataset;
mod features;
mod subword;
mod tokenize;
pub mod toy;

pub use dataset::{mix_datasets, read_jsonl, validate_dataset, write_jsonl, Example};
pub(crate) use features::{put_string, Reader};
pub use features::{round_to_f32, FeatureFile, FEATURE_MAGIC, FEATURE_VERSION};
pub use subword::{SubwordVocab, END_MARK, SPECIALS};
pub use tokenize::{detokenize, group_tokenize, normalize};
pub use toy::{generate_toy_task, ToyConfig, ToyTask};

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::Sample;

/// Turns text examples into model samples: normalises, encodes with the
/// vocabulary and resolves image references.
pub fn encode_examples(
    examples: &[Example],
    vocab: &SubwordVocab,
    features: Option<&FeatureFile>,
) -> Result<Vec<Sample>> {
    examples
        .iter()
        .map(|ex| {
            let src = vocab.encode(&normalize(&ex.source))?;
            if src.is_empty() {
                return Err(Error::Input(format!(
                    "example {} has an empty source",
                    ex.id
                )));
            }
            let tgt = ex
                .target
                .as_deref()
                .map(|t| vocab.encode(&normalize(t)))
                .transpose()?;
            let image = match &ex.image_ref {
                None => None,
                Some(r) => {
                    let file = features.ok_or_else(|| {
                        Error::Input(format!(
                            "example {} references an image but no features were given",
                            ex.id
                        ))
                    })?;
                    Some(Arc::clone(file.get(r).ok_or_else(|| {
                        Error::Input(format!("unresolved image reference {r}"))
                    })?))
                }
            };
            Ok(Sample { src, tgt, image })
        })
        .collect()
}
