//! Decoding, BLEU, disambiguation accuracy and the fake-image evaluation.

mod bleu;
mod decode;

pub use bleu::{bleu, bleu_tokens, corpus_stats, sentence_bleu, BleuStats, MAX_ORDER};
pub use decode::{
    beam_decode, decode_all, decode_sample, greedy_decode, sequence_score, DecodeOptions,
};

use std::sync::Arc;

use crate::data::toy::target_sense;
use crate::data::SubwordVocab;
use crate::error::{Error, Result};
use crate::model::{Model, Sample};
use crate::rng::SplitMix64;
use crate::training::Validator;

/// Fraction of hypotheses that pick the reference's sense word. References
/// without a sense word are skipped; a hypothesis without exactly one sense
/// word counts as wrong.
pub fn sense_accuracy<S: AsRef<str>, T: AsRef<str>>(
    hypotheses: &[S],
    references: &[T],
) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut total = 0usize;
    let mut correct = 0usize;
    for (h, r) in hypotheses.iter().zip(references) {
        let Some(want) = target_sense(r.as_ref()) else {
            continue;
        };
        total += 1;
        if target_sense(h.as_ref()) == Some(want) {
            correct += 1;
        }
    }
    if total == 0 {
        return Err(Error::Input("no reference contains a sense word".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Decoded ids as text.
pub fn detok_all(vocab: &SubwordVocab, outputs: &[Vec<usize>]) -> Vec<String> {
    outputs.iter().map(|ids| vocab.decode(ids)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialReport {
    pub metric_true: f64,
    pub metric_shuffled: f64,
    pub delta: f64,
    pub seed: u64,
    pub permutation: Vec<usize>,
}

/// Evaluates `metric` on the decoded test set twice: with the true images
/// and with images permuted by a seeded derangement.
pub fn adversarial_eval(
    model: &Model,
    samples: &[Sample],
    seed: u64,
    opts: &DecodeOptions,
    metric: &dyn Fn(&[Vec<usize>]) -> Result<f64>,
) -> Result<AdversarialReport> {
    if samples.len() < 2 {
        return Err(Error::Contract(format!(
            "fake-image evaluation needs at least two examples, got {}",
            samples.len()
        )));
    }
    if let Some(i) = samples.iter().position(|s| s.image.is_none()) {
        return Err(Error::Input(format!("test example {i} has no image")));
    }
    let permutation = SplitMix64::new(seed)
        .derangement(samples.len())
        .expect("n >= 2");
    let shuffled: Vec<Sample> = samples
        .iter()
        .zip(&permutation)
        .map(|(s, &j)| Sample {
            image: samples[j].image.as_ref().map(Arc::clone),
            ..s.clone()
        })
        .collect();
    let metric_true = metric(&decode_all(model, samples, opts)?)?;
    let metric_shuffled = metric(&decode_all(model, &shuffled, opts)?)?;
    Ok(AdversarialReport {
        metric_true,
        metric_shuffled,
        delta: metric_true - metric_shuffled,
        seed,
        permutation,
    })
}

/// Greedy-decode corpus BLEU on a held-out set; the trainer's model
/// selection metric.
pub struct BleuValidator<'a> {
    pub samples: &'a [Sample],
    pub references: Vec<String>,
    pub vocab: &'a SubwordVocab,
    pub opts: DecodeOptions,
}

impl<'a> BleuValidator<'a> {
    pub fn new(
        samples: &'a [Sample],
        references: Vec<String>,
        vocab: &'a SubwordVocab,
        opts: DecodeOptions,
    ) -> Result<Self> {
        if samples.len() != references.len() || samples.is_empty() {
            return Err(Error::Contract(format!(
                "{} validation samples for {} references",
                samples.len(),
                references.len()
            )));
        }
        Ok(BleuValidator {
            samples,
            references,
            vocab,
            opts,
        })
    }
}

impl Validator for BleuValidator<'_> {
    fn score(&self, model: &Model) -> Result<f64> {
        let greedy = DecodeOptions {
            beam: 1,
            ..self.opts
        };
        let hyps = detok_all(self.vocab, &decode_all(model, self.samples, &greedy)?);
        bleu(&hyps, &self.references, false)
    }
}
