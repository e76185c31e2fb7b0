//! Overfits a tiny model on two sentence pairs, then compares greedy and
//! beam search hypotheses and their length-normalised scores.

use mmtx::data::{encode_examples, Example, SubwordVocab};
use mmtx::eval::{beam_decode, greedy_decode, sequence_score};
use mmtx::training::{train, TrainConfig};
use mmtx::{Model, ModelConfig};

fn main() -> mmtx::Result<()> {
    let pairs = [
        ("a dog runs", "ein hund rennt"),
        ("a cat sleeps", "eine katze schlaeft"),
    ];
    let examples: Vec<Example> = pairs
        .iter()
        .enumerate()
        .map(|(i, (s, t))| Example {
            id: i.to_string(),
            source: s.to_string(),
            target: Some(t.to_string()),
            image_ref: None,
        })
        .collect();
    let corpus: Vec<&str> = pairs.iter().flat_map(|(s, t)| [*s, *t]).collect();
    let vocab = SubwordVocab::learn(&corpus, 40)?;
    let samples = encode_examples(&examples, &vocab, None)?;
    let config = ModelConfig {
        d: 32,
        d_ff: 64,
        heads: 2,
        vocab_size: vocab.len(),
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let mut model = Model::new(config, 2)?;
    let tc = TrainConfig {
        steps: 150,
        warmup: 30,
        batch_size: 2,
        eval_interval: 150,
        ..TrainConfig::default()
    };
    train(&mut model, &samples, &tc, None)?;
    for s in &samples {
        let g = greedy_decode(&model, &s.src, None, 32)?;
        let b = beam_decode(&model, &s.src, None, 4, 32)?;
        println!(
            "{:?}\n  greedy {:?} ({:.4})\n  beam   {:?} ({:.4})",
            vocab.decode(&s.src),
            vocab.decode(&g),
            sequence_score(&model, &s.src, None, &g)?,
            vocab.decode(&b),
            sequence_score(&model, &s.src, None, &b)?
        );
    }
    Ok(())
}
