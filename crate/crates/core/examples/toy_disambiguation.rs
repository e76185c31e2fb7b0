//! Trains a text-only and a doubly-attentive model on the synthetic
//! "bat" task and compares their accuracy on the ambiguous word, with and
//! without fake images.
//!
//! cargo run --release --example toy_disambiguation -- [seed] [steps]

use std::time::Instant;

use mmtx::data::{encode_examples, generate_toy_task, SubwordVocab, ToyConfig};
use mmtx::eval::{adversarial_eval, decode_all, detok_all, sense_accuracy, DecodeOptions};
use mmtx::model::ModelMode;
use mmtx::training::{train, TrainConfig};
use mmtx::{Model, ModelConfig};

fn main() -> mmtx::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1500);

    let task = generate_toy_task(2000, 500, seed, &ToyConfig::default())?;
    let mut corpus: Vec<&str> = task.train.iter().map(|e| e.source.as_str()).collect();
    corpus.extend(task.train.iter().filter_map(|e| e.target.as_deref()));
    let vocab = SubwordVocab::learn(&corpus, 100)?;
    let train_set = encode_examples(&task.train, &vocab, Some(&task.features))?;
    let test_set = encode_examples(&task.test, &vocab, Some(&task.features))?;
    let references: Vec<String> = task
        .test
        .iter()
        .map(|e| e.target.clone().unwrap_or_default())
        .collect();
    println!("vocabulary: {} entries", vocab.len());

    let opts = DecodeOptions {
        max_len: 12,
        beam: 1,
        jobs: 1,
    };
    let accuracy =
        |outputs: &[Vec<usize>]| sense_accuracy(&detok_all(&vocab, outputs), &references);

    for mode in [ModelMode::Textual, ModelMode::Multimodal] {
        let config = ModelConfig {
            vocab_size: vocab.len(),
            mode,
            ..ModelConfig::default()
        };
        let mut model = Model::new(config, seed)?;
        let tc = TrainConfig {
            seed,
            steps,
            batch_size: 16,
            warmup: 300,
            init_lr: 0.5,
            eval_interval: steps,
            ..TrainConfig::default()
        };
        let t0 = Instant::now();
        let report = train(&mut model, &train_set, &tc, None)?;
        let secs = t0.elapsed().as_secs_f64();
        let last = report.records.last().expect("at least one step");
        println!(
            "{mode:?}: {steps} steps in {secs:.1}s, final loss {:.4}",
            last.loss_translation
        );
        let hyps = detok_all(&vocab, &decode_all(&model, &test_set, &opts)?);
        println!("  sample: {}  |  {}", hyps[0], references[0]);
        let adv = adversarial_eval(&model, &test_set, seed, &opts, &accuracy)?;
        println!(
            "  sense accuracy {:.3}, with fake images {:.3} (delta {:.3})",
            adv.metric_true, adv.metric_shuffled, adv.delta
        );
    }
    Ok(())
}
