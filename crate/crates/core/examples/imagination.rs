//! Trains a text-only translator with the imagination head and reports how
//! the margin loss and validation BLEU move against a plain text-only model.
//!
//! cargo run --release --example imagination -- [seed] [steps]

use mmtx::data::{encode_examples, generate_toy_task, SubwordVocab, ToyConfig};
use mmtx::eval::{BleuValidator, DecodeOptions};
use mmtx::training::{train, TrainConfig, Validator};
use mmtx::{Model, ModelConfig};

fn main() -> mmtx::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(600);

    let task = generate_toy_task(2000, 500, seed, &ToyConfig::default())?;
    let mut corpus: Vec<&str> = task.train.iter().map(|e| e.source.as_str()).collect();
    corpus.extend(task.train.iter().filter_map(|e| e.target.as_deref()));
    let vocab = SubwordVocab::learn(&corpus, 100)?;
    let train_set = encode_examples(&task.train, &vocab, Some(&task.features))?;
    let test_set = encode_examples(&task.test, &vocab, Some(&task.features))?;
    let references = task
        .test
        .iter()
        .map(|e| e.target.clone().unwrap_or_default())
        .collect();
    let validator = BleuValidator::new(
        &test_set,
        references,
        &vocab,
        DecodeOptions {
            max_len: 12,
            beam: 1,
            jobs: 1,
        },
    )?;

    for imagination in [false, true] {
        let config = ModelConfig {
            vocab_size: vocab.len(),
            imagination,
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
        let report = train(&mut model, &train_set, &tc, None)?;
        let window = |r: &[mmtx::training::StepRecord]| {
            r.iter().map(|s| s.loss_imagination).sum::<f64>() / r.len() as f64
        };
        let bleu = validator.score(&model)?;
        if imagination {
            println!(
                "imagination: L_imag first 20 steps {:.4}, last 20 steps {:.4}; BLEU {bleu:.2}",
                window(&report.records[..20]),
                window(&report.records[report.records.len() - 20..])
            );
        } else {
            println!("text-only: BLEU {bleu:.2}");
        }
    }
    Ok(())
}
