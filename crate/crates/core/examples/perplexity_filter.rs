//! Trains a character LM on in-domain target sentences, then filters a pool
//! mixing held-out in-domain sentences with character-shuffled ones.
//!
//! cargo run --release --example perplexity_filter -- [steps] [threshold]

use std::time::Instant;

use mmtx::charlm::{charlm_train, filter_corpus, CharLmConfig};
use mmtx::data::{generate_toy_task, ToyConfig};
use mmtx::SplitMix64;

fn main() -> mmtx::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let threshold: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2.5);

    let task = generate_toy_task(1000, 200, 5, &ToyConfig::default())?;
    let train: Vec<String> = task.train.iter().filter_map(|e| e.target.clone()).collect();
    let held_out: Vec<String> = task.test.iter().filter_map(|e| e.target.clone()).collect();
    let mut rng = SplitMix64::new(9);
    let shuffled: Vec<String> = held_out
        .iter()
        .map(|s| {
            let mut chars: Vec<char> = s.chars().collect();
            rng.shuffle(&mut chars);
            chars.into_iter().collect()
        })
        .collect();

    let t0 = Instant::now();
    let (lm, losses) = charlm_train(
        &train,
        &CharLmConfig {
            steps,
            ..CharLmConfig::default()
        },
    )?;
    println!(
        "trained {steps} steps in {:.1}s: loss {:.3} -> {:.3}",
        t0.elapsed().as_secs_f64(),
        losses[0],
        losses[losses.len() - 1]
    );
    let mean = |xs: &[String]| -> mmtx::Result<f64> {
        let total: f64 = xs
            .iter()
            .map(|s| lm.perplexity(s))
            .sum::<mmtx::Result<f64>>()?;
        Ok(total / xs.len() as f64)
    };
    let (pin, pout) = (mean(&held_out)?, mean(&shuffled)?);
    println!(
        "mean perplexity: in-domain {pin:.3}, shuffled {pout:.3} (ratio {:.2})",
        pout / pin
    );

    let pool: Vec<&String> = held_out
        .iter()
        .take(50)
        .chain(shuffled.iter().take(50))
        .collect();
    let outcome = filter_corpus(&lm, &pool, threshold)?;
    println!("threshold {threshold}: {}", outcome.summary());
    for d in outcome.decisions.iter().step_by(25) {
        println!("  {:>7.3} {:5} {}", d.perplexity, d.kept, d.sentence);
    }
    Ok(())
}
