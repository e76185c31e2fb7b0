//! Writes checkpoints during a short run, keeps the best by validation score
//! and averages them.

use mmtx::cli::random_batch;
use mmtx::training::{average_checkpoints, train, CheckpointArchive, TrainConfig};
use mmtx::{Model, ModelConfig, Sample};

fn main() -> mmtx::Result<()> {
    let config = ModelConfig {
        d: 16,
        d_ff: 32,
        heads: 2,
        vocab_size: 20,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let data: Vec<Sample> = random_batch(&config, 24, 4)?
        .into_iter()
        .map(|s| Sample { image: None, ..s })
        .collect();
    let dir = std::env::temp_dir().join("mmtx-checkpoint-averaging");
    let tc = TrainConfig {
        steps: 60,
        eval_interval: 10,
        top_k: 3,
        warmup: 20,
        batch_size: 8,
        checkpoint_dir: Some(dir.clone()),
        ..TrainConfig::default()
    };
    // Validation score: negative loss on the training data itself.
    let validator = |m: &Model| -> mmtx::Result<f64> {
        let mut g = m.graph(false, mmtx::model::Dropout::disabled());
        let refs: Vec<&Sample> = data.iter().collect();
        let (loss, _) = m.joint_loss(&mut g, &refs, &mut mmtx::SplitMix64::new(0), false)?;
        Ok(-g.tape.value(loss).item())
    };
    let mut model = Model::new(config, 4)?;
    let report = train(&mut model, &data, &tc, Some(&validator))?;
    for e in &report.top_k {
        println!("kept step {:3} score {:.4}", e.step, e.score);
    }
    let reloaded: Vec<CheckpointArchive> = report
        .top_k
        .iter()
        .map(|e| CheckpointArchive::load(&dir.join(format!("step-{}.mmxf", e.step))))
        .collect::<mmtx::Result<_>>()?;
    let avg = average_checkpoints(&reloaded)?;
    assert_eq!(Some(&avg), report.averaged.as_ref());
    avg.apply_to(model.params_mut())?;
    println!(
        "averaged steps {}: score {:.4}",
        avg.meta_value("source_steps").unwrap_or(""),
        validator(&model)?
    );
    Ok(())
}
