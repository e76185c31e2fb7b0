//! Finite-difference checks: a few tape operations, then every parameter of
//! a tiny doubly-attentive model with the imagination head.

use mmtx::cli::random_batch;
use mmtx::gradcheck::{check_joint_loss, grad_check};
use mmtx::model::ModelMode;
use mmtx::{Model, ModelConfig, SplitMix64, Tensor};

fn main() -> mmtx::Result<()> {
    let mut rng = SplitMix64::new(11);
    let x = Tensor::uniform(&[3, 4], 1.0, &mut rng);
    let w = Tensor::uniform(&[4, 5], 1.0, &mut rng);
    let report = grad_check(
        |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.tanh(h)?;
            let s = t.softmax_rows(h)?;
            t.cross_entropy_sum(s, &[Some(0), None, Some(4)])
        },
        &[x, w],
        1e-5,
        1e-4,
    )?;
    println!(
        "matmul/tanh/softmax/cross-entropy: max rel err {:.2e}",
        report.max_rel_error
    );

    let config = ModelConfig {
        n_layers: 2,
        d: 8,
        d_ff: 16,
        heads: 2,
        vocab_size: 12,
        image_positions: 3,
        image_dim: 5,
        pooled_dim: 4,
        imag_hidden: 6,
        mode: ModelMode::Multimodal,
        imagination: true,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let model = Model::new(config.clone(), 3)?;
    let batch = random_batch(&config, 3, 3)?;
    let (report, worst) = check_joint_loss(&model, &batch, 3, 1e-5, 1e-4)?;
    println!(
        "joint loss over {} parameters: max rel err {:.2e} (worst: {worst}), passed: {}",
        model.params().len(),
        report.max_rel_error,
        report.passed
    );
    Ok(())
}
