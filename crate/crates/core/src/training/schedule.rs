/// Noam schedule: `init_lr · d^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
///
/// `init_lr` multiplies the whole expression; the peak value, reached at
/// `step == warmup`, is `init_lr / √(d · warmup)`.
pub fn noam_lr(step: usize, d: usize, warmup: usize, init_lr: f64) -> f64 {
    assert!(
        step >= 1 && warmup >= 1,
        "noam_lr needs step >= 1 and warmup >= 1"
    );
    let s = step as f64;
    let w = warmup as f64;
    init_lr * (d as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}
