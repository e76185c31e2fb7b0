mod common;

use common::*;
use mmtx::params::ParamStore;
use mmtx::training::{
    average_checkpoints, clip_global_norm, noam_lr, train, AdamConfig, CheckpointArchive,
    OptimizerState, TopKTracker, TrainConfig,
};
use mmtx::{Model, ModelMode, Sample, SplitMix64, Tensor};
use proptest::prelude::*;

#[test]
fn noam_closed_form_values() {
    assert!((noam_lr(1, 64, 4000, 0.2) - 9.882e-8).abs() < 1e-10);
    // The printed figure carries five significant digits; the tolerance is
    // applied to the exact closed form.
    let at_warmup = noam_lr(4000, 64, 4000, 0.2);
    assert!((at_warmup - 0.2 * 0.125 / 4000f64.sqrt()).abs() < 1e-10);
    assert!((at_warmup - 3.9528e-4).abs() < 0.5e-8);
    let peak = noam_lr(4000, 64, 4000, 0.2);
    assert!(noam_lr(3999, 64, 4000, 0.2) < peak && noam_lr(4001, 64, 4000, 0.2) < peak);
}

#[test]
fn adam_matches_a_hand_trace() {
    let mut store = ParamStore::new();
    store.add("p", Tensor::vector(vec![0.5]));
    let mut opt = OptimizerState::new(&store, AdamConfig::default());
    // β₁ = 0.9, β₂ = 0.98, ε = 1e-9, lr = 0.01; gradients 0.1, -0.2, 0.05.
    // Step 1: m = 0.01, v = 2e-4, m̂ = 0.1, v̂ = 0.01, p = 0.5 - 0.01·0.1/(0.1 + 1e-9).
    let expected = [0.4900000001, 0.49365053920670704, 0.49501938453922717];
    for (g, want) in [0.1, -0.2, 0.05].into_iter().zip(expected) {
        opt.step(&mut store, &[Tensor::vector(vec![g])], 0.01)
            .unwrap();
        assert!((store.tensors()[0].data()[0] - want).abs() < 1e-12);
    }
    assert_eq!(opt.t, 3);
}

#[test]
fn adam_zero_gradient_and_nan_gradient() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::vector(vec![1.0, -2.0]));
    let mut opt = OptimizerState::new(&store, AdamConfig::default());
    opt.step(&mut store, &[Tensor::zeros(&[2])], 0.1).unwrap();
    assert_eq!(store.tensors()[0].data(), &[1.0, -2.0]);
    assert_eq!(opt.t, 1);
    let err = opt
        .step(&mut store, &[Tensor::vector(vec![f64::NAN, 0.0])], 0.1)
        .unwrap_err();
    assert!(err.to_string().contains('w'));
    assert_eq!(opt.t, 1);
}

#[test]
fn adam_constant_gradient_moves_by_lr() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::vector(vec![0.0, 0.0]));
    let mut opt = OptimizerState::new(&store, AdamConfig::default());
    for _ in 0..200 {
        let before = store.tensors()[0].clone();
        opt.step(&mut store, &[Tensor::vector(vec![3.0, -0.01])], 0.001)
            .unwrap();
        let after = &store.tensors()[0];
        assert!((before.data()[0] - after.data()[0] - 0.001).abs() < 1e-9);
        assert!((after.data()[1] - before.data()[1] - 0.001).abs() < 1e-9);
    }
}

#[test]
fn clipping_scales_to_the_threshold() {
    let mut g = vec![Tensor::vector(vec![3.0]), Tensor::vector(vec![4.0])];
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    assert!((g[0].data()[0] - 0.6).abs() < 1e-15 && (g[1].data()[0] - 0.8).abs() < 1e-15);
}

fn random_archive(rng: &mut SplitMix64) -> CheckpointArchive {
    let manifest = vec![("a".to_string(), vec![3, 2]), ("b".to_string(), vec![5])];
    let payload = (0..11).map(|_| rng.uniform(-10.0, 10.0) as f32).collect();
    CheckpointArchive::new(
        manifest,
        payload,
        vec![("step".into(), rng.below(1000).to_string())],
    )
    .unwrap()
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let model = Model::new(tiny_config(ModelMode::Multimodal, true), 1).unwrap();
    let a = CheckpointArchive::from_params(model.params(), vec![("step".into(), "7".into())]);
    let bytes = a.to_bytes();
    let b = CheckpointArchive::from_bytes(&bytes).unwrap();
    assert_eq!(a, b);
    assert_eq!(b.to_bytes(), bytes);
    assert_eq!(b.step(), Some(7));
    let mut other = Model::new(tiny_config(ModelMode::Multimodal, true), 2).unwrap();
    b.apply_to(other.params_mut()).unwrap();
    assert_eq!(
        CheckpointArchive::from_params(other.params(), b.meta.clone()).to_bytes(),
        bytes
    );
    assert!(CheckpointArchive::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn averaging_identical_checkpoints_is_idempotent() {
    let a = random_archive(&mut SplitMix64::new(3));
    for k in 1..=5 {
        let avg = average_checkpoints(&vec![a.clone(); k]).unwrap();
        assert_eq!(avg.payload, a.payload);
    }
}

#[test]
fn averaging_ten_checkpoints_matches_loop_mean() {
    let mut rng = SplitMix64::new(4);
    let archives: Vec<CheckpointArchive> = (0..10).map(|_| random_archive(&mut rng)).collect();
    let avg = average_checkpoints(&archives).unwrap();
    for i in 0..avg.payload.len() {
        let mut s = 0.0f64;
        for a in &archives {
            s += a.payload[i] as f64;
        }
        let want = (s / 10.0) as f32;
        let got = avg.payload[i];
        assert!(
            (got.to_bits() as i64 - want.to_bits() as i64).abs() <= 1,
            "{got} vs {want}"
        );
    }
    let scalar =
        |v: f32| CheckpointArchive::new(vec![("x".into(), vec![1])], vec![v], vec![]).unwrap();
    assert_eq!(
        average_checkpoints(&[scalar(1.0), scalar(3.0)])
            .unwrap()
            .payload,
        vec![2.0]
    );
}

#[test]
fn averaging_rejects_mismatched_manifests() {
    let a = random_archive(&mut SplitMix64::new(5));
    let b = CheckpointArchive::new(
        vec![("a".into(), vec![3, 2]), ("c".into(), vec![5])],
        vec![0.0; 11],
        vec![],
    )
    .unwrap();
    let err = average_checkpoints(&[a, b]).unwrap_err().to_string();
    assert!(err.contains("c"), "{err}");
    assert!(average_checkpoints(&[]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn topk_equals_sort_and_truncate(scores in prop::collection::vec(0u8..20, 0..40), k in 1usize..12) {
        let mut tracker = TopKTracker::new(k);
        for (step, &s) in scores.iter().enumerate() {
            tracker.offer(s as f64, step, ());
            prop_assert!(tracker.len() <= k);
        }
        let mut oracle: Vec<(f64, usize)> = scores.iter().enumerate().map(|(i, &s)| (s as f64, i)).collect();
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
        oracle.truncate(k);
        let got: Vec<(f64, usize)> = tracker.entries().iter().map(|e| (e.score, e.step)).collect();
        prop_assert_eq!(got, oracle);
    }

    #[test]
    fn noam_is_positive_and_peaks_at_warmup(warmup in 1usize..500, d in 1usize..600) {
        let peak = noam_lr(warmup, d, warmup, 1.0);
        for step in 1..2 * warmup + 3 {
            let lr = noam_lr(step, d, warmup, 1.0);
            prop_assert!(lr > 0.0 && lr <= peak);
        }
    }
}

fn copy_task(cfg: &mmtx::ModelConfig, n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = SplitMix64::new(seed);
    (0..n)
        .map(|_| {
            let src = random_ids(2 + rng.below(3), cfg.vocab_size, &mut rng);
            Sample {
                tgt: Some(src.clone()),
                src,
                image: None,
            }
        })
        .collect()
}

#[test]
fn copy_task_loss_decreases() {
    let cfg = tiny_config(ModelMode::Textual, false);
    let mut model = Model::new(cfg.clone(), 6).unwrap();
    let data = copy_task(&cfg, 10, 7);
    let tc = TrainConfig {
        batch_size: 5,
        steps: 50,
        eval_interval: 100,
        warmup: 10,
        init_lr: 1.0,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &data, &tc, None).unwrap();
    let mean = |r: &[mmtx::training::StepRecord]| {
        r.iter().map(|x| x.loss_translation).sum::<f64>() / r.len() as f64
    };
    let (first, last) = (mean(&report.records[..5]), mean(&report.records[45..]));
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn training_keeps_topk_and_averages() {
    let cfg = tiny_config(ModelMode::Textual, false);
    let mut model = Model::new(cfg.clone(), 8).unwrap();
    let data = copy_task(&cfg, 10, 9);
    let dir = tempfile::tempdir().unwrap();
    let validator = |m: &Model| -> mmtx::Result<f64> { Ok(m.params().tensors()[0].data()[0]) };
    let tc = TrainConfig {
        batch_size: 5,
        steps: 12,
        eval_interval: 2,
        top_k: 3,
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..TrainConfig::default()
    };
    let report = train(&mut model, &data, &tc, Some(&validator)).unwrap();
    assert_eq!(report.top_k.len(), 3);
    assert!(report.top_k.windows(2).all(|w| w[0].score >= w[1].score));
    let kept: Vec<String> = report
        .top_k
        .iter()
        .map(|e| format!("step-{}.mmxf", e.step))
        .collect();
    let mut on_disk: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("step-"))
        .collect();
    on_disk.sort();
    let mut kept_sorted = kept.clone();
    kept_sorted.sort();
    assert_eq!(on_disk, kept_sorted);
    assert!(dir.path().join("averaged.mmxf").exists() && dir.path().join("final.mmxf").exists());
    let tsv = report.to_tsv();
    assert!(tsv.starts_with("step\tlr\tloss_translation\tloss_imagination\tval_bleu\n"));
    assert_eq!(tsv.lines().count(), 13);
}

#[test]
fn same_seed_gives_identical_bytes() {
    let cfg = tiny_config(ModelMode::Multimodal, true);
    let mut rng = SplitMix64::new(10);
    let data: Vec<Sample> = (0..12)
        .map(|i| random_sample(&cfg, i % 4 != 0, true, &mut rng))
        .collect();
    let run = || {
        let mut c = cfg.clone();
        c.dropout = 0.1;
        let mut model = Model::new(c, 11).unwrap();
        let tc = TrainConfig {
            batch_size: 4,
            steps: 8,
            eval_interval: 100,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &data, &tc, None).unwrap();
        (report.final_checkpoint.to_bytes(), report.to_tsv())
    };
    assert_eq!(run(), run());
}

#[test]
fn caption_only_training_changes_no_decoder_parameter() {
    let cfg = tiny_config(ModelMode::Multimodal, true);
    let mut model = Model::new(cfg.clone(), 12).unwrap();
    let mut rng = SplitMix64::new(13);
    let data: Vec<Sample> = (0..8)
        .map(|_| random_sample(&cfg, false, true, &mut rng))
        .collect();
    let before = param_bits(&model);
    let tc = TrainConfig {
        batch_size: 4,
        steps: 5,
        eval_interval: 100,
        ..TrainConfig::default()
    };
    train(&mut model, &data, &tc, None).unwrap();
    for (a, b) in before.iter().zip(param_bits(&model)) {
        if Model::is_decoder_param(&a.0) {
            assert_eq!(a.1, b.1, "{}", a.0);
        } else if Model::is_imagination_param(&a.0) {
            assert_ne!(a.1, b.1, "{}", a.0);
        }
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let cfg = tiny_config(ModelMode::Textual, false);
    let mut model = Model::new(cfg.clone(), 14).unwrap();
    let data = copy_task(&cfg, 4, 15);
    for tc in [
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            top_k: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            warmup: 0,
            ..TrainConfig::default()
        },
    ] {
        assert!(train(&mut model, &data, &tc, None).is_err());
    }
    assert!(train(&mut model, &[], &TrainConfig::default(), None).is_err());
}
