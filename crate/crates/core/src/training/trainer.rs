use std::fmt::Write as _;
use std::path::PathBuf;

use log::{debug, info, warn};

use super::adam::{clip_global_norm, AdamConfig, OptimizerState};
use super::checkpoint::{average_checkpoints, CheckpointArchive};
use super::schedule::noam_lr;
use super::topk::{TopKEntry, TopKTracker};
use crate::error::{Error, Result};
use crate::model::{Dropout, Model, Sample};
use crate::rng::SplitMix64;

/// Batches are formed inside windows of this many batches' worth of
/// examples, sorted by source length.
const BUCKET_WINDOW: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub steps: usize,
    pub eval_interval: usize,
    pub top_k: usize,
    pub warmup: usize,
    pub init_lr: f64,
    pub adam: AdamConfig,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// When false the imagination head is carried along but never trained.
    pub imagination_objective: bool,
    /// Where top-k and last-good checkpoints are written, if anywhere.
    pub checkpoint_dir: Option<PathBuf>,
    /// Extra key/value pairs stamped into every checkpoint written.
    pub checkpoint_meta: Vec<(String, String)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            batch_size: 16,
            steps: 600,
            eval_interval: 100,
            top_k: 10,
            warmup: 300,
            init_lr: 0.5,
            adam: AdamConfig::default(),
            clip_norm: Some(1.0),
            imagination_objective: true,
            checkpoint_dir: None,
            checkpoint_meta: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.steps == 0
            || self.warmup == 0
            || self.eval_interval == 0
            || self.top_k == 0
        {
            return Err(Error::Config(
                "batch_size, steps, warmup, eval_interval and top_k must be positive".into(),
            ));
        }
        if !(self.init_lr > 0.0) {
            return Err(Error::Config(format!(
                "init_lr must be positive, got {}",
                self.init_lr
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!(
                    "clip_norm must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// Scores a model on held-out data; higher is better.
pub trait Validator {
    fn score(&self, model: &Model) -> Result<f64>;
}

impl<F: Fn(&Model) -> Result<f64>> Validator for F {
    fn score(&self, model: &Model) -> Result<f64> {
        self(model)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    /// Mean translation loss per example with a target (0 if none).
    pub loss_translation: f64,
    /// Mean imagination loss per contributing example (0 if none).
    pub loss_imagination: f64,
    pub n_translation: usize,
    pub n_imagination: usize,
    pub val_score: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    /// Best validated checkpoints, best first.
    pub top_k: Vec<TopKEntry<CheckpointArchive>>,
    /// Average of `top_k`, if any validation ran.
    pub averaged: Option<CheckpointArchive>,
    pub final_checkpoint: CheckpointArchive,
}

impl TrainReport {
    /// `step\tlr\tloss_translation\tloss_imagination\tval_bleu` lines; `-`
    /// marks steps without validation.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("step\tlr\tloss_translation\tloss_imagination\tval_bleu\n");
        for r in &self.records {
            let val = r
                .val_score
                .map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(
                out,
                "{}\t{:.6e}\t{:.6}\t{:.6}\t{}",
                r.step, r.lr, r.loss_translation, r.loss_imagination, val
            );
        }
        out
    }
}

fn epoch_batches(lengths: &[usize], batch_size: usize, rng: &mut SplitMix64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    rng.shuffle(&mut order);
    let mut batches = Vec::new();
    for window in order.chunks_mut(batch_size * BUCKET_WINDOW) {
        window.sort_by_key(|&i| lengths[i]);
        batches.extend(window.chunks(batch_size).map(<[usize]>::to_vec));
    }
    rng.shuffle(&mut batches);
    batches
}

fn write_last_good(model: &Model, config: &TrainConfig, step: usize) -> Option<PathBuf> {
    let dir = config.checkpoint_dir.as_ref()?;
    let path = dir.join("last_good.mmxf");
    let mut meta = vec![("step".to_string(), (step - 1).to_string())];
    meta.extend(config.checkpoint_meta.iter().cloned());
    let archive = CheckpointArchive::from_params(model.params(), meta);
    match archive.save(&path) {
        Ok(()) => Some(path),
        Err(e) => {
            warn!("could not write last good checkpoint: {e}");
            None
        }
    }
}

/// Trains `model` in place on `data`.
///
/// Three independent streams are derived from `config.seed`: batch
/// shuffling, dropout masks and contrastive sampling, so switching the
/// imagination objective off leaves the other two untouched.
pub fn train(
    model: &mut Model,
    data: &[Sample],
    config: &TrainConfig,
    validator: Option<&dyn Validator>,
) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("no training data".into()));
    }
    let use_imagination = config.imagination_objective && model.has_imagination();
    if !data
        .iter()
        .any(|s| s.tgt.is_some() || (use_imagination && s.image.is_some()))
    {
        return Err(Error::Contract(
            "no training example has a translation or imagination objective".into(),
        ));
    }
    if let Some(dir) = &config.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut root = SplitMix64::new(config.seed);
    let mut shuffle_rng = root.fork(1);
    let mut dropout_rng = root.fork(2);
    let mut contrast_rng = root.fork(3);

    let lengths: Vec<usize> = data.iter().map(|s| s.src.len()).collect();
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut optimizer = OptimizerState::new(model.params(), config.adam);
    let mut tracker: TopKTracker<CheckpointArchive> = TopKTracker::new(config.top_k);
    let mut records = Vec::with_capacity(config.steps);
    let d = model.config().d;
    let rate = model.config().dropout;

    for step in 1..=config.steps {
        if batches.is_empty() {
            batches = epoch_batches(&lengths, config.batch_size, &mut shuffle_rng);
            batches.reverse();
        }
        let batch_ids = batches.pop().expect("refilled above");
        let batch: Vec<&Sample> = batch_ids.iter().map(|&i| &data[i]).collect();
        let step_dropout = dropout_rng.fork(step as u64);
        let dropout = if rate > 0.0 {
            Dropout::new(rate, step_dropout)
        } else {
            Dropout::disabled()
        };

        let has_objective = batch
            .iter()
            .any(|s| s.tgt.is_some() || (use_imagination && s.image.is_some()));
        let (mut grads, parts, loss) = if has_objective {
            let mut g = model.graph(true, dropout);
            let (loss, parts) =
                model.joint_loss(&mut g, &batch, &mut contrast_rng, use_imagination)?;
            let loss_value = g.tape.value(loss).item();
            if !loss_value.is_finite() {
                let last_good = write_last_good(model, config, step);
                return Err(Error::Divergence { step, last_good });
            }
            let grads = g.tape.backward(loss)?;
            (g.param_grads(&grads), parts, loss_value)
        } else {
            debug!("step {step}: batch has no objective");
            let zeros = model
                .params()
                .tensors()
                .iter()
                .map(|t| crate::tensor::Tensor::zeros(t.shape()))
                .collect();
            (zeros, Default::default(), 0.0)
        };
        if let Some(c) = config.clip_norm {
            clip_global_norm(&mut grads, c);
        }
        let lr = noam_lr(step, d, config.warmup, config.init_lr);
        if let Err(e) = optimizer.step(model.params_mut(), &grads, lr) {
            if matches!(e, Error::NonFiniteGradient(_)) {
                write_last_good(model, config, step);
            }
            return Err(e);
        }
        let mean = |total: f64, n: usize| if n == 0 { 0.0 } else { total / n as f64 };
        let mut record = StepRecord {
            step,
            lr,
            loss_translation: mean(parts.translation, parts.n_translation),
            loss_imagination: mean(parts.imagination, parts.n_imagination),
            n_translation: parts.n_translation,
            n_imagination: parts.n_imagination,
            val_score: None,
        };
        debug!("step {step} lr {lr:.3e} loss {loss:.5}");

        if let Some(v) = validator {
            if config.eval_interval > 0
                && (step % config.eval_interval == 0 || step == config.steps)
            {
                let score = v.score(model)?;
                info!(
                    "step {step}: translation {:.4} imagination {:.4} validation {score:.3}",
                    record.loss_translation, record.loss_imagination
                );
                record.val_score = Some(score);
                let mut meta = vec![
                    ("step".to_string(), step.to_string()),
                    ("score".to_string(), format!("{score}")),
                ];
                meta.extend(config.checkpoint_meta.iter().cloned());
                let archive = CheckpointArchive::from_params(model.params(), meta);
                if let Some(dir) = &config.checkpoint_dir {
                    archive.save(&dir.join(format!("step-{step}.mmxf")))?;
                }
                if let Some(out) = tracker.offer(score, step, archive) {
                    if let Some(dir) = &config.checkpoint_dir {
                        let path = dir.join(format!("step-{}.mmxf", out.step));
                        std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
                    }
                }
            }
        }
        records.push(record);
    }

    let top_k = tracker.into_entries();
    let averaged = if top_k.is_empty() {
        None
    } else {
        let archives: Vec<CheckpointArchive> = top_k.iter().map(|e| e.item.clone()).collect();
        let mut avg = average_checkpoints(&archives)?;
        avg.meta.extend(config.checkpoint_meta.iter().cloned());
        Some(avg)
    };
    let mut meta = vec![("step".to_string(), config.steps.to_string())];
    meta.extend(config.checkpoint_meta.iter().cloned());
    let final_checkpoint = CheckpointArchive::from_params(model.params(), meta);
    if let Some(dir) = &config.checkpoint_dir {
        final_checkpoint.save(&dir.join("final.mmxf"))?;
        if let Some(avg) = &averaged {
            avg.save(&dir.join("averaged.mmxf"))?;
        }
    }
    Ok(TrainReport {
        records,
        top_k,
        averaged,
        final_checkpoint,
    })
}
