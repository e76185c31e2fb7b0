//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional and falls back to the desk defaults; unknown or repeated keys are
//! rejected. Empty path values mean "not set".

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::attention::ScaleMode;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelMode, NormPlacement, Pooling};
use crate::training::{AdamConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_data: Option<PathBuf>,
    pub valid_data: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub beam: usize,
    pub max_decode_len: usize,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            train_data: None,
            valid_data: None,
            features: None,
            vocab: None,
            beam: 1,
            max_decode_len: 32,
            jobs: 1,
        }
    }
}

/// Keys that describe the network itself; checkpoints carry these.
pub const MODEL_KEYS: [&str; 19] = [
    "n_layers",
    "d",
    "d_ff",
    "heads",
    "vocab_size",
    "max_len",
    "image_positions",
    "image_dim",
    "pooled_dim",
    "imag_hidden",
    "margin",
    "scale_mode",
    "mode",
    "imagination",
    "lambda",
    "pooling",
    "norm",
    "dropout",
    "ln_eps",
];

pub const RUN_KEYS: [&str; 20] = [
    "seed",
    "batch_size",
    "steps",
    "eval_interval",
    "top_k",
    "warmup",
    "init_lr",
    "beta1",
    "beta2",
    "epsilon",
    "clip_norm",
    "imagination_objective",
    "train_data",
    "valid_data",
    "features",
    "vocab",
    "checkpoint_dir",
    "beam",
    "max_decode_len",
    "jobs",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

fn choice<T: Copy>(key: &str, value: &str, options: &[(&str, T)]) -> Result<T> {
    options
        .iter()
        .find(|(n, _)| *n == value)
        .map(|&(_, v)| v)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            Error::Config(format!(
                "{key}: expected one of {}, got {value:?}",
                names.join("|")
            ))
        })
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default()
}

const SCALE_MODES: [(&str, ScaleMode); 2] = [
    ("per_head", ScaleMode::PerHead),
    ("model_dim", ScaleMode::ModelDim),
];
const MODES: [(&str, ModelMode); 2] = [
    ("textual", ModelMode::Textual),
    ("multimodal", ModelMode::Multimodal),
];
const POOLINGS: [(&str, Pooling); 2] = [("sum", Pooling::Sum), ("mean", Pooling::Mean)];
const NORMS: [(&str, NormPlacement); 2] =
    [("post", NormPlacement::Post), ("pre", NormPlacement::Pre)];

fn name_of<T: PartialEq + Copy>(options: &[(&'static str, T)], v: T) -> &'static str {
    options
        .iter()
        .find(|(_, x)| *x == v)
        .map(|(n, _)| *n)
        .expect("every variant is listed")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "n_layers" => m.n_layers = parse(key, value)?,
            "d" => m.d = parse(key, value)?,
            "d_ff" => m.d_ff = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "vocab_size" => m.vocab_size = parse(key, value)?,
            "max_len" => m.max_len = parse(key, value)?,
            "image_positions" => m.image_positions = parse(key, value)?,
            "image_dim" => m.image_dim = parse(key, value)?,
            "pooled_dim" => m.pooled_dim = parse(key, value)?,
            "imag_hidden" => m.imag_hidden = parse(key, value)?,
            "margin" => m.margin = parse(key, value)?,
            "scale_mode" => m.scale_mode = choice(key, value, &SCALE_MODES)?,
            "mode" => m.mode = choice(key, value, &MODES)?,
            "imagination" => m.imagination = parse_bool(key, value)?,
            "lambda" => m.imagination_weight = parse(key, value)?,
            "pooling" => m.pooling = choice(key, value, &POOLINGS)?,
            "norm" => m.norm = choice(key, value, &NORMS)?,
            "dropout" => m.dropout = parse(key, value)?,
            "ln_eps" => m.ln_eps = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "steps" => t.steps = parse(key, value)?,
            "eval_interval" => t.eval_interval = parse(key, value)?,
            "top_k" => t.top_k = parse(key, value)?,
            "warmup" => t.warmup = parse(key, value)?,
            "init_lr" => t.init_lr = parse(key, value)?,
            "beta1" => t.adam.beta1 = parse(key, value)?,
            "beta2" => t.adam.beta2 = parse(key, value)?,
            "epsilon" => t.adam.epsilon = parse(key, value)?,
            "clip_norm" => {
                t.clip_norm = if value == "off" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "imagination_objective" => t.imagination_objective = parse_bool(key, value)?,
            "checkpoint_dir" => t.checkpoint_dir = path(value),
            "train_data" => self.train_data = path(value),
            "valid_data" => self.valid_data = path(value),
            "features" => self.features = path(value),
            "vocab" => self.vocab = path(value),
            "beam" => self.beam = parse(key, value)?,
            "max_decode_len" => self.max_decode_len = parse(key, value)?,
            "jobs" => self.jobs = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        let t = &self.train;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = t.adam;
        Some(match key {
            "n_layers" => m.n_layers.to_string(),
            "d" => m.d.to_string(),
            "d_ff" => m.d_ff.to_string(),
            "heads" => m.heads.to_string(),
            "vocab_size" => m.vocab_size.to_string(),
            "max_len" => m.max_len.to_string(),
            "image_positions" => m.image_positions.to_string(),
            "image_dim" => m.image_dim.to_string(),
            "pooled_dim" => m.pooled_dim.to_string(),
            "imag_hidden" => m.imag_hidden.to_string(),
            "margin" => m.margin.to_string(),
            "scale_mode" => name_of(&SCALE_MODES, m.scale_mode).to_string(),
            "mode" => name_of(&MODES, m.mode).to_string(),
            "imagination" => m.imagination.to_string(),
            "lambda" => m.imagination_weight.to_string(),
            "pooling" => name_of(&POOLINGS, m.pooling).to_string(),
            "norm" => name_of(&NORMS, m.norm).to_string(),
            "dropout" => m.dropout.to_string(),
            "ln_eps" => m.ln_eps.to_string(),
            "seed" => t.seed.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "steps" => t.steps.to_string(),
            "eval_interval" => t.eval_interval.to_string(),
            "top_k" => t.top_k.to_string(),
            "warmup" => t.warmup.to_string(),
            "init_lr" => t.init_lr.to_string(),
            "beta1" => beta1.to_string(),
            "beta2" => beta2.to_string(),
            "epsilon" => epsilon.to_string(),
            "clip_norm" => t
                .clip_norm
                .map_or_else(|| "off".to_string(), |c| c.to_string()),
            "imagination_objective" => t.imagination_objective.to_string(),
            "checkpoint_dir" => show_path(&t.checkpoint_dir),
            "train_data" => show_path(&self.train_data),
            "valid_data" => show_path(&self.valid_data),
            "features" => show_path(&self.features),
            "vocab" => show_path(&self.vocab),
            "beam" => self.beam.to_string(),
            "max_decode_len" => self.max_decode_len.to_string(),
            "jobs" => self.jobs.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: key {key:?} given twice",
                    n + 1
                )));
            }
            self.set(key, value)?;
        }
        Ok(())
    }

    /// Defaults overridden by `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Applies `key=value` overrides, as given to `--set`.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (key, value) = o.as_ref().split_once('=').ok_or_else(|| {
                Error::Config(format!("override {:?} is not key=value", o.as_ref()))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    fn write_keys(&self, keys: &[&str]) -> String {
        let mut out = String::new();
        for k in keys {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("listed keys exist"));
        }
        out
    }

    /// Every key, model keys first.
    pub fn to_text(&self) -> String {
        let mut out = self.write_keys(&MODEL_KEYS);
        out.push_str(&self.write_keys(&RUN_KEYS));
        out
    }

    /// Only the network keys.
    pub fn model_text(&self) -> String {
        self.write_keys(&MODEL_KEYS)
    }

    /// A model configuration from text holding only model keys.
    pub fn model_from_text(text: &str) -> Result<ModelConfig> {
        let mut c = RunConfig::default();
        for line in text.lines() {
            if let Some((k, _)) = line.split_once('=') {
                if !MODEL_KEYS.contains(&k.trim()) {
                    return Err(Error::Config(format!("{:?} is not a model key", k.trim())));
                }
            }
        }
        c.apply_text(text)?;
        Ok(c.model)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.beam == 0 || self.max_decode_len == 0 || self.jobs == 0 {
            return Err(Error::Config(
                "beam, max_decode_len and jobs must be positive".into(),
            ));
        }
        Ok(())
    }
}
