//! Synthetic visual-disambiguation task.
//!
//! Captions follow `<subject> <verb> a <adjective> bat`; translations are
//! word-for-word into a small made-up target lexicon. "bat" has two
//! translations (animal / club) chosen by a coin flip that is visible only in
//! channel 0 of every grid cell (+1 animal, -1 club). Other channels carry a
//! per-word prototype for the subject, verb and adjective (one grid cell each,
//! the last cell is noise), so pooled features are largely predictable from
//! the caption, except for the sense.
//!
//! Without the image the sense is a fair coin: a text-only model cannot beat
//! 50% on the ambiguous word.

use super::dataset::Example;
use super::features::{round_to_f32, FeatureFile};
use crate::error::{Error, Result};
use crate::model::ImageFeatures;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const SUBJECTS: [(&str, &str); 6] = [
    ("man", "muz"),
    ("woman", "zena"),
    ("boy", "chlapec"),
    ("girl", "divka"),
    ("dog", "pes"),
    ("child", "dite"),
];
pub const VERBS: [(&str, &str); 5] = [
    ("holds", "drzi"),
    ("sees", "vidi"),
    ("finds", "najde"),
    ("drops", "upusti"),
    ("watches", "sleduje"),
];
pub const ADJECTIVES: [(&str, &str); 4] = [
    ("big", "velky"),
    ("small", "maly"),
    ("old", "stary"),
    ("black", "cerny"),
];
pub const AMBIGUOUS_SOURCE: &str = "bat";
/// Target words for the two senses of the ambiguous word.
pub const SENSES: [&str; 2] = ["netopyr", "palka"];
/// Grid channel carrying the sense.
pub const DESIGNATED_CHANNEL: usize = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub grid_positions: usize,
    pub grid_dim: usize,
    /// Standard deviation of the Gaussian noise added to every non-designated value.
    pub noise: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            grid_positions: 4,
            grid_dim: 16,
            noise: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyTask {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub features: FeatureFile,
}

/// One equally likely outcome of the generator, ignoring noise.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyCase {
    pub source: String,
    pub designated: f64,
    pub sense: usize,
}

fn caption(s: usize, v: usize, a: usize) -> (String, String) {
    (
        format!(
            "{} {} a {} {AMBIGUOUS_SOURCE}",
            SUBJECTS[s].0, VERBS[v].0, ADJECTIVES[a].0
        ),
        format!("{} {} {}", SUBJECTS[s].1, VERBS[v].1, ADJECTIVES[a].1),
    )
}

fn sense_value(sense: usize) -> f64 {
    if sense == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Every (caption, sense) outcome; the generator draws captions uniformly and
/// senses as a fair coin, so each listed case is equally likely.
pub fn enumerate_cases() -> Vec<ToyCase> {
    let mut out = Vec::new();
    for s in 0..SUBJECTS.len() {
        for v in 0..VERBS.len() {
            for a in 0..ADJECTIVES.len() {
                for sense in 0..2 {
                    out.push(ToyCase {
                        source: caption(s, v, a).0,
                        designated: sense_value(sense),
                        sense,
                    });
                }
            }
        }
    }
    out
}

/// Sense index of a target sentence, if it contains exactly one sense word.
pub fn target_sense(target: &str) -> Option<usize> {
    let words: Vec<&str> = target.split_whitespace().collect();
    let hits: Vec<usize> = (0..2).filter(|&i| words.contains(&SENSES[i])).collect();
    match hits.as_slice() {
        [one] => Some(*one),
        _ => None,
    }
}

struct Prototypes {
    subjects: Vec<Vec<f64>>,
    verbs: Vec<Vec<f64>>,
    adjectives: Vec<Vec<f64>>,
}

impl Prototypes {
    fn new(dim: usize, rng: &mut SplitMix64) -> Self {
        let mut draw = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| {
                    (0..dim)
                        .map(|c| {
                            if c == DESIGNATED_CHANNEL {
                                0.0
                            } else {
                                rng.normal()
                            }
                        })
                        .collect()
                })
                .collect()
        };
        Prototypes {
            subjects: draw(SUBJECTS.len()),
            verbs: draw(VERBS.len()),
            adjectives: draw(ADJECTIVES.len()),
        }
    }
}

fn make_features(
    cfg: &ToyConfig,
    protos: &Prototypes,
    words: (usize, usize, usize),
    sense: usize,
    rng: &mut SplitMix64,
) -> Result<ImageFeatures> {
    let (p, c) = (cfg.grid_positions, cfg.grid_dim);
    let mut grid = Tensor::zeros(&[p, c]);
    for cell in 0..p {
        let proto = match cell {
            0 => Some(&protos.subjects[words.0]),
            1 => Some(&protos.verbs[words.1]),
            2 => Some(&protos.adjectives[words.2]),
            _ => None,
        };
        for ch in 0..c {
            let v = if ch == DESIGNATED_CHANNEL {
                sense_value(sense)
            } else {
                proto.map_or(0.0, |pr| pr[ch]) + cfg.noise * rng.normal()
            };
            grid.set(cell, ch, v);
        }
    }
    let grid = round_to_f32(&grid);
    let f = ImageFeatures::from_grid(grid)?;
    Ok(ImageFeatures {
        pooled: round_to_f32(&f.pooled),
        grid: f.grid,
    })
}

/// Generates `n_train` + `n_test` captioned examples and their features.
/// Senses alternate within each split, so their counts differ by at most one.
pub fn generate_toy_task(
    n_train: usize,
    n_test: usize,
    seed: u64,
    cfg: &ToyConfig,
) -> Result<ToyTask> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::Config("toy task sizes must be at least 1".into()));
    }
    if cfg.grid_positions == 0 || cfg.grid_dim < 2 {
        return Err(Error::Config(
            "toy grid needs at least one cell and two channels".into(),
        ));
    }
    let mut root = SplitMix64::new(seed);
    let mut proto_rng = root.fork(1);
    let mut pick_rng = root.fork(2);
    let mut noise_rng = root.fork(3);
    let protos = Prototypes::new(cfg.grid_dim, &mut proto_rng);
    let mut features = FeatureFile::new(cfg.grid_positions, cfg.grid_dim, cfg.grid_dim);
    let mut split = |name: &str, n: usize| -> Result<Vec<Example>> {
        let mut senses: Vec<usize> = (0..n).map(|i| i % 2).collect();
        pick_rng.shuffle(&mut senses);
        let mut out = Vec::with_capacity(n);
        for (i, &sense) in senses.iter().enumerate() {
            let s = pick_rng.below(SUBJECTS.len());
            let v = pick_rng.below(VERBS.len());
            let a = pick_rng.below(ADJECTIVES.len());
            let (source, target_prefix) = caption(s, v, a);
            let id = format!("{name}-{i:06}");
            let feats = make_features(cfg, &protos, (s, v, a), sense, &mut noise_rng)?;
            features.insert(id.clone(), feats)?;
            out.push(Example {
                id: id.clone(),
                source,
                target: Some(format!("{target_prefix} {}", SENSES[sense])),
                image_ref: Some(id),
            });
        }
        Ok(out)
    };
    let train = split("train", n_train)?;
    let test = split("test", n_test)?;
    Ok(ToyTask {
        train,
        test,
        features,
    })
}
