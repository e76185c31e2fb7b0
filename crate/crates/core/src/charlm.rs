//! Character-level GRU language model and the perplexity filter that picks
//! in-domain-looking sentences out of a larger pool.
//!
//! The recurrent cell is a GRU. With input embedding `x` and previous state
//! `h` (both row vectors):
//!
//! ```text
//! z  = σ(x·W_z + h·U_z + b_z)
//! r  = σ(x·W_r + h·U_r + b_r)
//! h̃  = tanh(x·W_h + (r ⊙ h)·U_h + b_h)
//! h' = (1 − z) ⊙ h + z ⊙ h̃
//! ```
//!
//! The output distribution is `softmax(h'·W_o + b_o)`. Perplexity is
//! `exp` of the mean next-character NLL over the sentence plus its end
//! marker. A backward model reads sentences reversed; the bidirectional score
//! is the geometric mean of both perplexities.

use std::fmt::Write as _;
use std::path::Path;

use log::info;

use crate::data::normalize;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::tape::{log_softmax, softmax_rows, Tape, Var};
use crate::tensor::Tensor;
use crate::training::{clip_global_norm, AdamConfig, CheckpointArchive, OptimizerState};

pub const CHAR_BOS: usize = 0;
pub const CHAR_EOS: usize = 1;
pub const CHAR_UNK: usize = 2;
const N_SPECIAL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Direction {
    #[default]
    Forward,
    Backward,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CharLmConfig {
    pub hidden: usize,
    pub embed: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub direction: Direction,
    pub seed: u64,
}

impl Default for CharLmConfig {
    fn default() -> Self {
        CharLmConfig {
            hidden: 64,
            embed: 16,
            batch_size: 32,
            steps: 300,
            lr: 0.01,
            clip_norm: 1.0,
            direction: Direction::Forward,
            seed: 1,
        }
    }
}

/// Character inventory: three specials then every corpus character in
/// code-point order.
#[derive(Clone, Debug, PartialEq)]
pub struct CharVocab {
    chars: Vec<char>,
}

impl CharVocab {
    pub fn from_corpus<S: AsRef<str>>(corpus: &[S]) -> Self {
        let mut chars: Vec<char> = corpus
            .iter()
            .flat_map(|s| normalize(s.as_ref()).chars().collect::<Vec<_>>())
            .collect();
        chars.sort_unstable();
        chars.dedup();
        CharVocab { chars }
    }

    pub fn len(&self) -> usize {
        self.chars.len() + N_SPECIAL
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> usize {
        self.chars
            .binary_search(&c)
            .map_or(CHAR_UNK, |i| i + N_SPECIAL)
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }
}

#[derive(Clone, Debug)]
struct Gru {
    w: [ParamId; 3],
    u: [ParamId; 3],
    b: [ParamId; 3],
}

#[derive(Clone, Debug)]
pub struct CharLm {
    vocab: CharVocab,
    direction: Direction,
    hidden: usize,
    embed: usize,
    params: ParamStore,
    embedding: ParamId,
    gru: Gru,
    w_out: ParamId,
    b_out: ParamId,
}

impl CharLm {
    /// Untrained model; the output projection starts at zero, so every
    /// prediction is uniform over the vocabulary.
    pub fn new(
        vocab: CharVocab,
        hidden: usize,
        embed: usize,
        direction: Direction,
        seed: u64,
    ) -> Result<Self> {
        if hidden == 0 || embed == 0 {
            return Err(Error::Config("character LM sizes must be positive".into()));
        }
        let mut rng = SplitMix64::new(seed);
        let v = vocab.len();
        let mut params = ParamStore::new();
        let mut emb = Tensor::zeros(&[v, embed]);
        emb.data_mut()
            .iter_mut()
            .for_each(|x| *x = 0.1 * rng.normal());
        let embedding = params.add("charlm.embedding", emb);
        let gates = ["z", "r", "h"];
        let w = gates.map(|g| {
            params.add(
                format!("charlm.w_{g}"),
                Tensor::glorot(embed, hidden, &mut rng),
            )
        });
        let u = gates.map(|g| {
            params.add(
                format!("charlm.u_{g}"),
                Tensor::glorot(hidden, hidden, &mut rng),
            )
        });
        let b = gates.map(|g| params.add(format!("charlm.b_{g}"), Tensor::zeros(&[hidden])));
        let w_out = params.add("charlm.w_out", Tensor::zeros(&[hidden, v]));
        let b_out = params.add("charlm.b_out", Tensor::zeros(&[v]));
        Ok(CharLm {
            vocab,
            direction,
            hidden,
            embed,
            params,
            embedding,
            gru: Gru { w, u, b },
            w_out,
            b_out,
        })
    }

    pub fn vocab(&self) -> &CharVocab {
        &self.vocab
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Input ids (BOS then the characters) and target ids (the characters
    /// then EOS), in reading order for this model's direction.
    fn sequence(&self, sentence: &str) -> (Vec<usize>, Vec<usize>) {
        let mut ids: Vec<usize> = normalize(sentence)
            .chars()
            .map(|c| self.vocab.id(c))
            .collect();
        if self.direction == Direction::Backward {
            ids.reverse();
        }
        let mut input = vec![CHAR_BOS];
        input.extend_from_slice(&ids);
        ids.push(CHAR_EOS);
        (input, ids)
    }

    /// GRU over a padded batch; returns the summed NLL and the number of
    /// scored characters.
    fn batch_loss(
        &self,
        tape: &mut Tape<'_>,
        vars: &[Var],
        batch: &[(Vec<usize>, Vec<usize>)],
    ) -> Result<(Var, usize)> {
        let v = |id: ParamId| vars[id.index()];
        let rows = batch.len();
        let steps = batch.iter().map(|(i, _)| i.len()).max().unwrap_or(0);
        let mut h = tape.constant(Tensor::zeros(&[rows, self.hidden]));
        let mut total: Option<Var> = None;
        let mut count = 0;
        for t in 0..steps {
            let inputs: Vec<usize> = batch
                .iter()
                .map(|(i, _)| i.get(t).copied().unwrap_or(CHAR_EOS))
                .collect();
            let targets: Vec<Option<usize>> =
                batch.iter().map(|(_, o)| o.get(t).copied()).collect();
            let x = tape.gather(v(self.embedding), &inputs)?;
            h = self.cell(tape, &v, x, h)?;
            let logits = tape.matmul(h, v(self.w_out))?;
            let logits = tape.add_row(logits, v(self.b_out))?;
            count += targets.iter().flatten().count();
            let nll = tape.cross_entropy_sum(logits, &targets)?;
            total = Some(match total {
                None => nll,
                Some(acc) => tape.add(acc, nll)?,
            });
        }
        let total = total.ok_or_else(|| Error::Contract("empty character batch".into()))?;
        Ok((total, count))
    }

    fn cell(
        &self,
        tape: &mut Tape<'_>,
        v: &impl Fn(ParamId) -> Var,
        x: Var,
        h: Var,
    ) -> Result<Var> {
        let g = &self.gru;
        let gate = |tape: &mut Tape<'_>, k: usize, state: Var| -> Result<Var> {
            let a = tape.matmul(x, v(g.w[k]))?;
            let b = tape.matmul(state, v(g.u[k]))?;
            let s = tape.add(a, b)?;
            tape.add_row(s, v(g.b[k]))
        };
        let z = gate(tape, 0, h)?;
        let z = tape.sigmoid(z)?;
        let r = gate(tape, 1, h)?;
        let r = tape.sigmoid(r)?;
        let rh = tape.mul(r, h)?;
        let cand = gate(tape, 2, rh)?;
        let cand = tape.tanh(cand)?;
        let keep = tape.affine(z, -1.0, 1.0)?;
        let old = tape.mul(keep, h)?;
        let new = tape.mul(z, cand)?;
        tape.add(old, new)
    }

    /// Mean NLL per character over `sentences`. `vars` are the model's
    /// parameters as tape nodes, in store order.
    pub fn sequence_loss(
        &self,
        tape: &mut Tape<'_>,
        vars: &[Var],
        sentences: &[&str],
    ) -> Result<Var> {
        if vars.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} vars for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        let batch: Vec<_> = sentences.iter().map(|s| self.sequence(s)).collect();
        let (total, count) = self.batch_loss(tape, vars, &batch)?;
        tape.scale(total, 1.0 / count as f64)
    }

    /// Predicted distribution before every target position (the characters,
    /// then EOS), in this model's reading order.
    pub fn step_distributions(&self, sentence: &str) -> Result<Vec<Vec<f64>>> {
        let (input, _) = self.sequence(sentence);
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let v = |id: ParamId| vars[id];
        let mut h = tape.constant(Tensor::zeros(&[1, self.hidden]));
        let mut out = Vec::with_capacity(input.len());
        for &c in &input {
            let x = tape.gather(v(self.embedding), &[c])?;
            h = self.cell(&mut tape, &v, x, h)?;
            let logits = tape.matmul(h, v(self.w_out))?;
            let logits = tape.add_row(logits, v(self.b_out))?;
            out.push(softmax_rows(tape.value(logits))?.into_data());
        }
        Ok(out)
    }

    /// Per-character perplexity, end marker included. Unknown characters
    /// score as the UNK character.
    pub fn perplexity(&self, sentence: &str) -> Result<f64> {
        let (input, target) = self.sequence(sentence);
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let v = |id: ParamId| vars[id];
        let mut h = tape.constant(Tensor::zeros(&[1, self.hidden]));
        let mut nll = 0.0;
        for (&c, &t) in input.iter().zip(&target) {
            let x = tape.gather(v(self.embedding), &[c])?;
            h = self.cell(&mut tape, &v, x, h)?;
            let logits = tape.matmul(h, v(self.w_out))?;
            let logits = tape.add_row(logits, v(self.b_out))?;
            nll -= log_softmax(tape.value(logits).row(0))[t];
        }
        Ok((nll / target.len() as f64).exp())
    }

    pub fn to_archive(&self) -> Result<CheckpointArchive> {
        let chars: String = self.vocab.chars.iter().collect();
        let meta = vec![
            ("kind".to_string(), "charlm".to_string()),
            (
                "chars".to_string(),
                serde_json::to_string(&chars).map_err(|e| Error::Format(e.to_string()))?,
            ),
            (
                "direction".to_string(),
                format!("{:?}", self.direction).to_lowercase(),
            ),
            ("hidden".to_string(), self.hidden.to_string()),
            ("embed".to_string(), self.embed.to_string()),
        ];
        Ok(CheckpointArchive::from_params(&self.params, meta))
    }

    pub fn from_archive(archive: &CheckpointArchive) -> Result<Self> {
        let get = |k: &str| {
            archive
                .meta_value(k)
                .ok_or_else(|| Error::Format(format!("character LM archive lacks `{k}`")))
        };
        if get("kind")? != "charlm" {
            return Err(Error::Format("archive is not a character LM".into()));
        }
        let chars: String =
            serde_json::from_str(get("chars")?).map_err(|e| Error::Format(e.to_string()))?;
        let mut chars: Vec<char> = chars.chars().collect();
        chars.sort_unstable();
        chars.dedup();
        let direction = match get("direction")? {
            "forward" => Direction::Forward,
            "backward" => Direction::Backward,
            other => return Err(Error::Format(format!("unknown direction {other}"))),
        };
        let num = |k: &str| {
            get(k)?
                .parse::<usize>()
                .map_err(|e| Error::Format(format!("{k}: {e}")))
        };
        let mut lm = CharLm::new(
            CharVocab { chars },
            num("hidden")?,
            num("embed")?,
            direction,
            0,
        )?;
        archive.apply_to(&mut lm.params)?;
        Ok(lm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        CharLm::from_archive(&CheckpointArchive::load(path)?)
    }
}

/// Trains a character LM with Adam at a constant learning rate. Returns the
/// model and the per-step training loss.
pub fn charlm_train<S: AsRef<str>>(
    corpus: &[S],
    config: &CharLmConfig,
) -> Result<(CharLm, Vec<f64>)> {
    let sentences: Vec<&str> = corpus
        .iter()
        .map(AsRef::as_ref)
        .filter(|s| !s.trim().is_empty())
        .collect();
    if sentences.is_empty() {
        return Err(Error::Config(
            "character LM needs a non-empty corpus".into(),
        ));
    }
    if config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(Error::Config(
            "character LM batch size and learning rate must be positive".into(),
        ));
    }
    let mut lm = CharLm::new(
        CharVocab::from_corpus(&sentences),
        config.hidden,
        config.embed,
        config.direction,
        config.seed,
    )?;
    let mut rng = SplitMix64::new(config.seed).fork(1);
    let mut optimizer = OptimizerState::new(
        &lm.params,
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        },
    );
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        if order.len() < config.batch_size.min(sentences.len()) {
            let mut fresh: Vec<usize> = (0..sentences.len()).collect();
            rng.shuffle(&mut fresh);
            order.extend(fresh);
        }
        let take = config.batch_size.min(sentences.len());
        let batch: Vec<&str> = order.drain(..take).map(|i| sentences[i]).collect();
        let mut grads = {
            let mut tape = Tape::new();
            let vars = lm.params.bind(&mut tape, true);
            let loss = lm.sequence_loss(&mut tape, vars.as_slice(), &batch)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    step,
                    last_good: None,
                });
            }
            losses.push(value);
            let g = tape.backward(loss)?;
            vars.as_slice()
                .iter()
                .map(|&v| g.get(v))
                .collect::<Vec<_>>()
        };
        clip_global_norm(&mut grads, config.clip_norm);
        optimizer.step(&mut lm.params, &grads, config.lr)?;
        if step % 100 == 0 {
            info!("charlm step {step}: loss {:.4}", losses[step - 1]);
        }
    }
    Ok((lm, losses))
}

/// Anything that assigns a per-character perplexity to a sentence.
pub trait SentenceScorer {
    fn perplexity(&self, sentence: &str) -> Result<f64>;
}

impl SentenceScorer for CharLm {
    fn perplexity(&self, sentence: &str) -> Result<f64> {
        CharLm::perplexity(self, sentence)
    }
}

/// Forward and backward models scored by the geometric mean of their
/// perplexities.
pub struct Bidirectional {
    pub forward: CharLm,
    pub backward: CharLm,
}

impl SentenceScorer for Bidirectional {
    fn perplexity(&self, sentence: &str) -> Result<f64> {
        Ok((self.forward.perplexity(sentence)? * self.backward.perplexity(sentence)?).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterDecision {
    pub sentence: String,
    pub perplexity: f64,
    pub kept: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<String>,
    pub decisions: Vec<FilterDecision>,
}

impl FilterOutcome {
    /// `sentence_index\tperplexity\tkept` lines.
    pub fn report_tsv(&self) -> String {
        let mut out = String::from("sentence_index\tperplexity\tkept\n");
        for (i, d) in self.decisions.iter().enumerate() {
            let _ = writeln!(out, "{i}\t{:.6}\t{}", d.perplexity, d.kept);
        }
        out
    }

    pub fn summary(&self) -> String {
        format!("kept {}/{}", self.kept.len(), self.decisions.len())
    }
}

/// Keeps sentences whose perplexity is at most `threshold`, in input order.
pub fn filter_corpus<S: AsRef<str>>(
    scorer: &dyn SentenceScorer,
    sentences: &[S],
    threshold: f64,
) -> Result<FilterOutcome> {
    if !(threshold >= 1.0) {
        return Err(Error::Config(format!(
            "perplexity threshold must be at least 1, got {threshold}"
        )));
    }
    let mut kept = Vec::new();
    let mut decisions = Vec::with_capacity(sentences.len());
    for s in sentences {
        let s = s.as_ref();
        let perplexity = scorer.perplexity(s)?;
        let keep = perplexity <= threshold;
        if keep {
            kept.push(s.to_string());
        }
        decisions.push(FilterDecision {
            sentence: s.to_string(),
            perplexity,
            kept: keep,
        });
    }
    Ok(FilterOutcome { kept, decisions })
}
