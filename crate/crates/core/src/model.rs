//! The translation network: a Transformer encoder, a decoder whose layers can
//! carry an extra cross-attention over image grid features, and the
//! imagination head that regresses pooled image features from encoder states.
//!
//! Decoder layer, multimodal mode (post-norm):
//!
//! ```text
//! x ─ masked self-attn ─ add&norm ─ textual cross-attn ─ add&norm ─┬─ visual cross-attn ─ add&norm ─ FFN ─ add&norm
//!                                                        (C_txt) ──┘      keys/values: F·P
//! ```

use std::rc::Rc;
use std::sync::Arc;

use crate::attention::{
    multi_head_attention_with_weights, AttentionMask, MultiHeadParams, ScaleMode,
};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, ParamVars};
use crate::rng::SplitMix64;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ModelMode {
    #[default]
    Textual,
    Multimodal,
}

/// How encoder states are pooled before the imagination regressor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Pooling {
    #[default]
    Sum,
    Mean,
}

/// Where layer normalisation sits relative to the residual connection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormPlacement {
    /// `norm(x + sublayer(x))`.
    #[default]
    Post,
    /// `x + sublayer(norm(x))`, with a final norm after each stack.
    Pre,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub image_positions: usize,
    pub image_dim: usize,
    pub pooled_dim: usize,
    pub imag_hidden: usize,
    pub margin: f64,
    pub scale_mode: ScaleMode,
    pub mode: ModelMode,
    pub imagination: bool,
    pub imagination_weight: f64,
    pub pooling: Pooling,
    pub norm: NormPlacement,
    pub dropout: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            d: 64,
            d_ff: 128,
            heads: 4,
            vocab_size: 64,
            max_len: 64,
            image_positions: 4,
            image_dim: 16,
            pooled_dim: 16,
            imag_hidden: 64,
            margin: 0.1,
            scale_mode: ScaleMode::PerHead,
            mode: ModelMode::Textual,
            imagination: false,
            imagination_weight: 1.0,
            pooling: Pooling::Sum,
            norm: NormPlacement::Post,
            dropout: 0.1,
            ln_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d", self.d),
            ("d_ff", self.d_ff),
            ("heads", self.heads),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("image_positions", self.image_positions),
            ("image_dim", self.image_dim),
            ("pooled_dim", self.pooled_dim),
            ("imag_hidden", self.imag_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d={} is not divisible by heads={}",
                self.d, self.heads
            )));
        }
        if self.d < 2 {
            return Err(Error::Config(
                "d must be at least 2 for layer normalisation".into(),
            ));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::Config(format!(
                "margin must be non-negative, got {}",
                self.margin
            )));
        }
        if !(self.imagination_weight >= 0.0) {
            return Err(Error::Config(
                "imagination weight must be non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.vocab_size <= UNK {
            return Err(Error::Config(
                "vocabulary must hold the four special tokens".into(),
            ));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d / self.heads
    }
}

/// Grid features `F` and pooled vector `y` for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    pub grid: Tensor,
    pub pooled: Tensor,
}

impl ImageFeatures {
    pub fn new(grid: Tensor, pooled: Tensor) -> Result<Self> {
        if grid.rank() != 2 || pooled.rank() != 1 {
            return Err(Error::Dimension(
                "image grid must be a matrix and pooled a vector".into(),
            ));
        }
        if !grid.is_finite() || !pooled.is_finite() {
            return Err(Error::Input("non-finite image features".into()));
        }
        Ok(ImageFeatures { grid, pooled })
    }

    /// Builds features whose pooled vector is the mean of the grid rows.
    pub fn from_grid(grid: Tensor) -> Result<Self> {
        let (p, c) = (grid.rows(), grid.cols());
        let mut pooled = vec![0.0; c];
        for r in 0..p {
            for (o, v) in pooled.iter_mut().zip(grid.row(r)) {
                *o += v;
            }
        }
        pooled.iter_mut().for_each(|v| *v /= p as f64);
        ImageFeatures::new(grid, Tensor::vector(pooled))
    }
}

/// One encoded training or evaluation item.
#[derive(Clone, Debug)]
pub struct Sample {
    pub src: Vec<usize>,
    pub tgt: Option<Vec<usize>>,
    pub image: Option<Arc<ImageFeatures>>,
}

#[derive(Clone, Debug)]
struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl FeedForward {
    fn init(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        d_ff: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        FeedForward {
            w1: store.add(format!("{prefix}.w1"), Tensor::glorot(d, d_ff, rng)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[d_ff])),
            w2: store.add(format!("{prefix}.w2"), Tensor::glorot(d_ff, d, rng)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[d])),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn init(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        Norm {
            gain: store.add(format!("{prefix}.gain"), Tensor::ones(&[d])),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d])),
        }
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    self_attn: MultiHeadParams,
    ffn: FeedForward,
    ln_attn: Norm,
    ln_ffn: Norm,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: MultiHeadParams,
    cross_attn: MultiHeadParams,
    visual: Option<(MultiHeadParams, Norm)>,
    ffn: FeedForward,
    ln_self: Norm,
    ln_cross: Norm,
    ln_ffn: Norm,
}

#[derive(Clone, Debug)]
struct ImaginationHead {
    w1: ParamId,
    w2: ParamId,
}

/// Intermediate states of one decoder layer, exposed for inspection.
#[derive(Clone, Debug)]
pub struct DecoderLayerTrace {
    /// Output of the masked self-attention sub-layer (after add & norm).
    pub c_self: Tensor,
    /// Output of the textual cross-attention sub-layer; the visual queries.
    pub c_txt: Tensor,
    /// Raw visual context vectors, before the residual connection.
    pub c_img: Option<Tensor>,
    pub ffn_out: Tensor,
}

#[derive(Clone, Copy, Debug)]
struct TraceVars {
    c_self: Var,
    c_txt: Var,
    c_img: Option<Var>,
    ffn_out: Var,
}

/// Per-part values of [`Model::joint_loss`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossParts {
    /// Sum of per-example mean token NLLs.
    pub translation: f64,
    /// Sum of per-example hinge losses, before the mixing weight.
    pub imagination: f64,
    pub n_translation: usize,
    pub n_imagination: usize,
}

/// Dropout state for one forward pass.
pub struct Dropout {
    rate: f64,
    base: Option<SplitMix64>,
    rng: Option<SplitMix64>,
}

impl Dropout {
    pub fn disabled() -> Self {
        Dropout {
            rate: 0.0,
            base: None,
            rng: None,
        }
    }

    pub fn new(rate: f64, rng: SplitMix64) -> Self {
        Dropout {
            rate,
            base: Some(rng.clone()),
            rng: Some(rng),
        }
    }

    /// Switches to the mask stream of batch example `index`, so the masks one
    /// example sees do not depend on which other examples were encoded.
    pub fn begin_example(&mut self, index: usize) {
        if let Some(base) = &self.base {
            self.rng = Some(base.clone().fork(index as u64));
        }
    }

    fn apply(&mut self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        match &mut self.rng {
            Some(rng) if self.rate > 0.0 => {
                let keep = 1.0 / (1.0 - self.rate);
                let n = tape.value(x).len();
                let mask: Vec<f64> = (0..n)
                    .map(|_| {
                        if rng.next_f64() < self.rate {
                            0.0
                        } else {
                            keep
                        }
                    })
                    .collect();
                tape.mul_const(x, Rc::new(mask))
            }
            _ => Ok(x),
        }
    }
}

/// A tape with the model's parameters bound to it.
pub struct Graph<'m> {
    pub tape: Tape<'m>,
    pub vars: ParamVars,
    pub dropout: Dropout,
}

impl<'m> Graph<'m> {
    /// Gradients for every parameter, in store order.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.as_slice().iter().map(|&v| grads.get(v)).collect()
    }
}

/// Sinusoidal position table `[len × d]`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, d]);
    for pos in 0..len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            t.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    embedding: ParamId,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    image_projection: Option<ParamId>,
    imagination: Option<ImaginationHead>,
    final_norms: Option<(Norm, Norm)>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(seed);
        let mut store = ParamStore::new();
        let d = config.d;
        let emb_std = (d as f64).powf(-0.5);
        let emb_data = (0..config.vocab_size * d)
            .map(|_| rng.normal() * emb_std)
            .collect();
        let embedding = store.add(
            "embedding",
            Tensor::new(vec![config.vocab_size, d], emb_data)?,
        );

        let mut encoder = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("encoder.{l}");
            encoder.push(EncoderLayer {
                self_attn: MultiHeadParams::init(
                    &mut store,
                    &format!("{p}.self_attn"),
                    d,
                    config.heads,
                    &mut rng,
                )?,
                ffn: FeedForward::init(&mut store, &format!("{p}.ffn"), d, config.d_ff, &mut rng),
                ln_attn: Norm::init(&mut store, &format!("{p}.ln_attn"), d),
                ln_ffn: Norm::init(&mut store, &format!("{p}.ln_ffn"), d),
            });
        }
        let multimodal = config.mode == ModelMode::Multimodal;
        let mut decoder = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("decoder.{l}");
            let self_attn = MultiHeadParams::init(
                &mut store,
                &format!("{p}.self_attn"),
                d,
                config.heads,
                &mut rng,
            )?;
            let cross_attn = MultiHeadParams::init(
                &mut store,
                &format!("{p}.cross_attn"),
                d,
                config.heads,
                &mut rng,
            )?;
            let visual = if multimodal {
                let attn = MultiHeadParams::init(
                    &mut store,
                    &format!("{p}.visual_attn"),
                    d,
                    config.heads,
                    &mut rng,
                )?;
                Some((attn, Norm::init(&mut store, &format!("{p}.ln_visual"), d)))
            } else {
                None
            };
            decoder.push(DecoderLayer {
                self_attn,
                cross_attn,
                visual,
                ffn: FeedForward::init(&mut store, &format!("{p}.ffn"), d, config.d_ff, &mut rng),
                ln_self: Norm::init(&mut store, &format!("{p}.ln_self"), d),
                ln_cross: Norm::init(&mut store, &format!("{p}.ln_cross"), d),
                ln_ffn: Norm::init(&mut store, &format!("{p}.ln_ffn"), d),
            });
        }
        let final_norms = (config.norm == NormPlacement::Pre).then(|| {
            (
                Norm::init(&mut store, "encoder.ln_final", d),
                Norm::init(&mut store, "decoder.ln_final", d),
            )
        });
        let image_projection = multimodal.then(|| {
            store.add(
                "image_projection",
                Tensor::glorot(config.image_dim, d, &mut rng),
            )
        });
        let imagination = config.imagination.then(|| ImaginationHead {
            w1: store.add(
                "imagination.w1",
                Tensor::glorot(config.imag_hidden, d, &mut rng),
            ),
            w2: store.add(
                "imagination.w2",
                Tensor::glorot(config.pooled_dim, config.imag_hidden, &mut rng),
            ),
        });
        Ok(Model {
            config,
            store,
            embedding,
            encoder,
            decoder,
            image_projection,
            imagination,
            final_norms,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn is_multimodal(&self) -> bool {
        self.config.mode == ModelMode::Multimodal
    }

    pub fn has_imagination(&self) -> bool {
        self.imagination.is_some()
    }

    /// Names of parameters used only when decoding (not reached from the
    /// encoder or imagination head).
    pub fn is_decoder_param(name: &str) -> bool {
        name.starts_with("decoder.") || name == "image_projection"
    }

    pub fn is_imagination_param(name: &str) -> bool {
        name.starts_with("imagination.")
    }

    /// Copies every parameter that `other` has under the same name and shape.
    /// Returns how many were copied.
    pub fn copy_shared_params(&mut self, other: &Model) -> usize {
        let mut copied = 0;
        for (name, t) in other.store.iter() {
            if let Some(dst) = self.store.by_name_mut(name) {
                if dst.shape() == t.shape() {
                    dst.clone_from(t);
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Binds parameters to a fresh tape.
    pub fn graph(&self, requires_grad: bool, dropout: Dropout) -> Graph<'_> {
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape, requires_grad);
        Graph {
            tape,
            vars,
            dropout,
        }
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if let Some(&id) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Vocabulary {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn embed(&self, g: &mut Graph<'_>, ids: &[usize]) -> Result<Var> {
        let x = g.tape.gather(g.vars[self.embedding], ids)?;
        let x = g.tape.scale(x, (self.config.d as f64).sqrt())?;
        let x = g
            .tape
            .add_const(x, &positional_encoding(ids.len(), self.config.d))?;
        g.dropout.apply(&mut g.tape, x)
    }

    fn norm(&self, g: &mut Graph<'_>, x: Var, n: Norm) -> Result<Var> {
        g.tape
            .layer_norm(x, g.vars[n.gain], g.vars[n.bias], self.config.ln_eps)
    }

    fn feed_forward(&self, g: &mut Graph<'_>, x: Var, f: &FeedForward) -> Result<Var> {
        let h = g.tape.matmul(x, g.vars[f.w1])?;
        let h = g.tape.add_row(h, g.vars[f.b1])?;
        let h = g.tape.relu(h)?;
        let o = g.tape.matmul(h, g.vars[f.w2])?;
        g.tape.add_row(o, g.vars[f.b2])
    }

    fn attend(
        &self,
        g: &mut Graph<'_>,
        q: Var,
        kv: Var,
        params: &MultiHeadParams,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let (out, _) = multi_head_attention_with_weights(
            &mut g.tape,
            q,
            kv,
            kv,
            params,
            &g.vars,
            self.config.scale_mode,
            mask,
        )?;
        Ok(out)
    }

    /// Residual sub-layer wrapper. Returns `(output, raw sub-layer output)`.
    fn sublayer(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        norm: Norm,
        f: impl FnOnce(&Self, &mut Graph<'_>, Var) -> Result<Var>,
    ) -> Result<(Var, Var)> {
        match self.config.norm {
            NormPlacement::Post => {
                let y = f(self, g, x)?;
                let yd = g.dropout.apply(&mut g.tape, y)?;
                let s = g.tape.add(x, yd)?;
                Ok((self.norm(g, s, norm)?, y))
            }
            NormPlacement::Pre => {
                let xn = self.norm(g, x, norm)?;
                let y = f(self, g, xn)?;
                let yd = g.dropout.apply(&mut g.tape, y)?;
                Ok((g.tape.add(x, yd)?, y))
            }
        }
    }

    /// Encoder states `[len × d]` for `src`.
    pub fn encode(&self, g: &mut Graph<'_>, src: &[usize]) -> Result<Var> {
        if src.is_empty() || src.len() > self.config.max_len {
            return Err(Error::Input(format!(
                "source length {} outside 1..={}",
                src.len(),
                self.config.max_len
            )));
        }
        self.check_ids(src)?;
        let mut x = self.embed(g, src)?;
        for layer in &self.encoder {
            (x, _) = self.sublayer(g, x, layer.ln_attn, |m, g, x| {
                m.attend(g, x, x, &layer.self_attn, None)
            })?;
            (x, _) = self.sublayer(g, x, layer.ln_ffn, |m, g, x| {
                m.feed_forward(g, x, &layer.ffn)
            })?;
        }
        if let Some((enc_final, _)) = self.final_norms {
            x = self.norm(g, x, enc_final)?;
        }
        Ok(x)
    }

    /// Projects grid features into model space: `F·P`, `[positions × d]`.
    pub fn project_image(&self, g: &mut Graph<'_>, image: &ImageFeatures) -> Result<Var> {
        let proj = self.image_projection.ok_or_else(|| {
            Error::Contract("image projection requested on a textual model".into())
        })?;
        if image.grid.cols() != self.config.image_dim {
            return Err(Error::Input(format!(
                "image grid has {} features per cell, model expects {}",
                image.grid.cols(),
                self.config.image_dim
            )));
        }
        let grid = g.tape.constant(image.grid.clone());
        g.tape.matmul(grid, g.vars[proj])
    }

    /// Decoder hidden states `[len × d]` for a target prefix.
    ///
    /// `image` must be the projected grid (see [`Model::project_image`]) for
    /// multimodal models and `None` for textual ones.
    pub fn decode(
        &self,
        g: &mut Graph<'_>,
        prefix: &[usize],
        enc: Var,
        image: Option<Var>,
    ) -> Result<Var> {
        self.decode_traced(g, prefix, enc, image).map(|(h, _)| h)
    }

    fn decode_traced(
        &self,
        g: &mut Graph<'_>,
        prefix: &[usize],
        enc: Var,
        image: Option<Var>,
    ) -> Result<(Var, Vec<TraceVars>)> {
        if prefix.is_empty() {
            return Err(Error::Contract("empty target prefix".into()));
        }
        if prefix.len() > self.config.max_len {
            return Err(Error::Contract(format!(
                "target prefix of {} exceeds max_len {}",
                prefix.len(),
                self.config.max_len
            )));
        }
        self.check_ids(prefix)?;
        match (self.is_multimodal(), image.is_some()) {
            (true, false) => {
                return Err(Error::Input(
                    "multimodal decoder needs image features".into(),
                ))
            }
            (false, true) => {
                return Err(Error::Contract(
                    "textual decoder was given image features".into(),
                ))
            }
            _ => {}
        }
        let mask = AttentionMask::causal(prefix.len());
        let mut x = self.embed(g, prefix)?;
        let mut traces = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let (c_self, _) = self.sublayer(g, x, layer.ln_self, |m, g, x| {
                m.attend(g, x, x, &layer.self_attn, Some(&mask))
            })?;
            let (c_txt, _) = self.sublayer(g, c_self, layer.ln_cross, |m, g, q| {
                m.attend(g, q, enc, &layer.cross_attn, None)
            })?;
            let mut h = c_txt;
            let mut c_img = None;
            if let Some((visual, ln_visual)) = &layer.visual {
                let feats = image.expect("checked above");
                let (out, raw) = self.sublayer(g, c_txt, *ln_visual, |m, g, q| {
                    m.attend(g, q, feats, visual, None)
                })?;
                h = out;
                c_img = Some(raw);
            }
            let (ffn_out, _) = self.sublayer(g, h, layer.ln_ffn, |m, g, x| {
                m.feed_forward(g, x, &layer.ffn)
            })?;
            traces.push(TraceVars {
                c_self,
                c_txt,
                c_img,
                ffn_out,
            });
            x = ffn_out;
        }
        if let Some((_, dec_final)) = self.final_norms {
            x = self.norm(g, x, dec_final)?;
        }
        Ok((x, traces))
    }

    /// Output logits through the transposed embedding: `hidden · Eᵀ`.
    pub fn logits(&self, g: &mut Graph<'_>, hidden: Var) -> Result<Var> {
        g.tape.matmul_bt(hidden, g.vars[self.embedding])
    }

    /// Predicted pooled image vector `[1 × n]` from encoder states.
    pub fn imagine(&self, g: &mut Graph<'_>, enc: Var) -> Result<Var> {
        let head = self
            .imagination
            .as_ref()
            .ok_or_else(|| Error::Contract("model has no imagination head".into()))?;
        let mut pooled = g.tape.sum_rows(enc)?;
        if self.config.pooling == Pooling::Mean {
            let n = g.tape.value(enc).rows();
            pooled = g.tape.scale(pooled, 1.0 / n as f64)?;
        }
        let hidden = g.tape.matmul_bt(pooled, g.vars[head.w1])?;
        let hidden = g.tape.relu(hidden)?;
        g.tape.matmul_bt(hidden, g.vars[head.w2])
    }

    /// Encoder states as a plain tensor (no dropout).
    pub fn encode_states(&self, src: &[usize]) -> Result<Tensor> {
        let mut g = self.graph(false, Dropout::disabled());
        let enc = self.encode(&mut g, src)?;
        Ok(g.tape.value(enc).clone())
    }

    /// Next-token logits after `prefix` for a textual decoder.
    pub fn decode_step_textual(&self, prefix: &[usize], enc_states: &Tensor) -> Result<Vec<f64>> {
        let mut g = self.graph(false, Dropout::disabled());
        let enc = g.tape.constant(enc_states.clone());
        let h = self.decode(&mut g, prefix, enc, None)?;
        let logits = self.logits(&mut g, h)?;
        let t = g.tape.value(logits);
        Ok(t.row(t.rows() - 1).to_vec())
    }

    /// Next-token logits after `prefix` through the doubly-attentive decoder,
    /// with per-layer traces over the whole prefix.
    pub fn decode_step_multimodal(
        &self,
        prefix: &[usize],
        enc_states: &Tensor,
        image: &ImageFeatures,
    ) -> Result<(Vec<f64>, Vec<DecoderLayerTrace>)> {
        if !self.is_multimodal() {
            return Err(Error::Contract(
                "decode_step_multimodal on a textual model".into(),
            ));
        }
        let mut g = self.graph(false, Dropout::disabled());
        let enc = g.tape.constant(enc_states.clone());
        let img = self.project_image(&mut g, image)?;
        let (h, traces) = self.decode_traced(&mut g, prefix, enc, Some(img))?;
        let logits = self.logits(&mut g, h)?;
        let t = g.tape.value(logits);
        let traces = traces
            .iter()
            .map(|tv| DecoderLayerTrace {
                c_self: g.tape.value(tv.c_self).clone(),
                c_txt: g.tape.value(tv.c_txt).clone(),
                c_img: tv.c_img.map(|v| g.tape.value(v).clone()),
                ffn_out: g.tape.value(tv.ffn_out).clone(),
            })
            .collect();
        Ok((t.row(t.rows() - 1).to_vec(), traces))
    }

    /// Full logits `[len × vocab]` for a prefix (teacher forcing), no dropout.
    pub fn prefix_logits(
        &self,
        prefix: &[usize],
        src: &[usize],
        image: Option<&ImageFeatures>,
    ) -> Result<Tensor> {
        let mut g = self.graph(false, Dropout::disabled());
        let enc = self.encode(&mut g, src)?;
        let img = match (self.is_multimodal(), image) {
            (true, Some(im)) => Some(self.project_image(&mut g, im)?),
            (true, None) => {
                return Err(Error::Input(
                    "multimodal decoder needs image features".into(),
                ))
            }
            (false, _) => None,
        };
        let h = self.decode(&mut g, prefix, enc, img)?;
        let l = self.logits(&mut g, h)?;
        Ok(g.tape.value(l).clone())
    }

    /// Predicted pooled image vector for a source sentence.
    pub fn imagine_value(&self, src: &[usize]) -> Result<Tensor> {
        let mut g = self.graph(false, Dropout::disabled());
        let enc = self.encode(&mut g, src)?;
        let y = self.imagine(&mut g, enc)?;
        Ok(g.tape.value(y).clone())
    }

    /// Teacher-forced translation loss of one example: mean target NLL.
    pub fn example_translation_loss(
        &self,
        g: &mut Graph<'_>,
        enc: Var,
        tgt: &[usize],
        image: Option<&ImageFeatures>,
    ) -> Result<Var> {
        let mut input = Vec::with_capacity(tgt.len() + 1);
        input.push(BOS);
        input.extend_from_slice(tgt);
        let mut output = tgt.to_vec();
        output.push(EOS);
        let img = match (self.is_multimodal(), image) {
            (true, Some(im)) => Some(self.project_image(g, im)?),
            (true, None) => {
                return Err(Error::Input(
                    "multimodal model cannot translate an example without an image".into(),
                ))
            }
            (false, _) => None,
        };
        let h = self.decode(g, &input, enc, img)?;
        let logits = self.logits(g, h)?;
        translation_loss(&mut g.tape, logits, &output)
    }

    /// Summed translation and imagination losses over a batch.
    ///
    /// Examples without a target contribute no translation loss; examples
    /// without an image (or without another imaged example in the batch to
    /// contrast with) contribute no imagination loss.
    pub fn joint_loss(
        &self,
        g: &mut Graph<'_>,
        batch: &[&Sample],
        contrast_rng: &mut SplitMix64,
        use_imagination: bool,
    ) -> Result<(Var, LossParts)> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let use_imagination = use_imagination && self.imagination.is_some();
        let has_objective = batch
            .iter()
            .any(|s| s.tgt.is_some() || (use_imagination && s.image.is_some()));
        if !has_objective {
            return Err(Error::Contract(
                "no example in the batch has a translation or imagination objective".into(),
            ));
        }
        let imaged: Vec<usize> = (0..batch.len())
            .filter(|&i| batch[i].image.is_some())
            .collect();
        let mut parts = LossParts::default();
        let mut trans_total: Option<Var> = None;
        let mut imag_total: Option<Var> = None;
        for (i, sample) in batch.iter().enumerate() {
            let needs_imag = use_imagination && sample.image.is_some();
            if sample.tgt.is_none() && !needs_imag {
                continue;
            }
            g.dropout.begin_example(i);
            let enc = self.encode(g, &sample.src)?;
            if let Some(tgt) = &sample.tgt {
                let l = self.example_translation_loss(g, enc, tgt, sample.image.as_deref())?;
                parts.translation += g.tape.value(l).item();
                parts.n_translation += 1;
                trans_total = Some(match trans_total {
                    None => l,
                    Some(t) => g.tape.add(t, l)?,
                });
            }
            if needs_imag {
                let others: Vec<usize> = imaged.iter().copied().filter(|&j| j != i).collect();
                if others.is_empty() {
                    continue;
                }
                let j = others[contrast_rng.below(others.len())];
                let y = &sample.image.as_ref().expect("imaged").pooled;
                let y_c = &batch[j].image.as_ref().expect("imaged").pooled;
                let y_hat = self.imagine(g, enc)?;
                let l = imagination_loss(&mut g.tape, y_hat, y, y_c, self.config.margin)?;
                parts.imagination += g.tape.value(l).item();
                parts.n_imagination += 1;
                imag_total = Some(match imag_total {
                    None => l,
                    Some(t) => g.tape.add(t, l)?,
                });
            }
        }
        let imag_weighted = match imag_total {
            Some(v) => Some(g.tape.scale(v, self.config.imagination_weight)?),
            None => None,
        };
        let total = match (trans_total, imag_weighted) {
            (Some(a), Some(b)) => g.tape.add(a, b)?,
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => g.tape.constant(Tensor::scalar(0.0)),
        };
        Ok((total, parts))
    }
}

/// Mean negative log-likelihood of `targets`; `PAD` positions are skipped.
pub fn translation_loss(tape: &mut Tape<'_>, logits: Var, targets: &[usize]) -> Result<Var> {
    let rows = tape.value(logits).rows();
    if rows != targets.len() {
        return Err(Error::Contract(format!(
            "{rows} logit rows for {} targets",
            targets.len()
        )));
    }
    let tg: Vec<Option<usize>> = targets.iter().map(|&t| (t != PAD).then_some(t)).collect();
    let count = tg.iter().filter(|t| t.is_some()).count();
    if count == 0 {
        return Err(Error::Contract("no non-padding target".into()));
    }
    let nll = tape.cross_entropy_sum(logits, &tg)?;
    tape.scale(nll, 1.0 / count as f64)
}

/// Margin loss `max(0, α + d(ŷ, y) − d(ŷ, y_c))` with cosine distance.
pub fn imagination_loss(
    tape: &mut Tape<'_>,
    y_hat: Var,
    y: &Tensor,
    y_c: &Tensor,
    margin: f64,
) -> Result<Var> {
    let n = tape.value(y_hat).len();
    if y.len() != n || y_c.len() != n {
        return Err(Error::Dimension(format!(
            "predicted image vector has {n} values, references have {} and {}",
            y.len(),
            y_c.len()
        )));
    }
    let shape = tape.value(y_hat).shape().to_vec();
    let y = tape.constant(y.clone().reshape(shape.clone())?);
    let y_c = tape.constant(y_c.clone().reshape(shape)?);
    let pos = tape.cosine_distance(y_hat, y)?;
    let neg = tape.cosine_distance(y_hat, y_c)?;
    let diff = tape.sub(pos, neg)?;
    let shifted = tape.affine(diff, 1.0, margin)?;
    tape.relu(shifted)
}

/// Value-level form of [`imagination_loss`].
pub fn imagination_loss_value(y_hat: &[f64], y: &[f64], y_c: &[f64], margin: f64) -> Result<f64> {
    use crate::tape::cosine_distance;
    let v = margin + (cosine_distance(y_hat, y)? - cosine_distance(y_hat, y_c)?);
    Ok(v.max(0.0))
}
