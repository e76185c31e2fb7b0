//! Scaled dot-product and multi-head attention.
//!
//! Heads keep separate query/key/value/output matrices and their outputs are
//! summed after the per-head output projection, which is algebraically the
//! same as concatenating heads and projecting once.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, ParamVars};
use crate::rng::SplitMix64;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Additive bias for hidden positions. Finite, so every stored value stays
/// finite, but large enough that `exp` underflows to exactly zero.
pub const MASK_BIAS: f64 = f64::MIN;

/// Which dimension the attention logits are scaled by.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScaleMode {
    /// `1/√d_h`, the per-head convention.
    #[default]
    PerHead,
    /// `1/√d`, dividing by the full model dimension.
    ModelDim,
}

impl ScaleMode {
    pub fn scale_dim(self, d: usize, d_head: usize) -> usize {
        match self {
            ScaleMode::PerHead => d_head,
            ScaleMode::ModelDim => d,
        }
    }
}

/// Boolean visibility matrix `[n_queries × n_keys]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n_queries: usize,
    n_keys: usize,
    visible: Vec<bool>,
}

impl AttentionMask {
    pub fn new(n_queries: usize, n_keys: usize, visible: Vec<bool>) -> Result<Self> {
        if visible.len() != n_queries * n_keys {
            return Err(Error::Dimension(format!(
                "mask of {} entries for {n_queries}×{n_keys}",
                visible.len()
            )));
        }
        if let Some(row) = visible.chunks(n_keys).position(|r| !r.iter().any(|&v| v)) {
            return Err(Error::Contract(format!("mask row {row} hides every key")));
        }
        Ok(AttentionMask {
            n_queries,
            n_keys,
            visible,
        })
    }

    /// Lower-triangular mask: query `i` sees keys `j ≤ i`.
    pub fn causal(n: usize) -> Self {
        let visible = (0..n).flat_map(|i| (0..n).map(move |j| j <= i)).collect();
        AttentionMask {
            n_queries: n,
            n_keys: n,
            visible,
        }
    }

    pub fn is_visible(&self, i: usize, j: usize) -> bool {
        self.visible[i * self.n_keys + j]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_queries, self.n_keys)
    }

    fn bias(&self) -> Tensor {
        let data = self
            .visible
            .iter()
            .map(|&v| if v { 0.0 } else { MASK_BIAS })
            .collect();
        Tensor::new(vec![self.n_queries, self.n_keys], data).expect("mask shape")
    }
}

/// Per-head projection matrices, stored by id in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct MultiHeadParams {
    pub w_q: Vec<ParamId>,
    pub w_k: Vec<ParamId>,
    pub w_v: Vec<ParamId>,
    pub w_o: Vec<ParamId>,
    pub heads: usize,
    pub d_head: usize,
}

impl MultiHeadParams {
    /// Registers `heads` sets of `[d × d_h]` input and `[d_h × d]` output
    /// projections under `prefix`.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model dimension {d} is not divisible by {heads} heads"
            )));
        }
        let d_head = d / heads;
        let mut p = MultiHeadParams {
            w_q: vec![],
            w_k: vec![],
            w_v: vec![],
            w_o: vec![],
            heads,
            d_head,
        };
        for i in 0..heads {
            p.w_q.push(store.add(
                format!("{prefix}.head{i}.w_q"),
                Tensor::glorot(d, d_head, rng),
            ));
            p.w_k.push(store.add(
                format!("{prefix}.head{i}.w_k"),
                Tensor::glorot(d, d_head, rng),
            ));
            p.w_v.push(store.add(
                format!("{prefix}.head{i}.w_v"),
                Tensor::glorot(d, d_head, rng),
            ));
            p.w_o.push(store.add(
                format!("{prefix}.head{i}.w_o"),
                Tensor::glorot(d_head, d, rng),
            ));
        }
        Ok(p)
    }

    pub fn model_dim(&self) -> usize {
        self.heads * self.d_head
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.w_q
            .iter()
            .chain(&self.w_k)
            .chain(&self.w_v)
            .chain(&self.w_o)
            .copied()
    }
}

/// `softmax(q kᵀ / √scale_dim + mask) v`. Returns the context and the weights.
pub fn scaled_dot_attention(
    tape: &mut Tape<'_>,
    q: Var,
    k: Var,
    v: Var,
    scale_dim: usize,
    mask: Option<&AttentionMask>,
) -> Result<(Var, Var)> {
    let (tq, tk, tv) = (tape.value(q), tape.value(k), tape.value(v));
    if tq.cols() != tk.cols() {
        return Err(Error::Dimension(format!(
            "query width {} differs from key width {}",
            tq.cols(),
            tk.cols()
        )));
    }
    if tk.rows() != tv.rows() {
        return Err(Error::Dimension(format!(
            "{} keys but {} values",
            tk.rows(),
            tv.rows()
        )));
    }
    let (n_q, n_k) = (tq.rows(), tk.rows());
    let scores = tape.matmul_bt(q, k)?;
    let mut scores = tape.scale(scores, 1.0 / (scale_dim as f64).sqrt())?;
    if let Some(mask) = mask {
        if mask.shape() != (n_q, n_k) {
            return Err(Error::Dimension(format!(
                "mask {:?} does not match scores {n_q}×{n_k}",
                mask.shape()
            )));
        }
        scores = tape.add_const(scores, &mask.bias())?;
    }
    let weights = tape.softmax_rows(scores)?;
    let context = tape.matmul(weights, v)?;
    Ok((context, weights))
}

/// Sum over heads of `A(q Wᵢ^Q, k Wᵢ^K, v Wᵢ^V) Wᵢ^O`.
pub fn multi_head_attention(
    tape: &mut Tape<'_>,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    params: &MultiHeadParams,
    vars: &ParamVars,
    scale: ScaleMode,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    multi_head_attention_with_weights(tape, q_in, k_in, v_in, params, vars, scale, mask)
        .map(|(c, _)| c)
}

/// As [`multi_head_attention`], also returning each head's weight matrix.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention_with_weights(
    tape: &mut Tape<'_>,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    params: &MultiHeadParams,
    vars: &ParamVars,
    scale: ScaleMode,
    mask: Option<&AttentionMask>,
) -> Result<(Var, Vec<Var>)> {
    let d = params.model_dim();
    for (name, v) in [("query", q_in), ("key", k_in), ("value", v_in)] {
        if tape.value(v).cols() != d {
            return Err(Error::Dimension(format!(
                "{name} width {} does not match model dimension {d}",
                tape.value(v).cols()
            )));
        }
    }
    let scale_dim = scale.scale_dim(d, params.d_head);
    let mut total: Option<Var> = None;
    let mut all_weights = Vec::with_capacity(params.heads);
    for i in 0..params.heads {
        let q = tape.matmul(q_in, vars[params.w_q[i]])?;
        let k = tape.matmul(k_in, vars[params.w_k[i]])?;
        let v = tape.matmul(v_in, vars[params.w_v[i]])?;
        let (ctx, weights) = scaled_dot_attention(tape, q, k, v, scale_dim, mask)?;
        let out = tape.matmul(ctx, vars[params.w_o[i]])?;
        total = Some(match total {
            None => out,
            Some(acc) => tape.add(acc, out)?,
        });
        all_weights.push(weights);
    }
    Ok((total.expect("at least one head"), all_weights))
}
