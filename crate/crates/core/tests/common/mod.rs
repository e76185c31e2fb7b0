//! Independent oracles shared by the integration tests. Everything here is
//! written with plain loops and no crate internals beyond data access.
#![allow(dead_code)]

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use mmtx::model::ModelMode;
use mmtx::{ImageFeatures, Model, ModelConfig, Sample, SplitMix64, Tensor};

pub fn mat(rows: usize, cols: usize, rng: &mut SplitMix64) -> Tensor {
    Tensor::uniform(&[rows, cols], 1.0, rng)
}

pub fn loop_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    assert_eq!(k, b.rows());
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a.get(i, t) * b.get(t, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

pub fn loop_add(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = a.clone();
    for (o, x) in out.data_mut().iter_mut().zip(b.data()) {
        *o += x;
    }
    out
}

/// Softmax attention by explicit loops; `visible(i, j)` selects keys.
pub fn attention_loop(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    scale_dim: usize,
    visible: &dyn Fn(usize, usize) -> bool,
) -> (Tensor, Tensor) {
    let (nq, nk, dv) = (q.rows(), k.rows(), v.cols());
    let scale = (scale_dim as f64).sqrt();
    let mut weights = Tensor::zeros(&[nq, nk]);
    let mut ctx = Tensor::zeros(&[nq, dv]);
    for i in 0..nq {
        let mut scores = vec![f64::NEG_INFINITY; nk];
        for j in 0..nk {
            if visible(i, j) {
                let mut s = 0.0;
                for c in 0..q.cols() {
                    s += q.get(i, c) * k.get(j, c);
                }
                scores[j] = s / scale;
            }
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores
            .iter()
            .map(|&s| {
                if s == f64::NEG_INFINITY {
                    0.0
                } else {
                    (s - max).exp()
                }
            })
            .collect();
        let z: f64 = exps.iter().sum();
        for j in 0..nk {
            weights.set(i, j, exps[j] / z);
        }
        for c in 0..dv {
            let mut s = 0.0;
            for j in 0..nk {
                s += weights.get(i, j) * v.get(j, c);
            }
            ctx.set(i, c, s);
        }
    }
    (ctx, weights)
}

/// `[w_q, w_k, w_v, w_o]` for every head registered under `prefix`.
pub fn head_params(model_params: &mmtx::params::ParamStore, prefix: &str) -> Vec<[Tensor; 4]> {
    let mut out = Vec::new();
    for i in 0.. {
        let get = |p: &str| {
            model_params
                .by_name(&format!("{prefix}.head{i}.{p}"))
                .cloned()
        };
        match (get("w_q"), get("w_k"), get("w_v"), get("w_o")) {
            (Some(q), Some(k), Some(v), Some(o)) => out.push([q, k, v, o]),
            _ => break,
        }
    }
    out
}

/// Sum over heads of per-head attention projected by that head's output
/// matrix.
pub fn multi_head_loop(
    q_in: &Tensor,
    k_in: &Tensor,
    v_in: &Tensor,
    heads: &[[Tensor; 4]],
    scale_dim: usize,
    visible: &dyn Fn(usize, usize) -> bool,
) -> Tensor {
    let mut out = Tensor::zeros(&[q_in.rows(), q_in.cols()]);
    for [wq, wk, wv, wo] in heads {
        let (ctx, _) = attention_loop(
            &loop_matmul(q_in, wq),
            &loop_matmul(k_in, wk),
            &loop_matmul(v_in, wv),
            scale_dim,
            visible,
        );
        out = loop_add(&out, &loop_matmul(&ctx, wo));
    }
    out
}

pub fn all_visible(_: usize, _: usize) -> bool {
    true
}

fn ngrams(tokens: &[String], n: usize) -> Vec<String> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n)
        .map(|i| tokens[i..i + n].join("\u{1}"))
        .collect()
}

/// Corpus BLEU-4 counted the slow way: every n-gram as a joined string,
/// clipping by repeated linear scans. Orders with no candidate n-grams are
/// left out, as in the crate.
pub fn bleu_oracle(cands: &[Vec<String>], refs: &[Vec<String>], smoothing: bool) -> f64 {
    let mut matches = [0u64; 4];
    let mut totals = [0u64; 4];
    let (mut c_len, mut r_len) = (0u64, 0u64);
    for (c, r) in cands.iter().zip(refs) {
        c_len += c.len() as u64;
        r_len += r.len() as u64;
        for n in 1..=4 {
            let cg = ngrams(c, n);
            let mut rg = ngrams(r, n);
            totals[n - 1] += cg.len() as u64;
            for g in &cg {
                if let Some(pos) = rg.iter().position(|x| x == g) {
                    rg.remove(pos);
                    matches[n - 1] += 1;
                }
            }
        }
    }
    if c_len == 0 {
        return 0.0;
    }
    let mut logs = Vec::new();
    for n in 0..4 {
        if totals[n] == 0 {
            continue;
        }
        let p = if smoothing && n > 0 {
            (matches[n] as f64 + 1.0) / (totals[n] as f64 + 1.0)
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        if p == 0.0 {
            return 0.0;
        }
        logs.push(p.ln());
    }
    let bp = if c_len >= r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    100.0 * bp * (logs.iter().sum::<f64>() / logs.len() as f64).exp()
}

pub fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

/// The d=8, h=2 configuration the oracle tests share.
pub fn tiny_config(mode: ModelMode, imagination: bool) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d: 8,
        d_ff: 16,
        heads: 2,
        vocab_size: 12,
        max_len: 16,
        image_positions: 3,
        image_dim: 5,
        pooled_dim: 4,
        imag_hidden: 6,
        mode,
        imagination,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

pub fn random_image(cfg: &ModelConfig, rng: &mut SplitMix64) -> Arc<ImageFeatures> {
    let grid = Tensor::uniform(&[cfg.image_positions, cfg.image_dim], 1.0, rng);
    let pooled = Tensor::uniform(&[cfg.pooled_dim], 1.0, rng);
    Arc::new(ImageFeatures::new(grid, pooled).unwrap())
}

pub fn random_ids(len: usize, vocab: usize, rng: &mut SplitMix64) -> Vec<usize> {
    (0..len).map(|_| 4 + rng.below(vocab - 4)).collect()
}

pub fn random_sample(cfg: &ModelConfig, target: bool, image: bool, rng: &mut SplitMix64) -> Sample {
    let src = random_ids(2 + rng.below(4), cfg.vocab_size, rng);
    let tgt = target.then(|| random_ids(1 + rng.below(4), cfg.vocab_size, rng));
    let image = image.then(|| random_image(cfg, rng));
    Sample { src, tgt, image }
}

pub fn param_bits(model: &Model) -> Vec<(String, Vec<u64>)> {
    model
        .params()
        .iter()
        .map(|(n, t)| {
            (
                n.to_string(),
                t.data().iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect()
}

pub type OpFn = Box<dyn Fn(&mut mmtx::Tape, &[mmtx::Var]) -> mmtx::Result<mmtx::Var>>;

/// Values in `[-1, -0.1] ∪ [0.1, 1]`, keeping clear of ReLU's kink.
pub fn away_from_zero(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    let mut t = Tensor::uniform(shape, 1.0, rng);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + 0.9 * v.abs());
    }
    t
}

/// One scalar-valued test function per differentiable tape operation, each
/// reduced to a scalar through a fixed random weighting so every output
/// entry matters.
pub fn op_cases(seed: u64) -> Vec<(&'static str, OpFn, Vec<Tensor>)> {
    let mut rng = SplitMix64::new(seed);
    let w34 = Rc::new(away_from_zero(&[3, 4], &mut rng));
    let weigh = move |w: Rc<Tensor>| {
        move |t: &mut mmtx::Tape, x: mmtx::Var| -> mmtx::Result<mmtx::Var> {
            let c = t.constant((*w).clone());
            let p = t.mul(x, c)?;
            t.sum(p)
        }
    };
    let r = weigh(w34.clone());
    let mut cases: Vec<(&'static str, OpFn, Vec<Tensor>)> = Vec::new();
    let r1 = r.clone();
    cases.push((
        "matmul",
        Box::new(move |t, v| {
            let y = t.matmul(v[0], v[1])?;
            r1(t, y)
        }),
        vec![mat(3, 5, &mut rng), mat(5, 4, &mut rng)],
    ));
    let r1 = r.clone();
    cases.push((
        "matmul_bt",
        Box::new(move |t, v| {
            let y = t.matmul_bt(v[0], v[1])?;
            r1(t, y)
        }),
        vec![mat(3, 5, &mut rng), mat(4, 5, &mut rng)],
    ));
    let r1 = r.clone();
    cases.push((
        "add",
        Box::new(move |t, v| {
            let y = t.add(v[0], v[1])?;
            r1(t, y)
        }),
        vec![mat(3, 4, &mut rng), mat(3, 4, &mut rng)],
    ));
    let r1 = r.clone();
    cases.push((
        "sub",
        Box::new(move |t, v| {
            let y = t.sub(v[0], v[1])?;
            r1(t, y)
        }),
        vec![mat(3, 4, &mut rng), mat(3, 4, &mut rng)],
    ));
    let r1 = r.clone();
    cases.push((
        "mul",
        Box::new(move |t, v| {
            let y = t.mul(v[0], v[1])?;
            r1(t, y)
        }),
        vec![mat(3, 4, &mut rng), mat(3, 4, &mut rng)],
    ));
    let r1 = r.clone();
    cases.push((
        "add_row",
        Box::new(move |t, v| {
            let y = t.add_row(v[0], v[1])?;
            r1(t, y)
        }),
        vec![mat(3, 4, &mut rng), Tensor::uniform(&[4], 1.0, &mut rng)],
    ));
    let r1 = r.clone();
    let c = mat(3, 4, &mut rng);
    cases.push((
        "add_const",
        Box::new(move |t, v| {
            let y = t.add_const(v[0], &c)?;
            r1(t, y)
        }),
        vec![mat(3, 4, &mut rng)],
    ));
    let r1 = r.clone();
    let m = Rc::new(mat(3, 4, &mut rng).into_data());
    cases.push((
        "mul_const",
        Box::new(move |t, v| {
            let y = t.mul_const(v[0], m.clone())?;
            r1(t, y)
        }),
        vec![mat(3, 4, &mut rng)],
    ));
    let r1 = r.clone();
    cases.push((
        "affine",
        Box::new(move |t, v| {
            let y = t.affine(v[0], -1.7, 0.3)?;
            r1(t, y)
        }),
        vec![mat(3, 4, &mut rng)],
    ));
    let r1 = r.clone();
    cases.push((
        "relu",
        Box::new(move |t, v| {
            let y = t.relu(v[0])?;
            r1(t, y)
        }),
        vec![away_from_zero(&[3, 4], &mut rng)],
    ));
    let r1 = r.clone();
    cases.push((
        "sigmoid",
        Box::new(move |t, v| {
            let y = t.sigmoid(v[0])?;
            r1(t, y)
        }),
        vec![mat(3, 4, &mut rng)],
    ));
    let r1 = r.clone();
    cases.push((
        "tanh",
        Box::new(move |t, v| {
            let y = t.tanh(v[0])?;
            r1(t, y)
        }),
        vec![mat(3, 4, &mut rng)],
    ));
    let r1 = r.clone();
    cases.push((
        "softmax_rows",
        Box::new(move |t, v| {
            let y = t.softmax_rows(v[0])?;
            r1(t, y)
        }),
        vec![mat(3, 4, &mut rng)],
    ));
    let r1 = r.clone();
    cases.push((
        "layer_norm",
        Box::new(move |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-6)?;
            r1(t, y)
        }),
        vec![
            mat(3, 4, &mut rng),
            Tensor::uniform(&[4], 1.0, &mut rng),
            Tensor::uniform(&[4], 1.0, &mut rng),
        ],
    ));
    let w = Rc::new(away_from_zero(&[1, 4], &mut rng));
    let r4 = weigh(w);
    cases.push((
        "sum_rows",
        Box::new(move |t, v| {
            let y = t.sum_rows(v[0])?;
            r4(t, y)
        }),
        vec![mat(3, 4, &mut rng)],
    ));
    let r1 = r.clone();
    cases.push((
        "gather",
        Box::new(move |t, v| {
            let y = t.gather(v[0], &[2, 0, 2])?;
            r1(t, y)
        }),
        vec![mat(5, 4, &mut rng)],
    ));
    cases.push((
        "sum",
        Box::new(|t, v| t.sum(v[0])),
        vec![mat(3, 4, &mut rng)],
    ));
    cases.push((
        "cross_entropy_sum",
        Box::new(|t, v| t.cross_entropy_sum(v[0], &[Some(1), None, Some(3)])),
        vec![mat(3, 4, &mut rng)],
    ));
    cases.push((
        "cosine_distance",
        Box::new(|t, v| t.cosine_distance(v[0], v[1])),
        vec![mat(1, 6, &mut rng), mat(1, 6, &mut rng)],
    ));
    cases
}
