use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::{Dropout, ImageFeatures, Model, Sample, BOS, EOS};
use crate::tape::log_softmax;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeOptions {
    pub max_len: usize,
    /// 1 selects greedy decoding.
    pub beam: usize,
    /// Worker threads for corpus decoding.
    pub jobs: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            max_len: 32,
            beam: 1,
            jobs: 1,
        }
    }
}

fn resolve_image<'a>(
    model: &Model,
    img: Option<&'a ImageFeatures>,
) -> Result<Option<&'a ImageFeatures>> {
    if !model.is_multimodal() {
        return Ok(None);
    }
    img.map(Some)
        .ok_or_else(|| Error::Input("multimodal model needs image features to decode".into()))
}

struct Decoder<'m> {
    model: &'m Model,
    enc: Tensor,
    image: Option<&'m ImageFeatures>,
    budget: usize,
}

impl<'m> Decoder<'m> {
    fn new(
        model: &'m Model,
        src: &[usize],
        img: Option<&'m ImageFeatures>,
        max_len: usize,
    ) -> Result<Self> {
        if src.is_empty() {
            return Err(Error::Input("empty source sentence".into()));
        }
        let image = resolve_image(model, img)?;
        let enc = model.encode_states(src)?;
        // A prefix holds BOS plus every generated token but the last.
        let budget = max_len.min(model.config().max_len);
        Ok(Decoder {
            model,
            enc,
            image,
            budget,
        })
    }

    fn log_probs(&self, generated: &[usize]) -> Result<Vec<f64>> {
        let mut prefix = Vec::with_capacity(generated.len() + 1);
        prefix.push(BOS);
        prefix.extend_from_slice(generated);
        let mut g = self.model.graph(false, Dropout::disabled());
        let enc = g.tape.leaf_ref(&self.enc, false);
        let img = match self.image {
            Some(im) => Some(self.model.project_image(&mut g, im)?),
            None => None,
        };
        let h = self.model.decode(&mut g, &prefix, enc, img)?;
        let logits = self.model.logits(&mut g, h)?;
        let t = g.tape.value(logits);
        Ok(log_softmax(t.row(t.rows() - 1)))
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding. The result holds at most `max_len` ids and ends with
/// `EOS` when the model produced one. Ties go to the lowest id.
pub fn greedy_decode(
    model: &Model,
    src: &[usize],
    img: Option<&ImageFeatures>,
    max_len: usize,
) -> Result<Vec<usize>> {
    let dec = Decoder::new(model, src, img, max_len)?;
    let mut out = Vec::new();
    while out.len() < dec.budget {
        let next = argmax(&dec.log_probs(&out)?);
        out.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
struct Hypothesis {
    tokens: Vec<usize>,
    log_prob: f64,
    last: f64,
    finished: bool,
}

impl Hypothesis {
    fn score(&self) -> f64 {
        if self.tokens.is_empty() {
            0.0
        } else {
            self.log_prob / self.tokens.len() as f64
        }
    }

    /// Best first: higher normalised score, then higher last-step
    /// probability, then the lexicographically smaller sequence.
    fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
        b.score()
            .total_cmp(&a.score())
            .then(b.last.total_cmp(&a.last))
            .then_with(|| a.tokens.cmp(&b.tokens))
    }
}

/// Beam search over length-normalised log-probabilities.
pub fn beam_decode(
    model: &Model,
    src: &[usize],
    img: Option<&ImageFeatures>,
    beam: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    if beam == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let dec = Decoder::new(model, src, img, max_len)?;
    let mut beams = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        last: 0.0,
        finished: false,
    }];
    for _ in 0..dec.budget {
        if beams.iter().all(|h| h.finished) {
            break;
        }
        let mut candidates = Vec::new();
        for hyp in &beams {
            if hyp.finished {
                candidates.push(hyp.clone());
                continue;
            }
            let lp = dec.log_probs(&hyp.tokens)?;
            for (v, &l) in lp.iter().enumerate() {
                let mut tokens = hyp.tokens.clone();
                tokens.push(v);
                candidates.push(Hypothesis {
                    tokens,
                    log_prob: hyp.log_prob + l,
                    last: l,
                    finished: v == EOS,
                });
            }
        }
        candidates.sort_by(Hypothesis::rank);
        candidates.truncate(beam);
        beams = candidates;
    }
    beams.sort_by(Hypothesis::rank);
    Ok(beams.swap_remove(0).tokens)
}

/// Length-normalised log-probability of `tokens` under teacher forcing, the
/// quantity beam search maximises.
pub fn sequence_score(
    model: &Model,
    src: &[usize],
    img: Option<&ImageFeatures>,
    tokens: &[usize],
) -> Result<f64> {
    if tokens.is_empty() {
        return Ok(0.0);
    }
    let image = resolve_image(model, img)?;
    let mut prefix = vec![BOS];
    prefix.extend_from_slice(&tokens[..tokens.len() - 1]);
    let logits = model.prefix_logits(&prefix, src, image)?;
    let total: f64 = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| log_softmax(logits.row(i))[t])
        .sum();
    Ok(total / tokens.len() as f64)
}

/// Decodes one sample with the given options.
pub fn decode_sample(model: &Model, sample: &Sample, opts: &DecodeOptions) -> Result<Vec<usize>> {
    let img = sample.image.as_deref();
    if opts.beam <= 1 {
        greedy_decode(model, &sample.src, img, opts.max_len)
    } else {
        beam_decode(model, &sample.src, img, opts.beam, opts.max_len)
    }
}

/// Decodes every sample, fanning out over `opts.jobs` threads. Results are in
/// input order regardless of the thread count.
pub fn decode_all(
    model: &Model,
    samples: &[Sample],
    opts: &DecodeOptions,
) -> Result<Vec<Vec<usize>>> {
    let jobs = opts.jobs.max(1).min(samples.len().max(1));
    if jobs == 1 {
        return samples
            .iter()
            .map(|s| decode_sample(model, s, opts))
            .collect();
    }
    let mut slots: Vec<Option<Result<Vec<usize>>>> = (0..samples.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                scope.spawn(move || {
                    (j..samples.len())
                        .step_by(jobs)
                        .map(|i| (i, decode_sample(model, &samples[i], opts)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("decode worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every index decoded"))
        .collect()
}
