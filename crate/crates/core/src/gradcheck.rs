//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::model::{Dropout, Model, Sample};
use crate::rng::SplitMix64;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor for relative errors, so entries whose true gradient is
/// numerically zero are judged by absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error for each input, in input order.
    pub per_input: Vec<f64>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Relative error used by every check in the crate.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Checks the tape's gradients of a scalar function against central
/// differences taken over every entry of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, inputs)?;
    compare_gradients(&analytic, |xs| evaluate(&f, xs), inputs, step, tol)
}

/// Gradients of `f` at `inputs` via one backward sweep.
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf_ref(t, true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars.iter().map(|&v| grads.get(v)).collect())
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf_ref(t, false)).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Contract(
            "gradient check needs a scalar function".into(),
        ));
    }
    Ok(v.item())
}

/// Compares supplied gradients against central differences of `value`.
pub fn compare_gradients(
    analytic: &[Tensor],
    value: impl Fn(&[Tensor]) -> Result<f64>,
    inputs: &[Tensor],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if analytic.len() != inputs.len() {
        return Err(Error::Contract(
            "one analytic gradient per input required".into(),
        ));
    }
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    for (i, grad) in analytic.iter().enumerate() {
        if grad.shape() != inputs[i].shape() {
            return Err(Error::Dimension(format!(
                "gradient {i} has the wrong shape"
            )));
        }
        let mut worst = 0.0f64;
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = value(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = value(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(grad.data()[j], numeric));
        }
        per_input.push(worst);
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_input,
        max_rel_error,
        tol,
        passed: max_rel_error <= tol,
    })
}

/// Checks every parameter gradient of the model's joint loss on `batch`
/// (dropout off, contrastive draws replayed from `seed`). Returns the report
/// and the name of the worst parameter.
pub fn check_joint_loss(
    model: &Model,
    batch: &[Sample],
    seed: u64,
    step: f64,
    tol: f64,
) -> Result<(GradCheckReport, String)> {
    let refs: Vec<&Sample> = batch.iter().collect();
    let analytic = {
        let mut g = model.graph(true, Dropout::disabled());
        let (loss, _) = model.joint_loss(&mut g, &refs, &mut SplitMix64::new(seed), true)?;
        let grads = g.tape.backward(loss)?;
        g.param_grads(&grads)
    };
    let value = |xs: &[Tensor]| -> Result<f64> {
        let mut m = model.clone();
        m.params_mut().tensors_mut().clone_from_slice(xs);
        let mut g = m.graph(false, Dropout::disabled());
        let (loss, _) = m.joint_loss(&mut g, &refs, &mut SplitMix64::new(seed), true)?;
        Ok(g.tape.value(loss).item())
    };
    let inputs = model.params().tensors().to_vec();
    let report = compare_gradients(&analytic, value, &inputs, step, tol)?;
    let worst = report
        .per_input
        .iter()
        .enumerate()
        .fold(
            0,
            |best, (i, &e)| if e > report.per_input[best] { i } else { best },
        );
    let name = model
        .params()
        .iter()
        .nth(worst)
        .map(|(n, _)| n.to_string())
        .unwrap_or_default();
    Ok((report, name))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn identity_sum_is_exact() {
        let x = Tensor::vector(vec![0.3, -0.7, 0.1]);
        let r = grad_check(|t, v| t.sum(v[0]), &[x], 1e-5, 1e-4).unwrap();
        assert!(r.passed);
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn softmax_sum_of_squares_passes() {
        let mut rng = SplitMix64::new(1);
        let x = Tensor::uniform(&[3, 5], 1.0, &mut rng);
        let r = grad_check(
            |t, v| {
                let s = t.softmax_rows(v[0])?;
                let sq = t.mul(s, s)?;
                t.sum(sq)
            },
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_fails() {
        let mut rng = SplitMix64::new(2);
        let x = Tensor::uniform(&[4], 1.0, &mut rng);
        let f = |t: &mut Tape, v: &[Var]| {
            let y = t.tanh(v[0])?;
            t.sum(y)
        };
        // Pretend tanh's backward forgot the (1 - y²) factor.
        let corrupted = vec![Tensor::ones(&[4])];
        let r = compare_gradients(&corrupted, |xs| evaluate(&f, xs), &[x], 1e-5, 1e-4).unwrap();
        assert!(!r.passed);
    }
}
