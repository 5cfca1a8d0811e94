//! Central finite-difference gradient checking.
//!
//! The analytic gradient comes from the `f32` backward pass. The numeric
//! gradient is probed on an `f64` copy of the same model so that the step
//! `h` can be small without drowning in rounding noise.

use serde::{Deserialize, Serialize};

use super::{Parameterized, Rng, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct CheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Probe at most this many entries per tensor (chosen by a seeded
    /// shuffle). `None` probes every entry.
    pub max_probes_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            max_probes_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coordinate {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    /// `max |a - n| / max(1, |a|, |n|)` over all probed entries.
    pub max_rel_err: f64,
    /// Number of probed scalar entries.
    pub checked: usize,
    pub worst: Option<Coordinate>,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

/// Fixed pseudo-random weights in `[-1, 1)` for projecting an output tensor
/// onto a scalar. A plain sum would hide errors in directions it is
/// orthogonal to (softmax rows, for instance).
pub fn projection<F: Scalar>(shape: &[usize], seed: u64) -> Result<Tensor<F>> {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(shape, |_| F::of(rng.uniform(-1.0, 1.0)))
}

fn pick(n: usize, limit: Option<usize>, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    match limit {
        Some(k) if k < n => {
            rng.shuffle(&mut idx);
            idx.truncate(k);
            idx.sort_unstable();
            idx
        }
        _ => idx,
    }
}

/// Compares analytic gradients of `model` against central differences of
/// `probe` evaluated on `shadow` (an `f64` copy of `model`).
///
/// `analytic` runs forward and backward of the scalar objective on the
/// `f32` model (whose grads have been zeroed) and returns one gradient per
/// input. `probe` evaluates the same objective on the shadow model.
pub fn grad_check<M, S>(
    model: &mut M,
    shadow: &mut S,
    inputs: &[Tensor<f32>],
    analytic: impl FnOnce(&mut M, &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>>,
    mut probe: impl FnMut(&mut S, &[Tensor<f64>]) -> Result<f64>,
    opts: &CheckOptions,
) -> Result<GradReport>
where
    M: Parameterized<f32> + ?Sized,
    S: Parameterized<f64> + ?Sized,
{
    model.zero_grad();
    let input_grads = analytic(model, inputs)?;
    if input_grads.len() != inputs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} input gradients for {} inputs",
            input_grads.len(),
            inputs.len()
        )));
    }
    for (g, x) in input_grads.iter().zip(inputs) {
        g.expect_same_shape(x, "grad_check input gradient")?;
    }

    let analytic_params: Vec<(String, Tensor<f32>)> =
        model.params().into_iter().map(|(n, p)| (n, p.grad.clone())).collect();
    let shadow_len = shadow.params().len();
    if shadow_len != analytic_params.len() {
        return Err(Error::InvalidArgument(format!(
            "shadow model has {shadow_len} params, model has {}",
            analytic_params.len()
        )));
    }

    let mut rng = Rng::new(opts.seed);
    let h = opts.step;
    let mut report = GradReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    let record = |report: &mut GradReport, name: &str, index: usize, a: f64, n: f64| {
        let e = rel_err(a, n);
        report.checked += 1;
        if e > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(e);
            report.worst = Some(Coordinate {
                tensor: name.to_string(),
                index,
                analytic: a,
                numeric: n,
            });
        }
    };
    let finite = |v: f64, name: &str, index: usize, sign: &str| -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                location: format!("{name}[{index}] {sign}h"),
                value: v,
            })
        }
    };

    let mut inputs64: Vec<Tensor<f64>> = inputs.iter().map(Tensor::cast).collect();

    for (k, (name, grad)) in analytic_params.iter().enumerate() {
        for i in pick(grad.numel(), opts.max_probes_per_tensor, &mut rng) {
            let orig = shadow.params_mut()[k].1.value[i];
            shadow.params_mut()[k].1.value[i] = orig + h;
            let fp = finite(probe(shadow, &inputs64)?, name, i, "+")?;
            shadow.params_mut()[k].1.value[i] = orig - h;
            let fm = finite(probe(shadow, &inputs64)?, name, i, "-")?;
            shadow.params_mut()[k].1.value[i] = orig;
            let n = (fp - fm) / (2.0 * h);
            record(&mut report, name, i, grad[i] as f64, n);
        }
    }

    for (k, grad) in input_grads.iter().enumerate() {
        let name = format!("input{k}");
        for i in pick(grad.numel(), opts.max_probes_per_tensor, &mut rng) {
            let orig = inputs64[k][i];
            inputs64[k][i] = orig + h;
            let fp = finite(probe(shadow, &inputs64)?, &name, i, "+")?;
            inputs64[k][i] = orig - h;
            let fm = finite(probe(shadow, &inputs64)?, &name, i, "-")?;
            inputs64[k][i] = orig;
            let n = (fp - fm) / (2.0 * h);
            record(&mut report, &name, i, grad[i] as f64, n);
        }
    }

    Ok(report)
}
