//! Central finite-difference checks of tape gradients.

use crate::error::{Error, Result};
use crate::rng::{substream, Domain};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Max over elements of `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Checks gradients of `f` with respect to every input tensor.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_coords(f, inputs, eps, |slot| (0..inputs[slot].len()).collect())
}

/// Like [`grad_check_many`], but probes at most `max_per_input` randomly
/// chosen coordinates of each input (all of them for smaller inputs).
pub fn grad_check_sampled<F>(f: F, inputs: &[Tensor], eps: f64, max_per_input: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_coords(f, inputs, eps, |slot| {
        let n = inputs[slot].len();
        if n <= max_per_input {
            (0..n).collect()
        } else {
            let mut rng = substream(seed, Domain::Probe, slot as u64);
            let mut picked = rand::seq::index::sample(&mut rng, n, max_per_input).into_vec();
            picked.sort_unstable();
            picked
        }
    })
}

fn check_coords<F, C>(f: F, inputs: &[Tensor], eps: f64, coords: C) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    C: Fn(usize) -> Vec<usize>,
{
    if eps <= 0.0 {
        return Err(Error::Contract(format!("eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (slot, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var)?.clone();
        for i in coords(slot) {
            let orig = probe[slot].data()[i];
            probe[slot].data_mut()[i] = orig + eps;
            let up = eval_scalar(&f, &probe)?;
            probe[slot].data_mut()[i] = orig - eps;
            let down = eval_scalar(&f, &probe)?;
            probe[slot].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}
