//! Central finite-difference gradient checking.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Compares reverse-mode gradients of `Σ w_i y_i` against central
/// differences with step `h`, where `y = build(inputs)` and `w` is a fixed
/// pseudo-random weighting. Returns the norm-wise relative error
/// `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖, 10⁻³·G)` per input, where `G` is the largest
/// gradient norm over all inputs, so inputs whose gradient vanishes are
/// judged against the scale of the others.
pub fn gradient_check<F>(inputs: &[Tensor], h: f64, build: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let loss = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let y = build(tape, vars)?;
        let n = tape.value(y).len();
        let mut rng = ChaCha8Rng::seed_from_u64(0x6AD_C4EC);
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
        tape.weighted_sum(y, &weights)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let l = loss(&mut tape, &vars)?;
    let grads = tape.backward(l)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.param(t.clone())).collect();
        let l = loss(&mut tape, &vars)?;
        Ok(tape.value(l).data()[0])
    };

    let mut pairs = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v);
        let mut numeric = Vec::with_capacity(inputs[k].len());
        for i in 0..inputs[k].len() {
            let x0 = inputs[k].data()[i];
            work[k].data_mut()[i] = x0 + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = x0 - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = x0;
            numeric.push((up - down) / (2.0 * h));
        }
        pairs.push((analytic.into_data(), numeric));
    }
    let scale = pairs.iter().map(|(a, n)| norm(a).max(norm(n))).fold(0.0, f64::max);
    Ok(pairs.iter().map(|(a, n)| relative_error(a, n, 1e-3 * scale)).collect())
}

fn norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum::<f64>())
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`, or 0 when the denominator is zero.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>());
    let scale = norm(a).max(norm(b)).max(floor);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
