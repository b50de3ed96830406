use alloc::vec::Vec;

use super::tape::{Tape, Var};
use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Negative slope of every LeakyReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.2;

/// `y = x W + b` over the last axis of `x`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_bias(y, b),
        None => Ok(y),
    }
}

/// Weights of one LSTM direction. Gates are packed `[input, forget,
/// candidate, output]` along the last axis.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    /// `[d_in × 4h]`
    pub w_ih: Var,
    /// `[h × 4h]`
    pub w_hh: Var,
    /// `[4h]`
    pub bias: Var,
}

/// Runs an LSTM over `x [N × T × d_in]` and returns the full hidden
/// sequence `[N × T × h]`. Missing initial states are zero.
pub fn lstm(tape: &mut Tape, x: Var, cell: &LstmVars, h0: Option<Var>, c0: Option<Var>) -> Result<Var> {
    let xs = tape.value(x).shape().to_vec();
    if xs.len() != 3 {
        bail!(Shape, "lstm input must be [N x T x d], got {:?}", xs);
    }
    let (n, steps) = (xs[0], xs[1]);
    let four_h = tape.value(cell.w_hh).dim(1);
    let hidden = tape.value(cell.w_hh).dim(0);
    if four_h != 4 * hidden || tape.value(cell.w_ih).shape() != [xs[2], four_h] {
        bail!(Shape, "lstm weights do not match input width {} / hidden {}", xs[2], hidden);
    }
    for s in [h0, c0].into_iter().flatten() {
        if tape.value(s).shape() != [n, hidden] {
            bail!(Shape, "lstm initial state must be [{n} x {hidden}]");
        }
    }
    let projected = linear(tape, x, cell.w_ih, Some(cell.bias))?;
    let mut h = h0;
    let mut c = c0;
    let mut outputs = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut gates = tape.select_axis1(projected, t)?;
        if let Some(h_prev) = h {
            let rec = tape.matmul(h_prev, cell.w_hh)?;
            gates = tape.add(gates, rec)?;
        }
        let i = tape.slice_last(gates, 0, hidden)?;
        let i = tape.sigmoid(i);
        let f = tape.slice_last(gates, hidden, hidden)?;
        let f = tape.sigmoid(f);
        let g = tape.slice_last(gates, 2 * hidden, hidden)?;
        let g = tape.tanh(g);
        let o = tape.slice_last(gates, 3 * hidden, hidden)?;
        let o = tape.sigmoid(o);
        let mut c_new = tape.mul(i, g)?;
        if let Some(c_prev) = c {
            let kept = tape.mul(f, c_prev)?;
            c_new = tape.add(kept, c_new)?;
        }
        let squashed = tape.tanh(c_new);
        let h_new = tape.mul(o, squashed)?;
        outputs.push(h_new);
        h = Some(h_new);
        c = Some(c_new);
    }
    tape.stack_axis1(&outputs)
}

/// Bidirectional LSTM: `[N × T × d] -> [N × T × (h_fwd + h_bwd)]`. The
/// backward direction reads the reversed sequence and its output is
/// re-reversed before concatenation.
pub fn bilstm(tape: &mut Tape, x: Var, forward: &LstmVars, backward: &LstmVars) -> Result<Var> {
    let fwd = lstm(tape, x, forward, None, None)?;
    let rev = tape.reverse_axis1(x)?;
    let bwd = lstm(tape, rev, backward, None, None)?;
    let bwd = tape.reverse_axis1(bwd)?;
    tape.concat_last(&[fwd, bwd])
}

/// Row-wise softmax of a plain tensor.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.softmax(v, None)?;
    Ok(tape.value(y).clone())
}

/// Mean cross-entropy of `logits [N × K]` against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(logits.clone());
    let y = tape.cross_entropy(v, labels)?;
    Ok(tape.value(y).data()[0])
}
