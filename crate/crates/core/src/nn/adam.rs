use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self { step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: Vec::new(), v: Vec::new() }
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() {
        bail!(Shape, "{} parameters but {} gradients", params.len(), grads.len());
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            bail!(Shape, "gradient {:?} for parameter {:?}", g.shape(), p.shape());
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    } else if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
        bail!(Shape, "optimizer state does not match parameter layout");
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - libm::pow(state.beta1, t);
    let c2 = 1.0 - libm::pow(state.beta2, t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = state.beta1 * *mv + (1.0 - state.beta1) * gv;
            *vv = state.beta2 * *vv + (1.0 - state.beta2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv -= state.lr * m_hat / (libm::sqrt(v_hat) + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let g = vec![Tensor::zeros(&[3])];
        let mut st = AdamState::default();
        adam_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // After one step from zero moments: m_hat = g, v_hat = g², so
        // Δ = -lr · g / (|g| + eps).
        let g = [0.3, -4.0, 1e-3];
        let mut p = vec![Tensor::zeros(&[3])];
        let grads = vec![Tensor::new(vec![3], g.to_vec()).unwrap()];
        let mut st = AdamState::new(1e-3);
        adam_step(&mut p, &grads, &mut st).unwrap();
        for (pv, gv) in p[0].data().iter().zip(g) {
            let expected = -1e-3 * gv / (libm::fabs(gv) + 1e-8);
            assert!((pv - expected).abs() < 1e-15, "{pv} vs {expected}");
        }
    }

    #[test]
    fn mismatched_layout_is_rejected() {
        let mut p = vec![Tensor::zeros(&[2])];
        let g = vec![Tensor::zeros(&[3])];
        assert!(adam_step(&mut p, &g, &mut AdamState::default()).is_err());
    }
}
