//! Cross-domain attention, two-step fusion and the classifier head.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::nn::{linear, Initializer, ModelParams, Tape, Var};
use crate::tensor::Tensor;

/// Which domain supplies the attention queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QueryDomain {
    /// Spatial node embeddings query the time-frequency sequence.
    #[default]
    Spatial,
    /// The time-frequency sequence queries the spatial node embeddings.
    Temporal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdaConfig {
    pub n_heads: usize,
    pub d_model: usize,
    pub query_domain: QueryDomain,
}

impl Default for CdaConfig {
    fn default() -> Self {
        Self { n_heads: 8, d_model: 64, query_domain: QueryDomain::Spatial }
    }
}

impl CdaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            bail!(Config, "d_model {} is not divisible into {} heads", self.d_model, self.n_heads);
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Projection matrices `W_Q, W_K, W_V, W_O`, each `[d_model × d_model]`.
/// Head `i` uses columns `i·d .. (i+1)·d` of the first three.
#[derive(Debug, Clone, Copy)]
pub struct CdaVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct CdaOutput {
    /// `[N × S_q × d_model]`
    pub x_cm: Var,
    /// `[N·H × S_q × S_kv]`, row-stochastic.
    pub attention: Var,
}

/// Multi-head attention with queries from `queries [N × S_q × d]` and
/// keys/values from `context [N × S_kv × d]`:
/// `head_i = softmax(Q_i K_iᵀ / √d_head) V_i`, `out = concat(heads) W_O`.
pub fn cross_domain_attention(tape: &mut Tape, queries: Var, context: Var, w: &CdaVars, n_heads: usize) -> Result<CdaOutput> {
    let d_model = *tape.value(queries).shape().last().unwrap_or(&0);
    if tape.value(context).shape().last() != Some(&d_model) {
        bail!(Shape, "query width {d_model} does not match context {:?}", tape.value(context).shape());
    }
    if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
        bail!(Config, "d_model {d_model} is not divisible into {n_heads} heads");
    }
    let head_dim = d_model / n_heads;
    let q = tape.matmul(queries, w.w_q)?;
    let k = tape.matmul(context, w.w_k)?;
    let v = tape.matmul(context, w.w_v)?;
    let q = tape.split_heads(q, n_heads)?;
    let k = tape.split_heads(k, n_heads)?;
    let v = tape.split_heads(v, n_heads)?;
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / libm::sqrt(head_dim as f64));
    let attention = tape.softmax(scores, None)?;
    let heads = tape.bmm(attention, v, false)?;
    let merged = tape.merge_heads(heads, n_heads)?;
    let x_cm = tape.matmul(merged, w.w_o)?;
    Ok(CdaOutput { x_cm, attention })
}

/// Plain-tensor weights for [`apply_cross_domain_attention`].
#[derive(Debug, Clone)]
pub struct CdaWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
}

/// [`cross_domain_attention`] for one sample: `x_alpha [C × d]` queries
/// `x_beta [T' × d]`. Returns `x_cm [C × d]` and attention `[H × C × T']`.
pub fn apply_cross_domain_attention(x_alpha: &Tensor, x_beta: &Tensor, w: &CdaWeights, n_heads: usize) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let qa = tape.constant(x_alpha.clone().reshape(&[1, x_alpha.dim(0), x_alpha.dim(1)])?);
    let kb = tape.constant(x_beta.clone().reshape(&[1, x_beta.dim(0), x_beta.dim(1)])?);
    let vars = CdaVars {
        w_q: tape.constant(w.w_q.clone()),
        w_k: tape.constant(w.w_k.clone()),
        w_v: tape.constant(w.w_v.clone()),
        w_o: tape.constant(w.w_o.clone()),
    };
    let out = cross_domain_attention(&mut tape, qa, kb, &vars, n_heads)?;
    let s = tape.value(out.x_cm).shape().to_vec();
    Ok((tape.value(out.x_cm).clone().reshape(&s[1..])?, tape.value(out.attention).clone()))
}

/// CDA block bound to its slots in a [`ModelParams`].
#[derive(Debug, Clone)]
pub struct Cda {
    cfg: CdaConfig,
    slots: [usize; 4],
}

impl Cda {
    pub fn register(cfg: &CdaConfig, params: &mut ModelParams, init: &mut Initializer) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut slot = |name: &str| params.push(name, init.fan_in(&[d, d], d));
        let slots = [slot("cda.w_q"), slot("cda.w_k"), slot("cda.w_v"), slot("cda.w_o")];
        Ok(Self { cfg: cfg.clone(), slots })
    }

    pub fn config(&self) -> &CdaConfig {
        &self.cfg
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x_alpha: Var, x_beta: Var) -> Result<CdaOutput> {
        let w = CdaVars {
            w_q: vars[self.slots[0]],
            w_k: vars[self.slots[1]],
            w_v: vars[self.slots[2]],
            w_o: vars[self.slots[3]],
        };
        let (q, kv) = match self.cfg.query_domain {
            QueryDomain::Spatial => (x_alpha, x_beta),
            QueryDomain::Temporal => (x_beta, x_alpha),
        };
        cross_domain_attention(tape, q, kv, &w, self.cfg.n_heads)
    }
}

/// Second fusion step: mean-pool each branch over its node/time axis and
/// concatenate as `[pool(x_alpha), pool(x_beta), pool(x_cm)]`.
pub fn two_step_fuse(tape: &mut Tape, x_alpha: Var, x_beta: Var, x_cm: Var) -> Result<Var> {
    let pa = tape.mean_axis1(x_alpha)?;
    let pb = tape.mean_axis1(x_beta)?;
    let pc = tape.mean_axis1(x_cm)?;
    tape.concat_last(&[pa, pb, pc])
}

/// Single fusion step: the pooled attention output alone.
pub fn one_step_fuse(tape: &mut Tape, x_cm: Var) -> Result<Var> {
    tape.mean_axis1(x_cm)
}

fn single(t: &Tensor) -> Result<Tensor> {
    if t.rank() != 2 {
        bail!(Shape, "expected [rows x width], got {:?}", t.shape());
    }
    t.clone().reshape(&[1, t.dim(0), t.dim(1)])
}

/// [`two_step_fuse`] on plain `[rows × d]` tensors, returning `[3d]`.
pub fn fuse_two_step(x_alpha: &Tensor, x_beta: &Tensor, x_cm: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let a = tape.constant(single(x_alpha)?);
    let b = tape.constant(single(x_beta)?);
    let c = tape.constant(single(x_cm)?);
    let y = two_step_fuse(&mut tape, a, b, c)?;
    let n = tape.value(y).len();
    tape.value(y).clone().reshape(&[n])
}

/// [`one_step_fuse`] on a plain `[rows × d]` tensor, returning `[d]`.
pub fn fuse_one_step(x_cm: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let c = tape.constant(single(x_cm)?);
    let y = one_step_fuse(&mut tape, c)?;
    let n = tape.value(y).len();
    tape.value(y).clone().reshape(&[n])
}

/// Width of the classifier's hidden layer.
pub const CLASSIFIER_HIDDEN: usize = 64;
pub const N_CLASSES: usize = 2;

/// Two dense layers, `in → 64 (ReLU) → 2`.
#[derive(Debug, Clone)]
pub struct Classifier {
    slots: [usize; 4],
    in_width: usize,
}

impl Classifier {
    pub fn register(in_width: usize, params: &mut ModelParams, init: &mut Initializer) -> Self {
        let h = CLASSIFIER_HIDDEN;
        let slots = [
            params.push("head.fc1.w", init.fan_in(&[in_width, h], in_width)),
            params.push("head.fc1.b", init.fan_in(&[h], in_width)),
            params.push("head.fc2.w", init.fan_in(&[h, N_CLASSES], h)),
            params.push("head.fc2.b", init.fan_in(&[N_CLASSES], h)),
        ];
        Self { slots, in_width }
    }

    pub fn in_width(&self) -> usize {
        self.in_width
    }

    /// `x [N × in] -> logits [N × 2]`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        classify(tape, x, [vars[self.slots[0]], vars[self.slots[1]], vars[self.slots[2]], vars[self.slots[3]]])
    }
}

/// `fc2(ReLU(fc1(x)))` with weights `[w1, b1, w2, b2]`.
pub fn classify(tape: &mut Tape, x: Var, weights: [Var; 4]) -> Result<Var> {
    let [w1, b1, w2, b2] = weights;
    let h = linear(tape, x, w1, Some(b1))?;
    let h = tape.relu(h);
    linear(tape, h, w2, Some(b2))
}

/// Collects `vars` for [`classify`] from plain tensors.
pub fn classifier_logits(x_fc: &Tensor, weights: &[Tensor; 4]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(x_fc.clone().reshape(&[1, x_fc.len()])?);
    let w: Vec<Var> = weights.iter().map(|t| tape.constant(t.clone())).collect();
    let y = classify(&mut tape, x, [w[0], w[1], w[2], w[3]])?;
    tape.value(y).clone().reshape(&[N_CLASSES])
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn branch_order_in_two_step() {
        let a = Tensor::full(&[5, 4], 1.0);
        let b = Tensor::full(&[3, 4], 2.0);
        let c = Tensor::full(&[5, 4], 3.0);
        let x = fuse_two_step(&a, &b, &c).unwrap();
        let mut expected = vec![1.0; 4];
        expected.extend([2.0; 4]);
        expected.extend([3.0; 4]);
        assert_eq!(x.data(), &expected[..]);
    }

    #[test]
    fn zero_fusion() {
        let z = Tensor::zeros(&[3, 64]);
        let x = fuse_two_step(&z, &Tensor::zeros(&[30, 64]), &z).unwrap();
        assert_eq!(x.shape(), &[192]);
        assert!(x.data().iter().all(|&v| v == 0.0));
        assert!(fuse_one_step(&z).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = CdaConfig { n_heads: 7, ..CdaConfig::default() };
        assert!(matches!(cfg.validate(), Err(crate::Error::Config(_))));
    }

    #[test]
    fn zero_classifier_gives_zero_logits() {
        let w = [Tensor::zeros(&[192, 64]), Tensor::zeros(&[64]), Tensor::zeros(&[64, 2]), Tensor::zeros(&[2])];
        let y = classifier_logits(&Tensor::zeros(&[192]), &w).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }
}
