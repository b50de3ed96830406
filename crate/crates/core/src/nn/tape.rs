//! Reverse-mode differentiation over an explicit computation tape.
//!
//! Every operation records its inputs and whatever forward intermediates the
//! backward rule needs. [`Tape::backward`] walks the nodes in reverse
//! insertion order, which is a valid reverse topological order because a
//! node can only reference nodes created before it.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    AddBias { x: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Relu { x: Var },
    LeakyRelu { x: Var, slope: f64 },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Conv1d { x: Var, w: Var, b: Option<Var>, stride: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    SwapLast2 { x: Var },
    SelectAxis1 { x: Var, index: usize },
    StackAxis1 { xs: Vec<Var> },
    SliceLast { x: Var, start: usize },
    ConcatLast { xs: Vec<Var> },
    ReverseAxis1 { x: Var },
    Bmm { a: Var, b: Var, trans_b: bool },
    PairSum { a: Var, b: Var },
    Softmax { x: Var },
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    MeanAxis1 { x: Var },
    Reshape { x: Var },
    CrossEntropy { logits: Var, labels: Vec<usize> },
    WeightedSum { x: Var, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased per-channel variance.
    pub var: Vec<f64>,
}

/// A computation tape. One tape per forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros if `v` did not
    /// contribute.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.grads[v.0].take() {
            Some(g) => Tensor::new(shape, g).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

fn inner(shape: &[usize], from: usize) -> usize {
    shape[from..].iter().product()
}

fn shape3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => bail!(Shape, "{what} expects rank 3, got {:?}", s),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `a [.. × k] · b [k × n] -> [.. × n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rank() != 2 || av.rank() == 0 {
            bail!(Shape, "matmul {:?} x {:?}", av.shape(), bv.shape());
        }
        let k = *av.shape().last().unwrap();
        let (bk, n) = (bv.dim(0), bv.dim(1));
        if k != bk {
            bail!(Shape, "matmul inner dims {:?} x {:?}", av.shape(), bv.shape());
        }
        let m = av.len() / k.max(1);
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a_ip = ad[i * k + p];
                if a_ip == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += a_ip * bv;
                }
            }
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b }, rg))
    }

    /// Adds `b [n]` to every length-`n` row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let n = bv.len();
        if xv.shape().last() != Some(&n) || bv.rank() != 1 {
            bail!(Shape, "add_bias {:?} + {:?}", xv.shape(), bv.shape());
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddBias { x, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_values(a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_values(a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            bail!(Shape, "elementwise {:?} vs {:?}", av.shape(), bv.shape());
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale { x, c }, |v| v * c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu { x }, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Op::LeakyRelu { x, slope }, |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid { x }, sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh { x }, libm::tanh)
    }

    /// Cross-correlation `x [N × C_in × L]` with `w [C_out × C_in × K]`,
    /// producing `[N × C_out × L']`, `L' = (L - K) / stride + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (n, cin, len) = shape3(self.value(x), "conv1d input")?;
        let (cout, wcin, k) = shape3(self.value(w), "conv1d kernel")?;
        if wcin != cin {
            bail!(Shape, "conv1d kernel expects {wcin} input channels, got {cin}");
        }
        if stride == 0 {
            bail!(Config, "conv1d stride must be >= 1");
        }
        if len < k {
            bail!(Shape, "conv1d input length {len} shorter than kernel {k}");
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                bail!(Shape, "conv1d bias {:?} for {cout} channels", self.value(b).shape());
            }
        }
        let lout = (len - k) / stride + 1;
        let ck = cin * k;
        let mut out = vec![0.0; n * cout * lout];
        let mut cols = vec![0.0; ck * lout];
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let bias = b.map(|b| self.value(b).data());
        for s in 0..n {
            im2col(&xd[s * cin * len..(s + 1) * cin * len], cin, len, k, stride, lout, &mut cols);
            for o in 0..cout {
                let y = &mut out[(s * cout + o) * lout..(s * cout + o + 1) * lout];
                if let Some(bias) = bias {
                    y.fill(bias[o]);
                }
                for (r, &wv) in wd[o * ck..(o + 1) * ck].iter().enumerate() {
                    for (yv, &cv) in y.iter_mut().zip(&cols[r * lout..(r + 1) * lout]) {
                        *yv += wv * cv;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![n, cout, lout], out)?;
        Ok(self.push(value, Op::Conv1d { x, w, b, stride }, rg))
    }

    /// Training-mode batch norm over `x [N × C × L]`, normalising each
    /// channel across `(N, L)`.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (n, c, l) = shape3(self.value(x), "batch_norm")?;
        let m = n * l;
        if m <= 1 {
            bail!(Validation, "batch_norm in train mode needs more than one value per channel");
        }
        self.check_affine(gamma, beta, c)?;
        let xd = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for s in 0..n {
            for ch in 0..c {
                mean[ch] += xd[(s * c + ch) * l..(s * c + ch + 1) * l].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        for s in 0..n {
            for ch in 0..c {
                let mu = mean[ch];
                var[ch] += xd[(s * c + ch) * l..(s * c + ch + 1) * l]
                    .iter()
                    .map(|v| (v - mu) * (v - mu))
                    .sum::<f64>();
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / m as f64).collect();
        let unbiased: Vec<f64> = var.iter().map(|v| v / (m - 1) as f64).collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, &inv_std, true);
        Ok((out, BatchStats { mean, var: unbiased }))
    }

    /// Eval-mode batch norm using fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, _) = shape3(self.value(x), "batch_norm")?;
        self.check_affine(gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            bail!(Shape, "batch_norm running stats do not match {c} channels");
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        Ok(self.bn_apply(x, gamma, beta, running_mean, &inv_std, false))
    }

    fn check_affine(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            bail!(Shape, "batch_norm affine params must have shape [{c}]");
        }
        Ok(())
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        train: bool,
    ) -> Var {
        let xv = self.value(x);
        let (c, l) = (xv.dim(1), xv.dim(2));
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = xv.data().to_vec();
        let mut out = xv.clone();
        for (idx, (xh, o)) in xhat.iter_mut().zip(out.data_mut()).enumerate() {
            let ch = (idx / l) % c;
            *xh = (*xh - mean[ch]) * inv_std[ch];
            *o = g[ch] * *xh + b[ch];
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std: inv_std.to_vec(), train };
        self.push(out, op, rg)
    }

    /// `[N × A × B] -> [N × B × A]`.
    pub fn swap_last2(&mut self, x: Var) -> Result<Var> {
        let (n, a, b) = shape3(self.value(x), "swap_last2")?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * a * b];
        for s in 0..n {
            for i in 0..a {
                for j in 0..b {
                    out[(s * b + j) * a + i] = xd[(s * a + i) * b + j];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, b, a], out)?, Op::SwapLast2 { x }, rg))
    }

    /// `[N × T × ..] -> [N × ..]` at position `index` of axis 1.
    pub fn select_axis1(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 2 || index >= xv.dim(1) {
            bail!(Shape, "select_axis1({index}) on {:?}", xv.shape());
        }
        let (n, t, d) = (xv.dim(0), xv.dim(1), inner(xv.shape(), 2));
        let mut out = Vec::with_capacity(n * d);
        for s in 0..n {
            out.extend_from_slice(&xv.data()[(s * t + index) * d..(s * t + index + 1) * d]);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&xv.shape()[2..]);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::SelectAxis1 { x, index }, rg))
    }

    /// Inverse of [`Tape::select_axis1`]: stacks `[N × ..]` tensors into
    /// `[N × T × ..]`.
    pub fn stack_axis1(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            bail!(EmptyInput, "stack_axis1 of zero tensors");
        };
        let fshape = self.value(first).shape().to_vec();
        if fshape.is_empty() {
            bail!(Shape, "stack_axis1 needs rank >= 1");
        }
        let (n, d, t) = (fshape[0], inner(&fshape, 1), xs.len());
        let mut out = vec![0.0; n * t * d];
        for (ti, &x) in xs.iter().enumerate() {
            let xv = self.value(x);
            if xv.shape() != fshape.as_slice() {
                bail!(Shape, "stack_axis1 {:?} with {:?}", fshape, xv.shape());
            }
            for s in 0..n {
                out[(s * t + ti) * d..(s * t + ti + 1) * d]
                    .copy_from_slice(&xv.data()[s * d..(s + 1) * d]);
            }
        }
        let mut shape = vec![n, t];
        shape.extend_from_slice(&fshape[1..]);
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::new(shape, out)?, Op::StackAxis1 { xs: xs.to_vec() }, rg))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let width = *xv.shape().last().unwrap_or(&0);
        if start + len > width {
            bail!(Shape, "slice_last {start}..{} of width {width}", start + len);
        }
        let mut out = Vec::with_capacity(xv.len() / width.max(1) * len);
        for row in xv.data().chunks(width) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::SliceLast { x, start }, rg))
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            bail!(EmptyInput, "concat_last of zero tensors");
        };
        let lead = {
            let s = self.value(first).shape();
            s[..s.len() - 1].to_vec()
        };
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.value(x).shape();
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                bail!(Shape, "concat_last leading dims {:?} vs {:?}", lead, s);
            }
            widths.push(s[lead.len()]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::new(shape, out)?, Op::ConcatLast { xs: xs.to_vec() }, rg))
    }

    /// Reverses axis 1 of `[N × T × ..]`.
    pub fn reverse_axis1(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 2 {
            bail!(Shape, "reverse_axis1 on {:?}", xv.shape());
        }
        let out = reverse_t(xv.data(), xv.dim(0), xv.dim(1), inner(xv.shape(), 2));
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::ReverseAxis1 { x }, rg))
    }

    /// Batched matmul: `a [B × m × k]` with `b [B × k × n]`, or with
    /// `b [B × n × k]` transposed when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ba, m, k) = shape3(self.value(a), "bmm lhs")?;
        let (bb, r1, r2) = shape3(self.value(b), "bmm rhs")?;
        let (bk, n) = if trans_b { (r2, r1) } else { (r1, r2) };
        if ba != bb || bk != k {
            bail!(Shape, "bmm {:?} x {:?} (trans_b={trans_b})", self.value(a).shape(), self.value(b).shape());
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; ba * m * n];
        for s in 0..ba {
            let am = &ad[s * m * k..(s + 1) * m * k];
            let bm = &bd[s * k * n..(s + 1) * k * n];
            let om = &mut out[s * m * n..(s + 1) * m * n];
            if trans_b {
                for i in 0..m {
                    let arow = &am[i * k..(i + 1) * k];
                    for j in 0..n {
                        om[i * n + j] = dot(arow, &bm[j * k..(j + 1) * k]);
                    }
                }
            } else {
                for i in 0..m {
                    let orow = &mut om[i * n..(i + 1) * n];
                    for p in 0..k {
                        let a_ip = am[i * k + p];
                        if a_ip == 0.0 {
                            continue;
                        }
                        for (o, &bv) in orow.iter_mut().zip(&bm[p * n..(p + 1) * n]) {
                            *o += a_ip * bv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![ba, m, n], out)?, Op::Bmm { a, b, trans_b }, rg))
    }

    /// `out[b, i, j] = a[b, i] + c[b, j]` for `a, c [B × C]`.
    pub fn pair_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || av.shape() != bv.shape() {
            bail!(Shape, "pair_sum {:?} and {:?}", av.shape(), bv.shape());
        }
        let (bs, c) = (av.dim(0), av.dim(1));
        let mut out = vec![0.0; bs * c * c];
        for s in 0..bs {
            for i in 0..c {
                let ai = av.data()[s * c + i];
                for j in 0..c {
                    out[(s * c + i) * c + j] = ai + bv.data()[s * c + j];
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![bs, c, c], out)?, Op::PairSum { a, b }, rg))
    }

    /// Softmax over the last axis with max subtraction. Entries where
    /// `mask` is `false` are excluded and come out exactly zero; a fully
    /// masked row is all zeros.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(m) = mask {
            if m.len() != xv.len() {
                bail!(Shape, "softmax mask has {} entries for {:?}", m.len(), xv.shape());
            }
        }
        let width = *xv.shape().last().unwrap_or(&1);
        let mut out = xv.clone();
        for (r, row) in out.data_mut().chunks_mut(width.max(1)).enumerate() {
            let keep = |j: usize| mask.is_none_or(|m| m[r * width + j]);
            let mx = (0..row.len()).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                *v = if keep(j) { libm::exp(*v - mx) } else { 0.0 };
                total += *v;
            }
            if total > 0.0 {
                row.iter_mut().for_each(|v| *v /= total);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { x }, rg))
    }

    /// `[N × S × H·d] -> [N·H × S × d]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let (n, s, w) = shape3(self.value(x), "split_heads")?;
        if heads == 0 || w % heads != 0 {
            bail!(Config, "width {w} not divisible by {heads} heads");
        }
        let d = w / heads;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * s * w];
        for b in 0..n {
            for t in 0..s {
                for h in 0..heads {
                    let src = (b * s + t) * w + h * d;
                    let dst = ((b * heads + h) * s + t) * d;
                    out[dst..dst + d].copy_from_slice(&xd[src..src + d]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n * heads, s, d], out)?, Op::SplitHeads { x, heads }, rg))
    }

    /// `[N·H × S × d] -> [N × S × H·d]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let (nh, s, d) = shape3(self.value(x), "merge_heads")?;
        if heads == 0 || nh % heads != 0 {
            bail!(Config, "leading dim {nh} not divisible by {heads} heads");
        }
        let n = nh / heads;
        let out = merge_heads_data(self.value(x).data(), n, heads, s, d);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, s, heads * d], out)?, Op::MergeHeads { x, heads }, rg))
    }

    /// Mean over axis 1: `[N × S × ..] -> [N × ..]`.
    pub fn mean_axis1(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 2 || xv.dim(1) == 0 {
            bail!(Shape, "mean_axis1 on {:?}", xv.shape());
        }
        let (n, s, d) = (xv.dim(0), xv.dim(1), inner(xv.shape(), 2));
        let mut out = vec![0.0; n * d];
        for b in 0..n {
            let o = &mut out[b * d..(b + 1) * d];
            for t in 0..s {
                for (ov, &xv) in o.iter_mut().zip(&xv.data()[(b * s + t) * d..(b * s + t + 1) * d]) {
                    *ov += xv;
                }
            }
            o.iter_mut().for_each(|v| *v /= s as f64);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&xv.shape()[2..]);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::MeanAxis1 { x }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    /// Mean cross-entropy of `logits [N × K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.dim(0) != labels.len() || lv.dim(0) == 0 {
            bail!(Shape, "cross_entropy logits {:?} with {} labels", lv.shape(), labels.len());
        }
        let k = lv.dim(1);
        if labels.iter().any(|&y| y >= k) {
            bail!(Validation, "label out of range for {k} classes");
        }
        let mut loss = 0.0;
        for (row, &y) in lv.data().chunks(k).zip(labels) {
            loss += log_sum_exp(row) - row[y];
        }
        loss /= labels.len() as f64;
        let rg = self.rg(logits);
        let op = Op::CrossEntropy { logits, labels: labels.to_vec() };
        Ok(self.push(Tensor::new(vec![1], vec![loss])?, op, rg))
    }

    /// `Σ x ⊙ weights`, a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            bail!(Shape, "weighted_sum of {} values with {} weights", xv.len(), weights.len());
        }
        let s = dot(xv.data(), weights);
        let rg = self.rg(x);
        let op = Op::WeightedSum { x, weights: weights.to_vec() };
        Ok(self.push(Tensor::new(vec![1], vec![s])?, op, rg))
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            bail!(Shape, "backward needs a scalar, got {:?}", self.value(loss).shape());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            self.backprop_node(node, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (k, n) = (bv.dim(0), bv.dim(1));
                let m = av.len() / k.max(1);
                if self.rg(*a) {
                    let g = acc(grads, *a, av.len());
                    for i in 0..m {
                        let dyr = &dy[i * n..(i + 1) * n];
                        for p in 0..k {
                            g[i * k + p] += dot(dyr, &bv.data()[p * n..(p + 1) * n]);
                        }
                    }
                }
                if self.rg(*b) {
                    let g = acc(grads, *b, bv.len());
                    for i in 0..m {
                        let dyr = &dy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = av.data()[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            for (gv, &d) in g[p * n..(p + 1) * n].iter_mut().zip(dyr) {
                                *gv += a_ip * d;
                            }
                        }
                    }
                }
            }
            Op::AddBias { x, b } => {
                let n = self.value(*b).len();
                add_into(grads, *x, dy, self.rg(*x));
                if self.rg(*b) {
                    let g = acc(grads, *b, n);
                    for row in dy.chunks(n) {
                        for (gv, &d) in g.iter_mut().zip(row) {
                            *gv += d;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                add_into(grads, *a, dy, self.rg(*a));
                add_into(grads, *b, dy, self.rg(*b));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let g = acc(grads, *a, av.len());
                    for ((gv, &d), &o) in g.iter_mut().zip(dy).zip(bv) {
                        *gv += d * o;
                    }
                }
                if self.rg(*b) {
                    let g = acc(grads, *b, bv.len());
                    for ((gv, &d), &o) in g.iter_mut().zip(dy).zip(av) {
                        *gv += d * o;
                    }
                }
            }
            Op::Scale { x, c } => self.pointwise(grads, *x, dy, |_, _| *c),
            Op::Relu { x } => self.pointwise(grads, *x, dy, |xv, _| if xv > 0.0 { 1.0 } else { 0.0 }),
            Op::LeakyRelu { x, slope } => {
                self.pointwise(grads, *x, dy, |xv, _| if xv > 0.0 { 1.0 } else { *slope })
            }
            Op::Sigmoid { x } => {
                self.pointwise_out(grads, *x, dy, y, |yv| yv * (1.0 - yv));
            }
            Op::Tanh { x } => {
                self.pointwise_out(grads, *x, dy, y, |yv| 1.0 - yv * yv);
            }
            Op::Conv1d { x, w, b, stride } => self.conv1d_backward(*x, *w, *b, *stride, dy, grads),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let xv = self.value(*x);
                let (n, c, l) = (xv.dim(0), xv.dim(1), xv.dim(2));
                let g = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (idx, (&d, &xh)) in dy.iter().zip(xhat).enumerate() {
                    let ch = (idx / l) % c;
                    dgamma[ch] += d * xh;
                    dbeta[ch] += d;
                }
                if self.rg(*x) {
                    let gx = acc(grads, *x, xv.len());
                    let m = (n * l) as f64;
                    for (idx, gv) in gx.iter_mut().enumerate() {
                        let ch = (idx / l) % c;
                        let dxhat = dy[idx] * g[ch];
                        *gv += if *train {
                            // sum(dxhat) = g·dbeta, sum(dxhat·xhat) = g·dgamma
                            inv_std[ch] / m
                                * (m * dxhat - g[ch] * dbeta[ch] - xhat[idx] * g[ch] * dgamma[ch])
                        } else {
                            dxhat * inv_std[ch]
                        };
                    }
                }
                add_into(grads, *gamma, &dgamma, self.rg(*gamma));
                add_into(grads, *beta, &dbeta, self.rg(*beta));
            }
            Op::SwapLast2 { x } => {
                if self.rg(*x) {
                    let s = node.value.shape();
                    let (n, b, a) = (s[0], s[1], s[2]);
                    let g = acc(grads, *x, n * a * b);
                    for bb in 0..n {
                        for i in 0..a {
                            for j in 0..b {
                                g[(bb * a + i) * b + j] += dy[(bb * b + j) * a + i];
                            }
                        }
                    }
                }
            }
            Op::SelectAxis1 { x, index } => {
                if self.rg(*x) {
                    let xs = self.value(*x).shape();
                    let (n, t, d) = (xs[0], xs[1], inner(xs, 2));
                    let g = acc(grads, *x, n * t * d);
                    for s in 0..n {
                        let dst = &mut g[(s * t + index) * d..(s * t + index + 1) * d];
                        for (gv, &dv) in dst.iter_mut().zip(&dy[s * d..(s + 1) * d]) {
                            *gv += dv;
                        }
                    }
                }
            }
            Op::StackAxis1 { xs } => {
                let s = node.value.shape();
                let (n, t, d) = (s[0], s[1], inner(s, 2));
                for (ti, &x) in xs.iter().enumerate() {
                    if !self.rg(x) {
                        continue;
                    }
                    let g = acc(grads, x, n * d);
                    for b in 0..n {
                        for (gv, &dv) in g[b * d..(b + 1) * d]
                            .iter_mut()
                            .zip(&dy[(b * t + ti) * d..(b * t + ti + 1) * d])
                        {
                            *gv += dv;
                        }
                    }
                }
            }
            Op::SliceLast { x, start } => {
                if self.rg(*x) {
                    let xv = self.value(*x);
                    let width = *xv.shape().last().unwrap();
                    let len = *node.value.shape().last().unwrap();
                    let g = acc(grads, *x, xv.len());
                    for (grow, drow) in g.chunks_mut(width).zip(dy.chunks(len)) {
                        for (gv, &dv) in grow[*start..*start + len].iter_mut().zip(drow) {
                            *gv += dv;
                        }
                    }
                }
            }
            Op::ConcatLast { xs } => {
                let total = *node.value.shape().last().unwrap();
                let mut offset = 0;
                for &x in xs {
                    let xv = self.value(x);
                    let w = *xv.shape().last().unwrap();
                    if self.rg(x) {
                        let g = acc(grads, x, xv.len());
                        for (grow, drow) in g.chunks_mut(w).zip(dy.chunks(total)) {
                            for (gv, &dv) in grow.iter_mut().zip(&drow[offset..offset + w]) {
                                *gv += dv;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ReverseAxis1 { x } => {
                let s = node.value.shape();
                let r = reverse_t(dy, s[0], s[1], inner(s, 2));
                add_into(grads, *x, &r, self.rg(*x));
            }
            Op::Bmm { a, b, trans_b } => self.bmm_backward(*a, *b, *trans_b, dy, grads),
            Op::PairSum { a, b } => {
                let s = node.value.shape();
                let (bs, c) = (s[0], s[1]);
                let mut da = vec![0.0; bs * c];
                let mut db = vec![0.0; bs * c];
                for b in 0..bs {
                    for i in 0..c {
                        for j in 0..c {
                            let d = dy[(b * c + i) * c + j];
                            da[b * c + i] += d;
                            db[b * c + j] += d;
                        }
                    }
                }
                add_into(grads, *a, &da, self.rg(*a));
                add_into(grads, *b, &db, self.rg(*b));
            }
            Op::Softmax { x } => {
                if self.rg(*x) {
                    let width = *node.value.shape().last().unwrap_or(&1);
                    let g = acc(grads, *x, y.len());
                    for ((grow, yrow), drow) in
                        g.chunks_mut(width).zip(y.chunks(width)).zip(dy.chunks(width))
                    {
                        let s = dot(yrow, drow);
                        for ((gv, &yv), &dv) in grow.iter_mut().zip(yrow).zip(drow) {
                            *gv += yv * (dv - s);
                        }
                    }
                }
            }
            Op::SplitHeads { x, heads } => {
                let s = node.value.shape();
                let (n, t, d) = (s[0] / heads, s[1], s[2]);
                let r = merge_heads_data(dy, n, *heads, t, d);
                add_into(grads, *x, &r, self.rg(*x));
            }
            Op::MergeHeads { x, heads } => {
                if self.rg(*x) {
                    let xs = self.value(*x).shape();
                    let (n, t, d) = (xs[0] / heads, xs[1], xs[2]);
                    let w = heads * d;
                    let g = acc(grads, *x, n * heads * t * d);
                    for b in 0..n {
                        for tt in 0..t {
                            for h in 0..*heads {
                                let src = (b * t + tt) * w + h * d;
                                let dst = ((b * heads + h) * t + tt) * d;
                                for (gv, &dv) in g[dst..dst + d].iter_mut().zip(&dy[src..src + d]) {
                                    *gv += dv;
                                }
                            }
                        }
                    }
                }
            }
            Op::MeanAxis1 { x } => {
                if self.rg(*x) {
                    let xs = self.value(*x).shape();
                    let (n, s, d) = (xs[0], xs[1], inner(xs, 2));
                    let g = acc(grads, *x, n * s * d);
                    let inv = 1.0 / s as f64;
                    for b in 0..n {
                        for t in 0..s {
                            for (gv, &dv) in g[(b * s + t) * d..(b * s + t + 1) * d]
                                .iter_mut()
                                .zip(&dy[b * d..(b + 1) * d])
                            {
                                *gv += dv * inv;
                            }
                        }
                    }
                }
            }
            Op::Reshape { x } => add_into(grads, *x, dy, self.rg(*x)),
            Op::CrossEntropy { logits, labels } => {
                if self.rg(*logits) {
                    let lv = self.value(*logits);
                    let k = lv.dim(1);
                    let scale = dy[0] / labels.len() as f64;
                    let g = acc(grads, *logits, lv.len());
                    for ((grow, row), &lab) in g.chunks_mut(k).zip(lv.data().chunks(k)).zip(labels) {
                        let lse = log_sum_exp(row);
                        for (j, (gv, &z)) in grow.iter_mut().zip(row).enumerate() {
                            let p = libm::exp(z - lse);
                            *gv += scale * (p - if j == lab { 1.0 } else { 0.0 });
                        }
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                if self.rg(*x) {
                    let g = acc(grads, *x, weights.len());
                    for (gv, &w) in g.iter_mut().zip(weights) {
                        *gv += w * dy[0];
                    }
                }
            }
        }
    }

    fn pointwise(
        &self,
        grads: &mut [Option<Vec<f64>>],
        x: Var,
        dy: &[f64],
        deriv: impl Fn(f64, f64) -> f64,
    ) {
        if !self.rg(x) {
            return;
        }
        let xv = self.value(x).data();
        let g = acc(grads, x, xv.len());
        for ((gv, &d), &xx) in g.iter_mut().zip(dy).zip(xv) {
            *gv += d * deriv(xx, d);
        }
    }

    fn pointwise_out(
        &self,
        grads: &mut [Option<Vec<f64>>],
        x: Var,
        dy: &[f64],
        y: &[f64],
        deriv: impl Fn(f64) -> f64,
    ) {
        if !self.rg(x) {
            return;
        }
        let g = acc(grads, x, y.len());
        for ((gv, &d), &yv) in g.iter_mut().zip(dy).zip(y) {
            *gv += d * deriv(yv);
        }
    }

    fn conv1d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        dy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, cin, len) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let (cout, k) = (wv.dim(0), wv.dim(2));
        let lout = (len - k) / stride + 1;
        if let Some(b) = b {
            if self.rg(b) {
                let g = acc(grads, b, cout);
                for s in 0..n {
                    for (o, gv) in g.iter_mut().enumerate() {
                        *gv += dy[(s * cout + o) * lout..(s * cout + o + 1) * lout].iter().sum::<f64>();
                    }
                }
            }
        }
        let ck = cin * k;
        let mut cols = vec![0.0; ck * lout];
        let mut dcols = vec![0.0; ck * lout];
        let (need_w, need_x) = (self.rg(w), self.rg(x));
        for s in 0..n {
            let dys = &dy[s * cout * lout..(s + 1) * cout * lout];
            if need_w {
                im2col(&xv.data()[s * cin * len..(s + 1) * cin * len], cin, len, k, stride, lout, &mut cols);
                let g = acc(grads, w, wv.len());
                for o in 0..cout {
                    let drow = &dys[o * lout..(o + 1) * lout];
                    for (r, gv) in g[o * ck..(o + 1) * ck].iter_mut().enumerate() {
                        *gv += dot(drow, &cols[r * lout..(r + 1) * lout]);
                    }
                }
            }
            if need_x {
                dcols.fill(0.0);
                for o in 0..cout {
                    let drow = &dys[o * lout..(o + 1) * lout];
                    for (r, &wv) in wv.data()[o * ck..(o + 1) * ck].iter().enumerate() {
                        for (dc, &d) in dcols[r * lout..(r + 1) * lout].iter_mut().zip(drow) {
                            *dc += wv * d;
                        }
                    }
                }
                let g = acc(grads, x, xv.len());
                let gs = &mut g[s * cin * len..(s + 1) * cin * len];
                for c in 0..cin {
                    for kk in 0..k {
                        let row = &dcols[(c * k + kk) * lout..(c * k + kk + 1) * lout];
                        for (t, &d) in row.iter().enumerate() {
                            gs[c * len + t * stride + kk] += d;
                        }
                    }
                }
            }
        }
    }

    fn bmm_backward(&self, a: Var, b: Var, trans_b: bool, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (av, bv) = (self.value(a), self.value(b));
        let (bs, m, k) = (av.dim(0), av.dim(1), av.dim(2));
        let n = if trans_b { bv.dim(1) } else { bv.dim(2) };
        if self.rg(a) {
            let g = acc(grads, a, av.len());
            for s in 0..bs {
                let bm = &bv.data()[s * k * n..(s + 1) * k * n];
                for i in 0..m {
                    let drow = &dy[(s * m + i) * n..(s * m + i + 1) * n];
                    let grow = &mut g[(s * m + i) * k..(s * m + i + 1) * k];
                    if trans_b {
                        // da[i, :] = Σ_j dy[i, j] b[j, :]
                        for (j, &d) in drow.iter().enumerate() {
                            for (gv, &bv) in grow.iter_mut().zip(&bm[j * k..(j + 1) * k]) {
                                *gv += d * bv;
                            }
                        }
                    } else {
                        for (p, gv) in grow.iter_mut().enumerate() {
                            *gv += dot(drow, &bm[p * n..(p + 1) * n]);
                        }
                    }
                }
            }
        }
        if self.rg(b) {
            let g = acc(grads, b, bv.len());
            for s in 0..bs {
                let am = &av.data()[s * m * k..(s + 1) * m * k];
                let gm = &mut g[s * k * n..(s + 1) * k * n];
                for i in 0..m {
                    let drow = &dy[(s * m + i) * n..(s * m + i + 1) * n];
                    let arow = &am[i * k..(i + 1) * k];
                    if trans_b {
                        // db[j, :] += dy[i, j] a[i, :]
                        for (j, &d) in drow.iter().enumerate() {
                            for (gv, &av) in gm[j * k..(j + 1) * k].iter_mut().zip(arow) {
                                *gv += d * av;
                            }
                        }
                    } else {
                        for (p, &a_ip) in arow.iter().enumerate() {
                            for (gv, &d) in gm[p * n..(p + 1) * n].iter_mut().zip(drow) {
                                *gv += a_ip * d;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Unfolds `x [C × L]` into `cols [(C·K) × L']`, row `c·K + k` holding
/// `x[c, t·stride + k]` for each output position `t`.
fn im2col(x: &[f64], cin: usize, len: usize, k: usize, stride: usize, lout: usize, cols: &mut [f64]) {
    for c in 0..cin {
        let xrow = &x[c * len..(c + 1) * len];
        for kk in 0..k {
            let dst = &mut cols[(c * k + kk) * lout..(c * k + kk + 1) * lout];
            for (t, d) in dst.iter_mut().enumerate() {
                *d = xrow[t * stride + kk];
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(grads: &mut [Option<Vec<f64>>], v: Var, d: &[f64], requires: bool) {
    if !requires {
        return;
    }
    let g = acc(grads, v, d.len());
    for (gv, &dv) in g.iter_mut().zip(d) {
        *gv += dv;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    lanes.iter().sum::<f64>() + tail
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mx + libm::log(row.iter().map(|&z| libm::exp(z - mx)).sum::<f64>())
}

fn reverse_t(data: &[f64], n: usize, t: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for b in 0..n {
        for tt in 0..t {
            let src = (b * t + tt) * d;
            let dst = (b * t + (t - 1 - tt)) * d;
            out[dst..dst + d].copy_from_slice(&data[src..src + d]);
        }
    }
    out
}

fn merge_heads_data(data: &[f64], n: usize, heads: usize, s: usize, d: usize) -> Vec<f64> {
    let w = heads * d;
    let mut out = vec![0.0; n * s * w];
    for b in 0..n {
        for t in 0..s {
            for h in 0..heads {
                let src = ((b * heads + h) * s + t) * d;
                let dst = (b * s + t) * w + h * d;
                out[dst..dst + d].copy_from_slice(&data[src..src + d]);
            }
        }
    }
    out
}
