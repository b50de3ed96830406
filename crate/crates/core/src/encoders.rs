//! The time-frequency (TDEE) and spatial (SDEE) encoders.
//!
//! TDEE turns a standardized raw window `[C × W]` into a time-major
//! sequence `[T' × d]`: three 1-D convolutions (ReLU after the first two,
//! batch norm after the third), a bidirectional LSTM and a final LSTM.
//!
//! SDEE embeds each channel's DE vector, builds the KNN channel graph and
//! runs a stack of GCN or GAT layers, producing `[C × d]` node embeddings.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::graph::{build_graph, ChannelGraph, GraphBatch};
use crate::nn::{
    bilstm, linear, lstm, BatchStats, Initializer, LstmVars, Mode, ModelParams, Tape, Var, BN_EPS,
    LEAKY_SLOPE,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum EncoderKind {
    #[default]
    Gcn,
    Gat,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Gcn => "gcn",
            EncoderKind::Gat => "gat",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gcn" => Ok(Self::Gcn),
            "gat" => Ok(Self::Gat),
            other => bail!(Config, "unknown encoder kind {other:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdeeConfig {
    pub conv_channels: [usize; 3],
    pub kernel_sizes: [usize; 3],
    pub strides: [usize; 3],
    pub bilstm_hidden: usize,
    pub lstm_hidden: usize,
}

impl Default for TdeeConfig {
    fn default() -> Self {
        Self {
            conv_channels: [64, 64, 64],
            kernel_sizes: [7, 5, 3],
            strides: [2, 2, 2],
            bilstm_hidden: 32,
            lstm_hidden: 64,
        }
    }
}

impl TdeeConfig {
    pub fn d_model(&self) -> usize {
        self.lstm_hidden
    }

    /// Sequence length after the conv stack for a `window_len` input.
    pub fn output_len(&self, window_len: usize) -> Result<usize> {
        let mut len = window_len;
        for (&k, &s) in self.kernel_sizes.iter().zip(&self.strides) {
            if s == 0 || len < k {
                bail!(Shape, "window of {window_len} samples is too short for the conv stack");
            }
            len = (len - k) / s + 1;
        }
        Ok(len)
    }
}

#[derive(Debug, Clone, Copy)]
struct LstmSlots {
    w_ih: usize,
    w_hh: usize,
    bias: usize,
}

impl LstmSlots {
    fn register(params: &mut ModelParams, init: &mut Initializer, prefix: &str, d_in: usize, hidden: usize) -> Self {
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        Self {
            w_ih: params.push(&alloc::format!("{prefix}.w_ih"), init.fan_in(&[d_in, 4 * hidden], d_in)),
            w_hh: params.push(&alloc::format!("{prefix}.w_hh"), init.fan_in(&[hidden, 4 * hidden], hidden)),
            bias: params.push(&alloc::format!("{prefix}.bias"), bias),
        }
    }

    fn vars(&self, vars: &[Var]) -> LstmVars {
        LstmVars { w_ih: vars[self.w_ih], w_hh: vars[self.w_hh], bias: vars[self.bias] }
    }
}

/// Time-frequency encoder bound to its slots in a [`ModelParams`].
#[derive(Debug, Clone)]
pub struct Tdee {
    cfg: TdeeConfig,
    conv_w: [usize; 3],
    conv_b: [usize; 3],
    bn_gamma: usize,
    bn_beta: usize,
    bn_mean: usize,
    bn_var: usize,
    forward_lstm: LstmSlots,
    backward_lstm: LstmSlots,
    top_lstm: LstmSlots,
}

impl Tdee {
    pub fn register(cfg: &TdeeConfig, in_channels: usize, params: &mut ModelParams, init: &mut Initializer) -> Self {
        let mut conv_w = [0; 3];
        let mut conv_b = [0; 3];
        let mut cin = in_channels;
        for l in 0..3 {
            let (cout, k) = (cfg.conv_channels[l], cfg.kernel_sizes[l]);
            conv_w[l] = params.push(&alloc::format!("tdee.conv{}.w", l + 1), init.fan_in(&[cout, cin, k], cin * k));
            conv_b[l] = params.push(&alloc::format!("tdee.conv{}.b", l + 1), init.fan_in(&[cout], cin * k));
            cin = cout;
        }
        let c3 = cfg.conv_channels[2];
        let bn_gamma = params.push("tdee.bn.gamma", Tensor::full(&[c3], 1.0));
        let bn_beta = params.push("tdee.bn.beta", Tensor::zeros(&[c3]));
        let bn_mean = params.push_buffer("tdee.bn.running_mean", Tensor::zeros(&[c3]));
        let bn_var = params.push_buffer("tdee.bn.running_var", Tensor::full(&[c3], 1.0));
        let hb = cfg.bilstm_hidden;
        let forward_lstm = LstmSlots::register(params, init, "tdee.bilstm.fwd", c3, hb);
        let backward_lstm = LstmSlots::register(params, init, "tdee.bilstm.bwd", c3, hb);
        let top_lstm = LstmSlots::register(params, init, "tdee.lstm", 2 * hb, cfg.lstm_hidden);
        Self { cfg: cfg.clone(), conv_w, conv_b, bn_gamma, bn_beta, bn_mean, bn_var, forward_lstm, backward_lstm, top_lstm }
    }

    pub fn config(&self) -> &TdeeConfig {
        &self.cfg
    }

    /// Buffer slots of the batch-norm running mean and variance.
    pub fn running_stat_slots(&self) -> (usize, usize) {
        (self.bn_mean, self.bn_var)
    }

    /// `raw [N × C × W] -> x_beta [N × T' × d]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        params: &ModelParams,
        raw: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let mut h = raw;
        for l in 0..3 {
            h = tape.conv1d(h, vars[self.conv_w[l]], Some(vars[self.conv_b[l]]), self.cfg.strides[l])?;
            if l < 2 {
                h = tape.relu(h);
            }
        }
        let (gamma, beta) = (vars[self.bn_gamma], vars[self.bn_beta]);
        let (h, stats) = match mode {
            Mode::Train => {
                let (v, s) = tape.batch_norm_train(h, gamma, beta, BN_EPS)?;
                (v, Some(s))
            }
            Mode::Eval => {
                let mean = params.buffers[self.bn_mean].value.data();
                let var = params.buffers[self.bn_var].value.data();
                (tape.batch_norm_eval(h, gamma, beta, mean, var, BN_EPS)?, None)
            }
        };
        let seq = tape.swap_last2(h)?;
        let seq = bilstm(tape, seq, &self.forward_lstm.vars(vars), &self.backward_lstm.vars(vars))?;
        let out = lstm(tape, seq, &self.top_lstm.vars(vars), None, None)?;
        Ok((out, stats))
    }

    /// Encodes a single window `[C × W]` to `[T' × d]`.
    pub fn encode(&self, params: &ModelParams, raw: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = bind_constants(&mut tape, params);
        let x = tape.constant(raw.clone().reshape(&[1, raw.dim(0), raw.dim(1)])?);
        let (y, _) = self.forward(&mut tape, &vars, params, x, mode)?;
        let s = tape.value(y).shape().to_vec();
        tape.value(y).clone().reshape(&s[1..])
    }
}

/// Registers every trainable tensor of `params` as a constant leaf.
pub(crate) fn bind_constants(tape: &mut Tape, params: &ModelParams) -> Vec<Var> {
    params.trainable.iter().map(|p| tape.constant(p.value.clone())).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdeeConfig {
    pub embed_dim: usize,
    pub encoder_kind: EncoderKind,
    pub n_layers: usize,
    pub gat_heads: usize,
}

impl Default for SdeeConfig {
    fn default() -> Self {
        Self { embed_dim: 64, encoder_kind: EncoderKind::Gcn, n_layers: 2, gat_heads: 1 }
    }
}

/// One GCN layer on a batch: `ReLU(Σ_j c_ij · h_j W)` with
/// `c_ij = 1/√(d̃_i d̃_j)` over `N_i ∪ {i}`.
///
/// `coefficients [N × C × C]`, `h [N × C × F]`, `w [F × F']`.
pub fn gcn_layer(tape: &mut Tape, coefficients: Var, h: Var, w: Var) -> Result<Var> {
    let z = tape.matmul(h, w)?;
    let agg = tape.bmm(coefficients, z, false)?;
    Ok(tape.relu(agg))
}

/// Output of one GAT head before the activation.
#[derive(Debug, Clone, Copy)]
pub struct GatHead {
    /// `Σ_j α_ij z_j`, `[N × C × F']`
    pub aggregated: Var,
    /// `α`, `[N × C × C]`
    pub attention: Var,
}

/// Attention-weighted aggregation of one GAT head:
/// `z = h W`, `e_ij = LeakyReLU(a_srcᵀ z_i + a_dstᵀ z_j)`, `α_ij` = softmax
/// of `e_ij` over `j ∈ N_i ∪ {i}`.
pub fn gat_head(tape: &mut Tape, mask: &[bool], h: Var, w: Var, a_src: Var, a_dst: Var) -> Result<GatHead> {
    let z = tape.matmul(h, w)?;
    let (n, c) = (tape.value(z).dim(0), tape.value(z).dim(1));
    let s_src = tape.matmul(z, a_src)?;
    let s_src = tape.reshape(s_src, &[n, c])?;
    let s_dst = tape.matmul(z, a_dst)?;
    let s_dst = tape.reshape(s_dst, &[n, c])?;
    let e = tape.pair_sum(s_src, s_dst)?;
    let e = tape.leaky_relu(e, LEAKY_SLOPE);
    let attention = tape.softmax(e, Some(mask))?;
    let aggregated = tape.bmm(attention, z, false)?;
    Ok(GatHead { aggregated, attention })
}

/// A single-head GAT layer: `ReLU(Σ_j α_ij z_j)`.
pub fn gat_layer(tape: &mut Tape, mask: &[bool], h: Var, w: Var, a_src: Var, a_dst: Var) -> Result<Var> {
    let head = gat_head(tape, mask, h, w, a_src, a_dst)?;
    Ok(tape.relu(head.aggregated))
}

/// [`gcn_layer`] on plain tensors for one graph: `h [C × F]`, `w [F × F']`.
pub fn apply_gcn_layer(graph: &ChannelGraph, h: &Tensor, w: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let coeffs = GraphBatch::single(graph)?.coefficients;
    let c = tape.constant(coeffs);
    let hv = tape.constant(h.clone().reshape(&[1, h.dim(0), h.dim(1)])?);
    let wv = tape.constant(w.clone());
    let y = gcn_layer(&mut tape, c, hv, wv)?;
    tape.value(y).clone().reshape(&[h.dim(0), w.dim(1)])
}

/// Single-head GAT layer on plain tensors. `a [2F']` is split into the
/// source and neighbour halves. Returns the node outputs `[C × F']` and the
/// attention matrix `[C × C]`.
pub fn apply_gat_layer(graph: &ChannelGraph, h: &Tensor, w: &Tensor, a: &Tensor) -> Result<(Tensor, Tensor)> {
    let f_out = w.dim(1);
    if a.len() != 2 * f_out {
        bail!(Shape, "attention vector has {} entries, expected {}", a.len(), 2 * f_out);
    }
    let mut tape = Tape::new();
    let mask = graph.attention_mask();
    let hv = tape.constant(h.clone().reshape(&[1, h.dim(0), h.dim(1)])?);
    let wv = tape.constant(w.clone());
    let a_src = tape.constant(Tensor::new(vec![f_out, 1], a.data()[..f_out].to_vec())?);
    let a_dst = tape.constant(Tensor::new(vec![f_out, 1], a.data()[f_out..].to_vec())?);
    let head = gat_head(&mut tape, &mask, hv, wv, a_src, a_dst)?;
    let out = tape.relu(head.aggregated);
    let c = h.dim(0);
    Ok((tape.value(out).clone().reshape(&[c, f_out])?, tape.value(head.attention).clone().reshape(&[c, c])?))
}

#[derive(Debug, Clone)]
enum GraphLayerSlots {
    Gcn { w: usize },
    Gat { heads: Vec<[usize; 3]> },
}

/// Spatial encoder bound to its slots in a [`ModelParams`].
#[derive(Debug, Clone)]
pub struct Sdee {
    cfg: SdeeConfig,
    embed_w: usize,
    embed_b: usize,
    layers: Vec<GraphLayerSlots>,
}

impl Sdee {
    pub fn register(cfg: &SdeeConfig, n_bands: usize, params: &mut ModelParams, init: &mut Initializer) -> Result<Self> {
        if cfg.n_layers == 0 || cfg.embed_dim == 0 {
            bail!(Config, "SDEE needs at least one layer and a positive width");
        }
        if cfg.encoder_kind == EncoderKind::Gat && cfg.gat_heads == 0 {
            bail!(Config, "GAT needs at least one head");
        }
        let d = cfg.embed_dim;
        let embed_w = params.push("sdee.embed.w", init.fan_in(&[n_bands, d], n_bands));
        let embed_b = params.push("sdee.embed.b", init.fan_in(&[d], n_bands));
        let layers = (0..cfg.n_layers)
            .map(|l| match cfg.encoder_kind {
                EncoderKind::Gcn => GraphLayerSlots::Gcn { w: params.push(&alloc::format!("sdee.gcn{l}.w"), init.fan_in(&[d, d], d)) },
                EncoderKind::Gat => GraphLayerSlots::Gat {
                    heads: (0..cfg.gat_heads)
                        .map(|h| {
                            [
                                params.push(&alloc::format!("sdee.gat{l}.h{h}.w"), init.fan_in(&[d, d], d)),
                                params.push(&alloc::format!("sdee.gat{l}.h{h}.a_src"), init.fan_in(&[d, 1], 2 * d)),
                                params.push(&alloc::format!("sdee.gat{l}.h{h}.a_dst"), init.fan_in(&[d, 1], 2 * d)),
                            ]
                        })
                        .collect(),
                },
            })
            .collect();
        Ok(Self { cfg: cfg.clone(), embed_w, embed_b, layers })
    }

    pub fn config(&self) -> &SdeeConfig {
        &self.cfg
    }

    /// `de [N × C × B] -> x_alpha [N × C × d]`, one graph per sample.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], de: Var, graphs: &GraphBatch) -> Result<Var> {
        let mut h = linear(tape, de, vars[self.embed_w], Some(vars[self.embed_b]))?;
        let coeffs = match self.cfg.encoder_kind {
            EncoderKind::Gcn => Some(tape.constant(graphs.coefficients.clone())),
            EncoderKind::Gat => None,
        };
        for layer in &self.layers {
            h = match layer {
                GraphLayerSlots::Gcn { w } => gcn_layer(tape, coeffs.expect("gcn coefficients"), h, vars[*w])?,
                GraphLayerSlots::Gat { heads } => {
                    let mut sum: Option<Var> = None;
                    for [w, a_src, a_dst] in heads {
                        let head = gat_head(tape, &graphs.mask, h, vars[*w], vars[*a_src], vars[*a_dst])?;
                        sum = Some(match sum {
                            Some(s) => tape.add(s, head.aggregated)?,
                            None => head.aggregated,
                        });
                    }
                    let mean = tape.scale(sum.expect("at least one head"), 1.0 / heads.len() as f64);
                    tape.relu(mean)
                }
            };
        }
        Ok(h)
    }

    /// Encodes a single sample's DE features `[C × B]` to `[C × d]`.
    pub fn encode(&self, params: &ModelParams, de: &Tensor, k: usize) -> Result<Tensor> {
        if de.rank() != 2 || de.dim(0) < 2 {
            bail!(Shape, "SDEE needs [channels x bands] with at least 2 channels, got {:?}", de.shape());
        }
        let graph = build_graph(de, k)?;
        let mut tape = Tape::new();
        let vars = bind_constants(&mut tape, params);
        let x = tape.constant(de.clone().reshape(&[1, de.dim(0), de.dim(1)])?);
        let y = self.forward(&mut tape, &vars, x, &GraphBatch::single(&graph)?)?;
        tape.value(y).clone().reshape(&[de.dim(0), self.cfg.embed_dim])
    }
}
