//! The full network for each fusion mode.

use alloc::vec::Vec;

use crate::encoders::{Sdee, SdeeConfig, Tdee, TdeeConfig};
use crate::error::{bail, Result};
use crate::fusion::{one_step_fuse, two_step_fuse, Cda, CdaConfig, Classifier};
use crate::graph::{build_graph, GraphBatch};
use crate::nn::{BatchStats, Initializer, Mode, ModelParams, Tape, Var, BN_MOMENTUM};
use crate::signal::FeatureSample;
use crate::tensor::Tensor;

/// Which blocks feed the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum FusionMode {
    SdeeOnly,
    TdeeOnly,
    /// Pooled spatial and time-frequency features, concatenated.
    Concat,
    /// Pooled cross-domain attention output only.
    OneStep,
    /// Pooled spatial, time-frequency and attention outputs.
    #[default]
    TwoStep,
}

impl FusionMode {
    /// Ablation order.
    pub const ALL: [FusionMode; 5] =
        [FusionMode::SdeeOnly, FusionMode::TdeeOnly, FusionMode::Concat, FusionMode::OneStep, FusionMode::TwoStep];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::SdeeOnly => "sdee_only",
            FusionMode::TdeeOnly => "tdee_only",
            FusionMode::Concat => "concat",
            FusionMode::OneStep => "one_step",
            FusionMode::TwoStep => "two_step",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match Self::ALL.iter().find(|m| m.name() == s) {
            Some(m) => Ok(*m),
            None => bail!(Config, "unknown fusion mode {s:?}"),
        }
    }

    pub fn uses_sdee(self) -> bool {
        !matches!(self, FusionMode::TdeeOnly)
    }

    pub fn uses_tdee(self) -> bool {
        !matches!(self, FusionMode::SdeeOnly)
    }

    pub fn uses_cda(self) -> bool {
        matches!(self, FusionMode::OneStep | FusionMode::TwoStep)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub window_len: usize,
    pub n_bands: usize,
    pub k_nn: usize,
    pub fusion: FusionMode,
    pub tdee: TdeeConfig,
    pub sdee: SdeeConfig,
    pub cda: CdaConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels < 2 {
            bail!(Config, "need at least 2 channels");
        }
        if self.fusion.uses_sdee() && (self.k_nn == 0 || self.k_nn >= self.in_channels) {
            bail!(Config, "k_nn = {} outside 1..={}", self.k_nn, self.in_channels - 1);
        }
        if self.fusion.uses_tdee() {
            self.tdee.output_len(self.window_len)?;
        }
        if self.fusion.uses_cda() {
            self.cda.validate()?;
            if self.cda.d_model != self.tdee.d_model() || self.cda.d_model != self.sdee.embed_dim {
                bail!(Config, "attention width must match both encoder widths");
            }
        }
        Ok(())
    }
}

/// Stacked inputs for one forward pass.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[N × C × W]`
    pub raw: Tensor,
    /// `[N × C × B]`
    pub de: Tensor,
    pub graphs: GraphBatch,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_samples(samples: &[&FeatureSample], k_nn: usize) -> Result<Self> {
        if samples.is_empty() {
            bail!(EmptyInput, "empty batch");
        }
        let raw: Vec<Tensor> = samples.iter().map(|s| s.raw.clone()).collect();
        let de: Vec<Tensor> = samples.iter().map(|s| s.de.clone()).collect();
        let graphs = samples.iter().map(|s| build_graph(&s.de, k_nn)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            raw: Tensor::stack(&raw)?,
            de: Tensor::stack(&de)?,
            graphs: GraphBatch::from_graphs(&graphs)?,
            labels: samples.iter().map(|s| s.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Nodes of one forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    pub logits: Var,
    /// Tape handle of each trainable parameter, in [`ModelParams`] order.
    pub params: Vec<Var>,
    pub x_alpha: Option<Var>,
    pub x_beta: Option<Var>,
    pub x_cm: Option<Var>,
    pub bn_stats: Option<BatchStats>,
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    params: ModelParams,
    tdee: Option<Tdee>,
    sdee: Option<Sdee>,
    cda: Option<Cda>,
    head: Classifier,
}

impl Model {
    /// Allocates and initializes the blocks the fusion mode uses.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ModelParams::default();
        let mut init = Initializer::new(seed);
        let mode = cfg.fusion;
        let tdee = mode.uses_tdee().then(|| Tdee::register(&cfg.tdee, cfg.in_channels, &mut params, &mut init));
        let sdee = match mode.uses_sdee() {
            true => Some(Sdee::register(&cfg.sdee, cfg.n_bands, &mut params, &mut init)?),
            false => None,
        };
        let cda = match mode.uses_cda() {
            true => Some(Cda::register(&cfg.cda, &mut params, &mut init)?),
            false => None,
        };
        let width = match mode {
            FusionMode::SdeeOnly => cfg.sdee.embed_dim,
            FusionMode::TdeeOnly => cfg.tdee.d_model(),
            FusionMode::Concat => cfg.sdee.embed_dim + cfg.tdee.d_model(),
            FusionMode::OneStep => cfg.cda.d_model,
            FusionMode::TwoStep => cfg.sdee.embed_dim + cfg.tdee.d_model() + cfg.cda.d_model,
        };
        let head = Classifier::register(width, &mut params, &mut init);
        Ok(Self { cfg: cfg.clone(), params, tdee, sdee, cda, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    /// Records the network on `tape`. With `differentiable`, parameters are
    /// trainable leaves, otherwise constants.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch, mode: Mode, differentiable: bool) -> Result<ForwardPass> {
        let (n, c) = (batch.raw.dim(0), batch.raw.dim(1));
        if c != self.cfg.in_channels || batch.raw.dim(2) != self.cfg.window_len || batch.de.dim(2) != self.cfg.n_bands {
            bail!(
                Shape,
                "batch [{n} x {c} x {}] / {} bands does not match model [{} x {}] / {} bands",
                batch.raw.dim(2),
                batch.de.dim(2),
                self.cfg.in_channels,
                self.cfg.window_len,
                self.cfg.n_bands
            );
        }
        let params: Vec<Var> = self
            .params
            .trainable
            .iter()
            .map(|p| if differentiable { tape.param(p.value.clone()) } else { tape.constant(p.value.clone()) })
            .collect();

        let mut bn_stats = None;
        let x_beta = match &self.tdee {
            Some(tdee) => {
                let raw = tape.constant(batch.raw.clone());
                let (xb, stats) = tdee.forward(tape, &params, &self.params, raw, mode)?;
                bn_stats = stats;
                Some(xb)
            }
            None => None,
        };
        let x_alpha = match &self.sdee {
            Some(sdee) => {
                let de = tape.constant(batch.de.clone());
                Some(sdee.forward(tape, &params, de, &batch.graphs)?)
            }
            None => None,
        };
        let x_cm = match (&self.cda, x_alpha, x_beta) {
            (Some(cda), Some(xa), Some(xb)) => Some(cda.forward(tape, &params, xa, xb)?.x_cm),
            _ => None,
        };
        let fused = match self.cfg.fusion {
            FusionMode::SdeeOnly => tape.mean_axis1(x_alpha.expect("sdee output"))?,
            FusionMode::TdeeOnly => tape.mean_axis1(x_beta.expect("tdee output"))?,
            FusionMode::Concat => {
                let pa = tape.mean_axis1(x_alpha.expect("sdee output"))?;
                let pb = tape.mean_axis1(x_beta.expect("tdee output"))?;
                tape.concat_last(&[pa, pb])?
            }
            FusionMode::OneStep => one_step_fuse(tape, x_cm.expect("cda output"))?,
            FusionMode::TwoStep => two_step_fuse(
                tape,
                x_alpha.expect("sdee output"),
                x_beta.expect("tdee output"),
                x_cm.expect("cda output"),
            )?,
        };
        let logits = self.head.forward(tape, &params, fused)?;
        Ok(ForwardPass { logits, params, x_alpha, x_beta, x_cm, bn_stats })
    }

    /// Eval-mode logits `[N × 2]`.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fp = self.forward(&mut tape, batch, Mode::Eval, false)?;
        Ok(tape.value(fp.logits).clone())
    }

    /// Training-mode loss, per-parameter gradients and batch-norm statistics.
    pub fn loss_and_gradients(&self, batch: &Batch) -> Result<(f64, Vec<Tensor>, Option<BatchStats>)> {
        let mut tape = Tape::new();
        let fp = self.forward(&mut tape, batch, Mode::Train, true)?;
        let loss = tape.cross_entropy(fp.logits, &batch.labels)?;
        let mut grads = tape.backward(loss)?;
        let g = fp.params.iter().map(|&v| grads.take(v)).collect();
        Ok((tape.value(loss).data()[0], g, fp.bn_stats))
    }

    /// Folds one batch's statistics into the running mean and variance.
    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        let Some(tdee) = &self.tdee else { return };
        let (mean_slot, var_slot) = tdee.running_stat_slots();
        let blend = |buf: &mut Tensor, new: &[f64]| {
            for (r, &v) in buf.data_mut().iter_mut().zip(new) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        };
        blend(&mut self.params.buffers[mean_slot].value, &stats.mean);
        blend(&mut self.params.buffers[var_slot].value, &stats.var);
    }

    /// Argmax class per sample (ties go to class 0).
    pub fn predict(&self, samples: &[&FeatureSample]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(PREDICT_CHUNK) {
            let logits = self.logits(&Batch::from_samples(chunk, self.cfg.k_nn)?)?;
            out.extend(logits.data().chunks(logits.dim(1)).map(argmax));
        }
        Ok(out)
    }
}

const PREDICT_CHUNK: usize = 128;

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
