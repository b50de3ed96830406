//! Training, evaluation, leave-one-subject-out cross-validation and the
//! fusion ablation.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::EegRecording;
use crate::encoders::{EncoderKind, SdeeConfig, TdeeConfig};
use crate::error::{bail, Result};
use crate::fusion::CdaConfig;
use crate::model::{Batch, FusionMode, Model, ModelConfig};
use crate::nn::{adam_step, AdamState};
use crate::signal::{featurize, BandSet, FeatureSample, LabelDim, WindowConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub label_dim: LabelDim,
    pub encoder_kind: EncoderKind,
    pub fusion_mode: FusionMode,
    pub k_nn: usize,
    pub n_heads: usize,
    pub window_s: f64,
    pub hop_s: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 64,
            max_epochs: 50,
            seed: 0,
            label_dim: LabelDim::Valence,
            encoder_kind: EncoderKind::Gcn,
            fusion_mode: FusionMode::TwoStep,
            k_nn: 5,
            n_heads: 8,
            window_s: 2.0,
            hop_s: 0.125,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            bail!(Config, "learning rate must be finite and >= 0");
        }
        if self.batch_size == 0 {
            bail!(Config, "batch_size must be >= 1");
        }
        if self.k_nn == 0 {
            bail!(Config, "k_nn must be >= 1");
        }
        if self.n_heads == 0 {
            bail!(Config, "n_heads must be >= 1");
        }
        Ok(())
    }

    pub fn window(&self, sample_rate_hz: f64) -> WindowConfig {
        WindowConfig { window_s: self.window_s, hop_s: self.hop_s, sample_rate_hz }
    }

    /// Model shape for samples with `in_channels × window_len` raw windows
    /// and `n_bands` DE features.
    pub fn model_config(&self, in_channels: usize, window_len: usize, n_bands: usize) -> ModelConfig {
        ModelConfig {
            in_channels,
            window_len,
            n_bands,
            k_nn: self.k_nn,
            fusion: self.fusion_mode,
            tdee: TdeeConfig::default(),
            sdee: SdeeConfig { encoder_kind: self.encoder_kind, ..SdeeConfig::default() },
            cda: CdaConfig { n_heads: self.n_heads, ..CdaConfig::default() },
        }
    }
}

/// Stream offset separating the shuffling RNG from weight init.
const SHUFFLE_STREAM: u64 = 0x5EED_5AFF_1E00_0001;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
}

pub fn train(samples: &[FeatureSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_observed(samples, cfg, &mut |_| {})
}

/// [`train`], calling `on_batch` with each mini-batch before its update.
pub fn train_observed(
    samples: &[FeatureSample],
    cfg: &TrainConfig,
    on_batch: &mut dyn FnMut(&[&FeatureSample]),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let Some(first) = samples.first() else {
        bail!(EmptyInput, "no training samples");
    };
    let classes: BTreeSet<usize> = samples.iter().map(|s| s.label).collect();
    if classes.len() < 2 {
        bail!(Validation, "training data contains a single class");
    }
    let mcfg = cfg.model_config(first.raw.dim(0), first.raw.dim(1), first.de.dim(1));
    let mut model = Model::new(&mcfg, cfg.seed)?;
    let mut adam = AdamState::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut loss_curve = Vec::with_capacity(cfg.max_epochs);
    for _ in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let members: Vec<&FeatureSample> = idx.iter().map(|&i| &samples[i]).collect();
            on_batch(&members);
            let batch = Batch::from_samples(&members, cfg.k_nn)?;
            let (loss, grads, stats) = model.loss_and_gradients(&batch)?;
            if !loss.is_finite() {
                bail!(Validation, "training diverged (non-finite loss)");
            }
            total += loss * members.len() as f64;
            let mut values: Vec<Tensor> =
                model.params().trainable.iter().map(|p| p.value.clone()).collect();
            adam_step(&mut values, &grads, &mut adam)?;
            for (p, v) in model.params_mut().trainable.iter_mut().zip(values) {
                p.value = v;
            }
            if let Some(stats) = stats {
                model.update_running_stats(&stats);
            }
        }
        loss_curve.push(total / samples.len() as f64);
    }
    Ok(TrainOutcome { model, loss_curve })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
}

impl Accuracy {
    pub fn value(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

pub fn accuracy_of(predictions: &[usize], labels: &[usize]) -> Accuracy {
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Accuracy { correct, total: labels.len() }
}

/// Fraction of samples whose argmax logit equals the label.
pub fn evaluate(model: &Model, samples: &[FeatureSample]) -> Result<Accuracy> {
    let refs: Vec<&FeatureSample> = samples.iter().collect();
    let preds = model.predict(&refs)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    Ok(accuracy_of(&preds, &labels))
}

/// All windows of one subject.
#[derive(Debug, Clone)]
pub struct SubjectSamples {
    pub subject_id: u32,
    pub samples: Vec<FeatureSample>,
}

/// Featurizes every recording, ordered by subject id.
pub fn featurize_subjects(recordings: &[EegRecording], cfg: &TrainConfig) -> Result<Vec<SubjectSamples>> {
    let bands = BandSet::default();
    let mut out = recordings
        .iter()
        .map(|rec| {
            let samples = featurize(rec, &cfg.window(rec.sample_rate_hz), &bands, cfg.label_dim)?;
            Ok(SubjectSamples { subject_id: rec.subject_id, samples })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by_key(|s| s.subject_id);
    if out.windows(2).any(|w| w[0].subject_id == w[1].subject_id) {
        bail!(Validation, "duplicate subject ids");
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldReport {
    pub fold_subject: u32,
    pub n_test: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    pub loss_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LosoReport {
    pub folds: Vec<FoldReport>,
    /// Unweighted mean of the fold accuracies.
    pub mean_accuracy: f64,
}

pub fn loso(recordings: &[EegRecording], cfg: &TrainConfig) -> Result<LosoReport> {
    loso_on_subjects(&featurize_subjects(recordings, cfg)?, cfg)
}

pub fn loso_on_subjects(subjects: &[SubjectSamples], cfg: &TrainConfig) -> Result<LosoReport> {
    loso_observed(subjects, cfg, &mut |_, _| {})
}

/// Trains one model with `held_out` excluded and scores it on `held_out`.
pub fn run_fold(
    subjects: &[SubjectSamples],
    held_out: usize,
    cfg: &TrainConfig,
    on_batch: &mut dyn FnMut(&[&FeatureSample]),
) -> Result<FoldReport> {
    let test = &subjects[held_out];
    let train_set: Vec<FeatureSample> = subjects
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != held_out)
        .flat_map(|(_, s)| s.samples.iter().cloned())
        .collect();
    let outcome = train_observed(&train_set, cfg, on_batch)?;
    let acc = evaluate(&outcome.model, &test.samples)?;
    Ok(FoldReport {
        fold_subject: test.subject_id,
        n_test: acc.total,
        n_correct: acc.correct,
        accuracy: acc.value(),
        loss_curve: outcome.loss_curve,
    })
}

/// Leave-one-subject-out: one fold per subject, in subject order.
/// `on_batch` sees `(held_out_subject, batch)` for every training batch.
pub fn loso_observed(
    subjects: &[SubjectSamples],
    cfg: &TrainConfig,
    on_batch: &mut dyn FnMut(u32, &[&FeatureSample]),
) -> Result<LosoReport> {
    if subjects.len() < 2 {
        bail!(Validation, "leave-one-subject-out needs at least 2 subjects, got {}", subjects.len());
    }
    let mut folds = Vec::with_capacity(subjects.len());
    for held_out in 0..subjects.len() {
        let id = subjects[held_out].subject_id;
        folds.push(run_fold(subjects, held_out, cfg, &mut |b| on_batch(id, b))?);
    }
    Ok(LosoReport::from_folds(folds))
}

impl LosoReport {
    pub fn from_folds(folds: Vec<FoldReport>) -> Self {
        let mean_accuracy = if folds.is_empty() {
            0.0
        } else {
            folds.iter().map(|f| f.accuracy).sum::<f64>() / folds.len() as f64
        };
        Self { folds, mean_accuracy }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub mode: FusionMode,
    pub report: LosoReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub label_dim: LabelDim,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn accuracy(&self, mode: FusionMode) -> Option<f64> {
        self.rows.iter().find(|r| r.mode == mode).map(|r| r.report.mean_accuracy)
    }
}

/// LOSO for every fusion mode on the same data and seed.
pub fn ablate(recordings: &[EegRecording], base: &TrainConfig) -> Result<AblationReport> {
    ablate_on_subjects(&featurize_subjects(recordings, base)?, base)
}

pub fn ablate_on_subjects(subjects: &[SubjectSamples], base: &TrainConfig) -> Result<AblationReport> {
    let rows = FusionMode::ALL
        .iter()
        .map(|&mode| {
            let cfg = TrainConfig { fusion_mode: mode, ..base.clone() };
            Ok(AblationRow { mode, report: loso_on_subjects(subjects, &cfg)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport { label_dim: base.label_dim, rows })
}
