//! The `eegfuse` command line.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use eegfuse_core::dataset::generate_synthetic;
use eegfuse_core::signal::{featurize, BandSet, LabelDim};
use eegfuse_core::train::{ablate_on_subjects, evaluate, featurize_subjects, loso_on_subjects, train, TrainConfig};

use crate::bundle::{load_recordings, save_recordings};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{read_synthetic_spec, read_train_config};
use crate::features::{load_features, save_features};
use crate::report::{ablation_summary, ablation_table, loso_summary, loso_table, write_report};

#[derive(Debug, Parser)]
#[command(name = "eegfuse", version, about = "Cross-domain feature fusion for EEG emotion recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate labeled synthetic recordings, one bundle per subject.
    Synth {
        /// Synthetic spec (`key = value`); defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Window recordings and write a feature cache.
    Preprocess {
        /// A recording bundle or a directory of bundles.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        label: Option<String>,
        /// Training config supplying window_s, hop_s and label_dim.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one model on a feature cache and write a checkpoint.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Leave-one-subject-out cross-validation over recording bundles.
    Loso {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// LOSO for every fusion mode.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Accuracy of a checkpoint on a feature cache.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        features: PathBuf,
    },
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { spec, out } => {
            let spec = match spec {
                Some(p) => read_synthetic_spec(&p)?,
                None => Default::default(),
            };
            let recs = generate_synthetic(&spec)?;
            save_recordings(&recs, &out)?;
            println!("wrote {} subjects to {}", recs.len(), out.display());
        }
        Command::Preprocess { input, out, label, config } => {
            let mut cfg = match config {
                Some(p) => read_train_config(&p)?,
                None => TrainConfig::default(),
            };
            if let Some(l) = label {
                cfg.label_dim = LabelDim::parse(&l.to_ascii_lowercase())?;
            }
            let recs = load_recordings(&input)?;
            let bands = BandSet::default();
            let mut samples = Vec::new();
            for rec in &recs {
                samples.extend(featurize(rec, &cfg.window(rec.sample_rate_hz), &bands, cfg.label_dim)?);
            }
            save_features(&samples, &out)?;
            println!("wrote {} {} samples to {}", samples.len(), cfg.label_dim.name(), out.display());
        }
        Command::Train { features, config, out } => {
            let cfg = read_train_config(&config)?;
            let samples = load_features(&features)?;
            let outcome = train(&samples, &cfg)?;
            save_checkpoint(&outcome.model, &cfg, &out)?;
            for (epoch, loss) in outcome.loss_curve.iter().enumerate() {
                println!("epoch {}\tloss {loss:.6}", epoch + 1);
            }
        }
        Command::Loso { data, config, report } => {
            let cfg = read_train_config(&config)?;
            let subjects = featurize_subjects(&load_recordings(&data)?, &cfg)?;
            let result = loso_on_subjects(&subjects, &cfg)?;
            write_report(&report, &loso_table(&result, &cfg), &loso_summary(&result, &cfg))?;
            println!("mean accuracy {:.4} over {} folds", result.mean_accuracy, result.folds.len());
        }
        Command::Ablate { data, config, report } => {
            let cfg = read_train_config(&config)?;
            let subjects = featurize_subjects(&load_recordings(&data)?, &cfg)?;
            let result = ablate_on_subjects(&subjects, &cfg)?;
            let table = ablation_table(&result);
            write_report(&report, &table, &ablation_summary(&result, &cfg))?;
            print!("{table}");
        }
        Command::Eval { ckpt, features } => {
            let ck = load_checkpoint(&ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
            let samples = load_features(&features)?;
            check_feature_shape(&ckpt, &ck.model, &samples)?;
            let acc = evaluate(&ck.model, &samples)?;
            println!("accuracy {:.4} ({}/{})", acc.value(), acc.correct, acc.total);
        }
    }
    Ok(())
}

fn check_feature_shape(
    ckpt: &Path,
    model: &eegfuse_core::model::Model,
    samples: &[eegfuse_core::signal::FeatureSample],
) -> anyhow::Result<()> {
    let cfg = model.config();
    if let Some(s) = samples.first() {
        if s.raw.shape() != [cfg.in_channels, cfg.window_len] || s.de.dim(1) != cfg.n_bands {
            bail!(
                "features [{} x {}] / {} bands do not match checkpoint {} ([{} x {}] / {} bands)",
                s.raw.dim(0),
                s.raw.dim(1),
                s.de.dim(1),
                ckpt.display(),
                cfg.in_channels,
                cfg.window_len,
                cfg.n_bands
            );
        }
    }
    Ok(())
}
