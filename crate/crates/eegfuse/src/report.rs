//! Tab-separated result tables plus `key = value` summaries.
//!
//! A LOSO report has one row per model with `valence` and `arousal`
//! accuracy columns; an ablation report has one row per fusion mode with
//! block markers. The column not covered by the run holds `-`.

use std::fmt::Write;
use std::fs;
use std::path::{Path, PathBuf};

use eegfuse_core::model::FusionMode;
use eegfuse_core::signal::LabelDim;
use eegfuse_core::train::{AblationReport, LosoReport, TrainConfig};

use crate::config::KeyValues;
use crate::error::{io, Result};

/// `<report>.summary` next to the report file.
pub fn summary_path(report: &Path) -> PathBuf {
    let mut s = report.as_os_str().to_owned();
    s.push(".summary");
    PathBuf::from(s)
}

fn accuracy_columns(dim: LabelDim, acc: f64) -> String {
    match dim {
        LabelDim::Valence => format!("{acc:.4}\t-"),
        LabelDim::Arousal => format!("-\t{acc:.4}"),
    }
}

fn features_label(mode: FusionMode) -> &'static str {
    match mode {
        FusionMode::SdeeOnly => "Graph",
        FusionMode::TdeeOnly => "T-F",
        _ => "T-F, Graph",
    }
}

fn fusion_label(mode: FusionMode) -> &'static str {
    match mode {
        FusionMode::SdeeOnly | FusionMode::TdeeOnly => "-",
        FusionMode::Concat => "Concat",
        FusionMode::OneStep => "One-step",
        FusionMode::TwoStep => "Two-step",
    }
}

fn push_folds(kv: &mut KeyValues, prefix: &str, report: &LosoReport) {
    kv.push(&format!("{prefix}n_folds"), report.folds.len());
    kv.push(&format!("{prefix}mean_accuracy"), report.mean_accuracy);
    for f in &report.folds {
        let p = format!("{prefix}fold.{}.", f.fold_subject);
        kv.push(&format!("{p}n_test"), f.n_test);
        kv.push(&format!("{p}n_correct"), f.n_correct);
        kv.push(&format!("{p}accuracy"), f.accuracy);
        if let Some(last) = f.loss_curve.last() {
            kv.push(&format!("{p}final_loss"), last);
        }
    }
}

pub fn loso_table(report: &LosoReport, cfg: &TrainConfig) -> String {
    let mut s = String::from("method\tfeatures\tvalence\tarousal\n");
    let _ = writeln!(
        s,
        "{} ({})\t{}\t{}",
        cfg.fusion_mode.name(),
        cfg.encoder_kind.name(),
        features_label(cfg.fusion_mode),
        accuracy_columns(cfg.label_dim, report.mean_accuracy)
    );
    s
}

pub fn loso_summary(report: &LosoReport, cfg: &TrainConfig) -> KeyValues {
    let mut kv = KeyValues::default();
    kv.push("label_dim", cfg.label_dim.name());
    kv.push("encoder_kind", cfg.encoder_kind.name());
    kv.push("fusion_mode", cfg.fusion_mode.name());
    kv.push("seed", cfg.seed);
    push_folds(&mut kv, "", report);
    kv
}

pub fn ablation_table(report: &AblationReport) -> String {
    let mut s = String::from("sdee\ttdee\tcda\tfusion\tvalence\tarousal\n");
    let mark = |on: bool| if on { "x" } else { "" };
    for row in &report.rows {
        let m = row.mode;
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            mark(m.uses_sdee()),
            mark(m.uses_tdee()),
            mark(m.uses_cda()),
            fusion_label(m),
            accuracy_columns(report.label_dim, row.report.mean_accuracy)
        );
    }
    s
}

pub fn ablation_summary(report: &AblationReport, cfg: &TrainConfig) -> KeyValues {
    let mut kv = KeyValues::default();
    kv.push("label_dim", report.label_dim.name());
    kv.push("encoder_kind", cfg.encoder_kind.name());
    kv.push("seed", cfg.seed);
    for row in &report.rows {
        push_folds(&mut kv, &format!("{}.", row.mode.name()), &row.report);
    }
    kv
}

/// Writes `table` to `path` and `summary` to [`summary_path`].
pub fn write_report(path: &Path, table: &str, summary: &KeyValues) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    fs::write(path, table).map_err(io(path))?;
    summary.write(&summary_path(path))
}
