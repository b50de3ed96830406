//! Flat `key = value` text files.
//!
//! Blank lines and lines starting with `#` are skipped. Keys may appear at
//! most once; unknown keys are rejected.

use std::fmt::Write;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use eegfuse_core::dataset::{Band, SyntheticSpec};
use eegfuse_core::encoders::EncoderKind;
use eegfuse_core::model::FusionMode;
use eegfuse_core::signal::LabelDim;
use eegfuse_core::train::TrainConfig;

use crate::error::{format, io, Error, Result};

/// Ordered `(key, value)` pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    pub entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split_once('#').map_or(line, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Parse(format!("line {}: empty key", n + 1)));
            }
            if entries.iter().any(|(e, _)| e == k) {
                return Err(Error::Parse(format!("line {}: duplicate key {k:?}", n + 1)));
            }
            entries.push((k.to_string(), v.to_string()));
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(io(path))?).map_err(|e| at(path, e))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    /// Parses the value under `key`, if present.
    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| Error::Parse(format!("{key} = {v:?}: {e}"))))
            .transpose()
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.parsed(key)?.ok_or_else(|| Error::Parse(format!("missing key {key:?}")))
    }

    /// Fails on the first key outside `known`.
    pub fn check_keys(&self, known: &[&str]) -> Result<()> {
        match self.entries.iter().find(|(k, _)| !known.contains(&k.as_str())) {
            Some((k, _)) => Err(Error::Parse(format!("unknown key {k:?}; expected one of {}", known.join(", ")))),
            None => Ok(()),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(io(path))
    }
}

pub const TRAIN_KEYS: [&str; 11] = [
    "lr",
    "batch_size",
    "max_epochs",
    "seed",
    "label_dim",
    "encoder_kind",
    "fusion_mode",
    "k_nn",
    "n_heads",
    "window_s",
    "hop_s",
];

pub fn train_config_from(kv: &KeyValues) -> Result<TrainConfig> {
    kv.check_keys(&TRAIN_KEYS)?;
    train_config_fields(kv)
}

/// Reads the training keys of `kv`, leaving any other keys alone.
pub(crate) fn train_config_fields(kv: &KeyValues) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let named = |key: &str| kv.get(key).map(str::to_ascii_lowercase);
    let cfg = TrainConfig {
        lr: kv.parsed("lr")?.unwrap_or(d.lr),
        batch_size: kv.parsed("batch_size")?.unwrap_or(d.batch_size),
        max_epochs: kv.parsed("max_epochs")?.unwrap_or(d.max_epochs),
        seed: kv.parsed("seed")?.unwrap_or(d.seed),
        label_dim: named("label_dim").map(|v| LabelDim::parse(&v)).transpose()?.unwrap_or(d.label_dim),
        encoder_kind: named("encoder_kind").map(|v| EncoderKind::parse(&v)).transpose()?.unwrap_or(d.encoder_kind),
        fusion_mode: named("fusion_mode").map(|v| FusionMode::parse(&v)).transpose()?.unwrap_or(d.fusion_mode),
        k_nn: kv.parsed("k_nn")?.unwrap_or(d.k_nn),
        n_heads: kv.parsed("n_heads")?.unwrap_or(d.n_heads),
        window_s: kv.parsed("window_s")?.unwrap_or(d.window_s),
        hop_s: kv.parsed("hop_s")?.unwrap_or(d.hop_s),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn train_config_to(cfg: &TrainConfig) -> KeyValues {
    let mut kv = KeyValues::default();
    kv.push("lr", cfg.lr);
    kv.push("batch_size", cfg.batch_size);
    kv.push("max_epochs", cfg.max_epochs);
    kv.push("seed", cfg.seed);
    kv.push("label_dim", cfg.label_dim.name());
    kv.push("encoder_kind", cfg.encoder_kind.name());
    kv.push("fusion_mode", cfg.fusion_mode.name());
    kv.push("k_nn", cfg.k_nn);
    kv.push("n_heads", cfg.n_heads);
    kv.push("window_s", cfg.window_s);
    kv.push("hop_s", cfg.hop_s);
    kv
}

pub fn read_train_config(path: &Path) -> Result<TrainConfig> {
    train_config_from(&KeyValues::read(path)?).map_err(|e| at(path, e))
}

fn at(path: &Path, e: Error) -> Error {
    match e {
        Error::Parse(msg) => format(path, msg),
        other => other,
    }
}

pub const SYNTH_KEYS: [&str; 8] =
    ["n_subjects", "n_trials", "n_channels", "duration_s", "sample_rate_hz", "seed", "signal_band", "effect_strength"];

pub fn synthetic_spec_from(kv: &KeyValues) -> Result<SyntheticSpec> {
    kv.check_keys(&SYNTH_KEYS)?;
    let d = SyntheticSpec::default();
    let spec = SyntheticSpec {
        n_subjects: kv.parsed("n_subjects")?.unwrap_or(d.n_subjects),
        n_trials: kv.parsed("n_trials")?.unwrap_or(d.n_trials),
        n_channels: kv.parsed("n_channels")?.unwrap_or(d.n_channels),
        duration_s: kv.parsed("duration_s")?.unwrap_or(d.duration_s),
        sample_rate_hz: kv.parsed("sample_rate_hz")?.unwrap_or(d.sample_rate_hz),
        seed: kv.parsed("seed")?.unwrap_or(d.seed),
        signal_band: kv
            .get("signal_band")
            .map(|v| Band::parse(&v.to_ascii_lowercase()))
            .transpose()?
            .unwrap_or(d.signal_band),
        effect_strength: kv.parsed("effect_strength")?.unwrap_or(d.effect_strength),
    };
    spec.validate()?;
    Ok(spec)
}

pub fn synthetic_spec_to(spec: &SyntheticSpec) -> KeyValues {
    let mut kv = KeyValues::default();
    kv.push("n_subjects", spec.n_subjects);
    kv.push("n_trials", spec.n_trials);
    kv.push("n_channels", spec.n_channels);
    kv.push("duration_s", spec.duration_s);
    kv.push("sample_rate_hz", spec.sample_rate_hz);
    kv.push("seed", spec.seed);
    kv.push("signal_band", spec.signal_band.name());
    kv.push("effect_strength", spec.effect_strength);
    kv
}

pub fn read_synthetic_spec(path: &Path) -> Result<SyntheticSpec> {
    synthetic_spec_from(&KeyValues::read(path)?).map_err(|e| at(path, e))
}
