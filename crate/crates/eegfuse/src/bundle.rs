//! Recording bundles: one directory per subject holding `signals.nft`
//! `[trials × channels × samples]`, `ratings.nft` `[trials × ≥2]` and
//! `meta.txt` with `subject_id` and `sample_rate_hz`.

use std::fs;
use std::path::{Path, PathBuf};

use eegfuse_core::dataset::EegRecording;

use crate::config::KeyValues;
use crate::container::{load_tensor, save_tensor};
use crate::error::{format, io, Result};

pub const SIGNALS: &str = "signals.nft";
pub const RATINGS: &str = "ratings.nft";
pub const META: &str = "meta.txt";

pub fn is_bundle(dir: &Path) -> bool {
    dir.join(SIGNALS).is_file()
}

pub fn load_recording(dir: &Path) -> Result<EegRecording> {
    let meta_path = dir.join(META);
    let meta = KeyValues::read(&meta_path)?;
    meta.check_keys(&["subject_id", "sample_rate_hz"]).map_err(|e| format(&meta_path, e.to_string()))?;
    let subject_id: u32 = meta.require("subject_id")?;
    let sample_rate_hz: f64 = meta.require("sample_rate_hz")?;
    let signals_path = dir.join(SIGNALS);
    let signals = load_tensor(&signals_path)?;
    if signals.rank() != 3 {
        return Err(format(&signals_path, format!("expected [trials, channels, samples], got {:?}", signals.shape())));
    }
    let ratings_path = dir.join(RATINGS);
    let ratings = load_tensor(&ratings_path)?;
    if ratings.rank() != 2 || ratings.dim(0) != signals.dim(0) {
        return Err(format(
            &ratings_path,
            format!("expected [{} trials, >=2], got {:?}", signals.dim(0), ratings.shape()),
        ));
    }
    Ok(EegRecording::new(subject_id, signals, sample_rate_hz, ratings)?)
}

pub fn save_recording(rec: &EegRecording, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    save_tensor(&rec.trials, &dir.join(SIGNALS))?;
    save_tensor(&rec.ratings, &dir.join(RATINGS))?;
    let mut meta = KeyValues::default();
    meta.push("subject_id", rec.subject_id);
    meta.push("sample_rate_hz", rec.sample_rate_hz);
    meta.write(&dir.join(META))
}

/// Subdirectory name used for a subject's bundle.
pub fn subject_dir_name(subject_id: u32) -> String {
    format!("s{subject_id:02}")
}

/// Writes each recording to `<root>/sNN/`.
pub fn save_recordings(recs: &[EegRecording], root: &Path) -> Result<()> {
    for rec in recs {
        save_recording(rec, &root.join(subject_dir_name(rec.subject_id)))?;
    }
    Ok(())
}

/// Loads `root` itself if it is a bundle, otherwise every bundle directly
/// below it, sorted by subject id.
pub fn load_recordings(root: &Path) -> Result<Vec<EegRecording>> {
    if is_bundle(root) {
        return Ok(vec![load_recording(root)?]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(io(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_bundle(p))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(format(root, "no recording bundles found"));
    }
    let mut recs = dirs.iter().map(|d| load_recording(d)).collect::<Result<Vec<_>>>()?;
    recs.sort_by_key(|r| r.subject_id);
    Ok(recs)
}
