//! Feature caches: `raw.nft` `[S × C × W]`, `de.nft` `[S × C × B]`,
//! `labels.nft` `[S]` and `index.txt` mapping each sample to its subject,
//! trial and window.

use std::fmt::Write;
use std::fs;
use std::path::Path;

use eegfuse_core::signal::FeatureSample;
use eegfuse_core::Tensor;

use crate::container::{load_tensor, save_tensor};
use crate::error::{format, io, Result};

pub const RAW: &str = "raw.nft";
pub const DE: &str = "de.nft";
pub const LABELS: &str = "labels.nft";
pub const INDEX: &str = "index.txt";

const INDEX_HEADER: &str = "sample\tsubject\ttrial\twindow";

pub fn save_features(samples: &[FeatureSample], dir: &Path) -> Result<()> {
    if samples.is_empty() {
        return Err(eegfuse_core::Error::EmptyInput("no samples to write".into()).into());
    }
    fs::create_dir_all(dir).map_err(io(dir))?;
    let raw: Vec<Tensor> = samples.iter().map(|s| s.raw.clone()).collect();
    let de: Vec<Tensor> = samples.iter().map(|s| s.de.clone()).collect();
    let labels = Tensor::new(vec![samples.len()], samples.iter().map(|s| s.label as f64).collect())?;
    save_tensor(&Tensor::stack(&raw)?, &dir.join(RAW))?;
    save_tensor(&Tensor::stack(&de)?, &dir.join(DE))?;
    save_tensor(&labels, &dir.join(LABELS))?;
    let mut index = String::from(INDEX_HEADER);
    index.push('\n');
    for (i, s) in samples.iter().enumerate() {
        let _ = writeln!(index, "{i}\t{}\t{}\t{}", s.subject_id, s.trial_id, s.window_id);
    }
    let path = dir.join(INDEX);
    fs::write(&path, index).map_err(io(&path))
}

pub fn load_features(dir: &Path) -> Result<Vec<FeatureSample>> {
    let raw = load_tensor(&dir.join(RAW))?;
    let de = load_tensor(&dir.join(DE))?;
    let labels = load_tensor(&dir.join(LABELS))?;
    let n = labels.len();
    if raw.rank() != 3 || de.rank() != 3 || labels.rank() != 1 || raw.dim(0) != n || de.dim(0) != n {
        return Err(format(
            dir,
            format!("inconsistent cache shapes raw {:?}, de {:?}, labels {:?}", raw.shape(), de.shape(), labels.shape()),
        ));
    }
    let index_path = dir.join(INDEX);
    let text = fs::read_to_string(&index_path).map_err(io(&index_path))?;
    let mut lines = text.lines();
    if lines.next() != Some(INDEX_HEADER) {
        return Err(format(&index_path, "missing index header"));
    }
    let rows: Vec<&str> = lines.filter(|l| !l.trim().is_empty()).collect();
    if rows.len() != n {
        return Err(format(&index_path, format!("{} index rows for {n} samples", rows.len())));
    }
    let mut out = Vec::with_capacity(n);
    for (i, row) in rows.iter().enumerate() {
        let f: Vec<u32> = row
            .split('\t')
            .map(|v| v.parse::<u32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| format(&index_path, format!("row {i}: {e}")))?;
        if f.len() != 4 || f[0] as usize != i {
            return Err(format(&index_path, format!("row {i}: expected `{i}\\tsubject\\ttrial\\twindow`")));
        }
        let label = labels.data()[i];
        if label != 0.0 && label != 1.0 {
            return Err(format(&dir.join(LABELS), format!("label {label} at sample {i} is not 0 or 1")));
        }
        out.push(FeatureSample {
            raw: raw.index0(i),
            de: de.index0(i),
            label: label as usize,
            subject_id: f[1],
            trial_id: f[2],
            window_id: f[3],
        });
    }
    Ok(out)
}
