//! Model checkpoints: a directory with `manifest.txt` (kind, name, shape per
//! tensor), `config.txt` (training keys plus input dimensions) and one
//! `.nft` file per parameter or buffer.

use std::fmt::Write;
use std::fs;
use std::path::Path;

use eegfuse_core::model::Model;
use eegfuse_core::nn::{ModelParams, NamedTensor};
use eegfuse_core::train::TrainConfig;

use crate::config::{train_config_fields, train_config_to, KeyValues, TRAIN_KEYS};
use crate::container::{load_tensor, save_tensor};
use crate::error::{format, io, Result};

pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG: &str = "config.txt";

const DIM_KEYS: [&str; 3] = ["in_channels", "window_len", "n_bands"];

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub train: TrainConfig,
    pub model: Model,
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn tensor_file(name: &str) -> String {
    format!("{name}.nft")
}

pub fn save_checkpoint(model: &Model, train: &TrainConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut manifest = String::new();
    let params = model.params();
    for (kind, list) in [("param", &params.trainable), ("buffer", &params.buffers)] {
        for p in list {
            save_tensor(&p.value, &dir.join(tensor_file(&p.name)))?;
            let _ = writeln!(manifest, "{kind}\t{}\t{}", p.name, shape_text(p.value.shape()));
        }
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(io(&path))?;
    let mut kv = train_config_to(train);
    let cfg = model.config();
    kv.push("in_channels", cfg.in_channels);
    kv.push("window_len", cfg.window_len);
    kv.push("n_bands", cfg.n_bands);
    kv.write(&dir.join(CONFIG))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let config_path = dir.join(CONFIG);
    let kv = KeyValues::read(&config_path)?;
    let known: Vec<&str> = TRAIN_KEYS.iter().chain(&DIM_KEYS).copied().collect();
    kv.check_keys(&known)?;
    let train = train_config_fields(&kv)?;
    let model_cfg = train.model_config(kv.require("in_channels")?, kv.require("window_len")?, kv.require("n_bands")?);
    let mut model = Model::new(&model_cfg, train.seed)?;

    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(io(&manifest_path))?;
    let mut stored = ModelParams::default();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split('\t').collect();
        let [kind, name, shape] = fields[..] else {
            return Err(format(&manifest_path, format!("line {}: expected kind, name, shape", n + 1)));
        };
        let value = load_tensor(&dir.join(tensor_file(name)))?;
        if shape_text(value.shape()) != shape {
            return Err(format(&manifest_path, format!("{name}: manifest shape {shape}, file {:?}", value.shape())));
        }
        let entry = NamedTensor { name: name.to_string(), value };
        match kind {
            "param" => stored.trainable.push(entry),
            "buffer" => stored.buffers.push(entry),
            other => return Err(format(&manifest_path, format!("line {}: unknown kind {other:?}", n + 1))),
        }
    }
    model.params_mut().load_from(&stored)?;
    Ok(Checkpoint { train, model })
}
