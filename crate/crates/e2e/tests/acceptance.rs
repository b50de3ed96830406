//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::f64::consts::{E, PI};
use std::path::Path;
use std::time::{Duration, Instant};

use clap::Parser;
use eegfuse::cli::Cli;
use eegfuse::config::KeyValues;
use eegfuse_core::dataset::{generate_synthetic, SyntheticSpec};
use eegfuse_core::encoders::{apply_gat_layer, apply_gcn_layer};
use eegfuse_core::fusion::{apply_cross_domain_attention, fuse_two_step};
use eegfuse_core::model::FusionMode;
use eegfuse_core::signal::{
    band_power, band_power_with, differential_entropy, featurize, sliding_windows, BandSet, FeatureSample,
    LabelDim, Periodogram, WindowConfig,
};
use eegfuse_core::train::{evaluate, train, TrainConfig};
use eegfuse_core::Tensor;
use support::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Criterion<'a> = (&'static str, Box<dyn FnOnce() -> Outcome + 'a>);

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let desk = desk_scale(work.path());
    let criteria: Vec<Criterion> = vec![
        ("gradient suite", Box::new(gradients)),
        ("graph layer oracles", Box::new(graph_oracles)),
        ("spectral oracle", Box::new(spectral)),
        ("windowing arithmetic", Box::new(windowing)),
        ("overfit sanity", Box::new(overfit)),
        ("desk-scale LOSO", Box::new(|| desk.loso)),
        ("ablation report", Box::new(|| desk.ablation)),
        ("determinism", Box::new(|| determinism(work.path()))),
        ("fusion invariants", Box::new(fusion_invariants)),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.into_iter().enumerate() {
        let o = run();
        failed += usize::from(!o.pass);
        println!("{} criterion {} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let results = run_gradient_suite(0..5);
    let elapsed = t.elapsed();
    let bad: Vec<String> = results
        .iter()
        .filter(|(_, worst, tol)| worst > tol)
        .map(|(name, worst, tol)| format!("{name} {worst:.2e} > {tol:.0e}"))
        .collect();
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    outcome(
        bad.is_empty() && results.len() == 11 && elapsed < Duration::from_secs(120),
        format!(
            "{} ops x 5 instances, worst rel error {worst:.2e}, {:.1}s{}",
            results.len(),
            elapsed.as_secs_f64(),
            if bad.is_empty() { String::new() } else { format!("; failing: {}", bad.join(", ")) }
        ),
    )
}

fn graph_oracles() -> Outcome {
    let mut r = rng(101);
    let (mut gcn_err, mut gat_err, mut graphs) = (0.0f64, 0.0f64, 0);
    for c in 1..=8 {
        for _ in 0..25 {
            let g = random_graph(&mut r, c, 0.45);
            let h = randn(&mut r, &[c, 5], 1.0);
            let w = randn(&mut r, &[5, 6], 1.0);
            let a = randn(&mut r, &[12], 1.0);
            gcn_err = gcn_err.max(apply_gcn_layer(&g, &h, &w).unwrap().max_abs_diff(&dense_gcn(&g, &h, &w)));
            let (out, att) = apply_gat_layer(&g, &h, &w, &a).unwrap();
            let (want_out, want_att) = brute_gat(&g, &h, &w, a.data());
            gat_err = gat_err.max(out.max_abs_diff(&want_out)).max(att.max_abs_diff(&want_att));
            graphs += 1;
        }
    }
    outcome(
        gcn_err <= 1e-10 && gat_err <= 1e-10,
        format!("{graphs} random graphs with C = 1..8, GCN error {gcn_err:.1e}, GAT error {gat_err:.1e}"),
    )
}

fn spectral() -> Outcome {
    let bands = BandSet::default();
    let alpha = bands.index_of("alpha").unwrap();
    let tone = Tensor::new(vec![1, 256], (0..256).map(|i| (2.0 * PI * 10.0 * i as f64 / 128.0).sin()).collect())
        .unwrap();
    let p = band_power(&tone, 128.0, &bands).unwrap();
    let alpha_share = p.data()[alpha] / p.data().iter().sum::<f64>();

    let de_zero = differential_entropy(1.0 / (2.0 * PI * E)).abs();

    let pg = Periodogram::new();
    let mut r = rng(102);
    let mut acc = vec![0.0; bands.len()];
    for _ in 0..10_000 {
        let x = randn(&mut r, &[1, 256], 1.0);
        let p = band_power_with(&pg, &x, 128.0, &bands).unwrap();
        acc.iter_mut().zip(p.data()).for_each(|(a, v)| *a += v);
    }
    let width: f64 = bands.bands().iter().map(|b| b.hi_hz - b.lo_hz).sum();
    let power: f64 = acc.iter().sum();
    let worst_ratio = bands
        .bands()
        .iter()
        .zip(&acc)
        .map(|(b, p)| ((p / power) / ((b.hi_hz - b.lo_hz) / width) - 1.0).abs())
        .fold(0.0, f64::max);
    outcome(
        alpha_share >= 0.9 && de_zero <= 1e-12 && worst_ratio <= 0.1,
        format!(
            "10 Hz alpha share {alpha_share:.4}, |DE(1/2pie)| {de_zero:.1e}, white-noise width deviation {:.2}%",
            100.0 * worst_ratio
        ),
    )
}

fn windowing() -> Outcome {
    let cfg = WindowConfig::standard(128.0);
    let signal = Tensor::zeros(&[1, 60 * 128]);
    let n = sliding_windows(&signal, &cfg).unwrap().len();
    outcome(n == 465, format!("60 s at 128 Hz, 2 s / 0.125 s -> {n} windows"))
}

fn overfit() -> Outcome {
    let cfg = TrainConfig { seed: 3, ..TrainConfig::default() };
    let spec = SyntheticSpec { n_subjects: 2, n_trials: 8, ..SyntheticSpec::default() };
    let samples: Vec<FeatureSample> = generate_synthetic(&spec)
        .unwrap()
        .iter()
        .flat_map(|rec| featurize(rec, &cfg.window(rec.sample_rate_hz), &BandSet::default(), LabelDim::Valence).unwrap())
        .take(64)
        .collect();
    let t = Instant::now();
    let mut reached = None;
    for epochs in [25, 50, 100, 200] {
        let out = train(&samples, &TrainConfig { max_epochs: epochs, ..cfg.clone() }).unwrap();
        if evaluate(&out.model, &samples).unwrap().value() == 1.0 {
            reached = Some(epochs);
            break;
        }
    }
    let elapsed = t.elapsed();
    outcome(
        samples.len() == 64 && reached.is_some() && elapsed < Duration::from_secs(300),
        format!(
            "{} samples, two_step, 100% train accuracy {}, {:.1}s",
            samples.len(),
            reached.map_or("not reached in 200 epochs".into(), |e| format!("by epoch {e}")),
            elapsed.as_secs_f64()
        ),
    )
}

/// Runs one `eegfuse` command line in-process.
fn cli(args: &[&str]) -> Result<(), String> {
    let parsed = Cli::try_parse_from(std::iter::once("eegfuse").chain(args.iter().copied())).map_err(|e| e.to_string())?;
    eegfuse::cli::run(parsed).map_err(|e| format!("{e:#}"))
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn write(p: &Path, text: &str) {
    std::fs::write(p, text).unwrap();
}

fn summary_of(report: &Path) -> KeyValues {
    KeyValues::read(&eegfuse::report::summary_path(report)).unwrap()
}

const DESK_EPOCHS: usize = 3;

fn spec_text(effect: f64) -> String {
    format!(
        "n_subjects = 8\nn_trials = 20\nn_channels = 8\nduration_s = 3\nsample_rate_hz = 128\nseed = 7\n\
         signal_band = alpha\neffect_strength = {effect}\n"
    )
}

fn train_text(mode: &str, epochs: usize, hop_s: f64) -> String {
    format!(
        "lr = 0.001\nbatch_size = 64\nmax_epochs = {epochs}\nseed = 0\nlabel_dim = valence\nencoder_kind = gcn\n\
         fusion_mode = {mode}\nk_nn = 5\nn_heads = 8\nwindow_s = 2\nhop_s = {hop_s}\n"
    )
}

struct DeskScale {
    loso: Outcome,
    ablation: Outcome,
}

/// Runs the separable ablation and the chance-level LOSO through the CLI.
fn desk_scale(dir: &Path) -> DeskScale {
    let t = Instant::now();
    let sep = dir.join("separable");
    let null = dir.join("null");
    write(&dir.join("separable.spec"), &spec_text(3.0));
    write(&dir.join("null.spec"), &spec_text(0.0));
    write(&dir.join("desk.cfg"), &train_text("two_step", DESK_EPOCHS, 0.125));
    let run = || -> Result<(), String> {
        cli(&["synth", "--spec", path(&dir.join("separable.spec")), "--out", path(&sep)])?;
        cli(&["synth", "--spec", path(&dir.join("null.spec")), "--out", path(&null)])?;
        cli(&["ablate", "--data", path(&sep), "--config", path(&dir.join("desk.cfg")), "--report", path(&dir.join("ablation.tsv"))])?;
        cli(&["loso", "--data", path(&null), "--config", path(&dir.join("desk.cfg")), "--report", path(&dir.join("null.tsv"))])?;
        Ok(())
    };
    if let Err(e) = run() {
        let fail = || outcome(false, format!("eegfuse failed: {}", e.trim()));
        return DeskScale { loso: fail(), ablation: fail() };
    }
    let elapsed = t.elapsed();

    let ablation = summary_of(&dir.join("ablation.tsv"));
    let mean = |kv: &KeyValues, key: &str| kv.get(key).and_then(|v| v.parse::<f64>().ok());
    let acc = |mode: FusionMode| mean(&ablation, &format!("{}.mean_accuracy", mode.name()));
    let (two, sdee, tdee) = (acc(FusionMode::TwoStep), acc(FusionMode::SdeeOnly), acc(FusionMode::TdeeOnly));
    let chance = mean(&summary_of(&dir.join("null.tsv")), "mean_accuracy");
    let fmt = |v: Option<f64>| v.map_or("missing".to_string(), |v| format!("{v:.4}"));
    let loso = outcome(
        two.is_some_and(|v| v >= 0.90)
            && sdee.is_some()
            && tdee.is_some()
            && chance.is_some_and(|v| (v - 0.5).abs() <= 0.1)
            && elapsed < Duration::from_secs(30 * 60),
        format!(
            "8 subjects x 20 trials, {DESK_EPOCHS} epochs: two_step {} (>= 0.90), sdee_only {}, tdee_only {}, \
             effect 0 two_step {} (0.5 +/- 0.1), {:.0}s",
            fmt(two),
            fmt(sdee),
            fmt(tdee),
            fmt(chance),
            elapsed.as_secs_f64()
        ),
    );

    let table = std::fs::read_to_string(dir.join("ablation.tsv")).unwrap_or_default();
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    let expected = [
        ["x", "", "", "-"],
        ["", "x", "", "-"],
        ["x", "x", "", "Concat"],
        ["x", "x", "x", "One-step"],
        ["x", "x", "x", "Two-step"],
    ];
    let shaped = table.lines().next() == Some("sdee\ttdee\tcda\tfusion\tvalence\tarousal")
        && rows.len() == 5
        && rows.iter().zip(expected).all(|(r, e)| r.len() == 6 && r[..4] == e);
    let ordered = matches!((two, sdee), (Some(t), Some(s)) if t >= s);
    let ablation = outcome(
        shaped && ordered,
        format!(
            "{} rows{} [{}], two_step {} vs sdee_only {}",
            rows.len(),
            if shaped { " in table order" } else { " (unexpected layout)" },
            FusionMode::ALL.iter().map(|&m| format!("{} {}", m.name(), fmt(acc(m)))).collect::<Vec<_>>().join(", "),
            fmt(two),
            fmt(sdee)
        ),
    );
    DeskScale { loso, ablation }
}

fn determinism(dir: &Path) -> Outcome {
    let data = dir.join("small");
    write(
        &dir.join("small.spec"),
        "n_subjects = 3\nn_trials = 4\nn_channels = 8\nduration_s = 3\nsample_rate_hz = 128\nseed = 11\n\
         signal_band = alpha\neffect_strength = 3\n",
    );
    write(&dir.join("small.cfg"), &train_text("two_step", 1, 0.25));
    let reports = [dir.join("first.tsv"), dir.join("second.tsv")];
    let run = || -> Result<(), String> {
        cli(&["synth", "--spec", path(&dir.join("small.spec")), "--out", path(&data)])?;
        for r in &reports {
            cli(&["loso", "--data", path(&data), "--config", path(&dir.join("small.cfg")), "--report", path(r)])?;
        }
        Ok(())
    };
    if let Err(e) = run() {
        return outcome(false, format!("eegfuse failed: {}", e.trim()));
    }
    let bytes = |p: &Path| std::fs::read(p).unwrap();
    let sums = reports.iter().map(|r| eegfuse::report::summary_path(r)).collect::<Vec<_>>();
    let same_table = bytes(&reports[0]) == bytes(&reports[1]);
    let same_summary = bytes(&sums[0]) == bytes(&sums[1]);
    outcome(
        same_table && same_summary,
        format!("two loso runs: table identical {same_table}, summary identical {same_summary}"),
    )
}

fn fusion_invariants() -> Outcome {
    let mut r = rng(109);
    let (mut preserved, mut row_err, mut perm_err) = (true, 0.0f64, 0.0f64);
    let pool = |m: &Tensor| -> Vec<f64> {
        (0..m.dim(1)).map(|j| (0..m.dim(0)).map(|i| m.at2(i, j)).sum::<f64>() / m.dim(0) as f64).collect()
    };
    let instances = 200;
    for i in 0..instances {
        let (c, t, d) = (1 + i % 9, 1 + (i * 7) % 31, 64);
        let xa = randn(&mut r, &[c, d], 2.0);
        let xb = randn(&mut r, &[t, d], 2.0);
        let w = random_cda_weights(&mut r, d);
        let (x_cm, att) = apply_cross_domain_attention(&xa, &xb, &w, 8).unwrap();
        let x = fuse_two_step(&xa, &xb, &x_cm).unwrap();
        preserved &= x.data()[..d] == pool(&xa)[..] && x.data()[d..2 * d] == pool(&xb)[..];
        for row in att.data().chunks(t) {
            row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        let perm = shuffled(&mut r, t);
        let (permuted, _) = apply_cross_domain_attention(&xa, &permute_rows(&xb, &perm), &w, 8).unwrap();
        perm_err = perm_err.max(x_cm.max_abs_diff(&permuted));
    }
    outcome(
        preserved && row_err <= 1e-9 && perm_err <= 1e-10,
        format!(
            "{instances} instances: pooled branches exact {preserved}, attention row-sum error {row_err:.1e}, \
             key/value permutation error {perm_err:.1e}"
        ),
    )
}
