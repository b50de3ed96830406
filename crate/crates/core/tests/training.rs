mod support;

use std::collections::BTreeSet;

use eegfuse_core::dataset::{generate_synthetic, SyntheticSpec};
use eegfuse_core::model::{argmax, Batch, FusionMode, Model};
use eegfuse_core::nn::{adam_step, relative_error, AdamState};
use eegfuse_core::signal::FeatureSample;
use eegfuse_core::train::*;
use eegfuse_core::{Error, Tensor};
use support::*;

fn subjects(spec: &SyntheticSpec, cfg: &TrainConfig) -> Vec<SubjectSamples> {
    featurize_subjects(&generate_synthetic(spec).unwrap(), cfg).unwrap()
}

fn small_cfg(mode: FusionMode, epochs: usize) -> TrainConfig {
    TrainConfig { fusion_mode: mode, max_epochs: epochs, hop_s: 0.25, ..TrainConfig::default() }
}

fn pooled(subs: &[SubjectSamples]) -> Vec<FeatureSample> {
    subs.iter().flat_map(|s| s.samples.clone()).collect()
}

#[test]
fn overfits_a_single_batch() {
    let cfg = TrainConfig { max_epochs: 200, seed: 3, ..small_cfg(FusionMode::TwoStep, 200) };
    let spec = SyntheticSpec { n_subjects: 2, n_trials: 8, ..SyntheticSpec::default() };
    let samples: Vec<FeatureSample> = pooled(&subjects(&spec, &cfg)).into_iter().take(64).collect();
    assert_eq!(samples.len(), 64);
    let mut reached = None;
    for epochs in [25, 100, 200] {
        let out = train(&samples, &TrainConfig { max_epochs: epochs, ..cfg.clone() }).unwrap();
        if evaluate(&out.model, &samples).unwrap().value() == 1.0 {
            reached = Some(epochs);
            break;
        }
    }
    assert!(reached.is_some(), "64 samples not fitted within 200 epochs");
}

#[test]
fn training_is_deterministic() {
    let cfg = small_cfg(FusionMode::TwoStep, 2);
    let spec = SyntheticSpec { n_subjects: 2, n_trials: 4, ..SyntheticSpec::default() };
    let samples = pooled(&subjects(&spec, &cfg));
    let (a, b) = (train(&samples, &cfg).unwrap(), train(&samples, &cfg).unwrap());
    assert_eq!(a.loss_curve, b.loss_curve);
    assert_eq!(a.model.params(), b.model.params());
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let cfg = TrainConfig { lr: 0.0, ..small_cfg(FusionMode::TwoStep, 3) };
    let spec = SyntheticSpec { n_subjects: 2, n_trials: 4, ..SyntheticSpec::default() };
    let samples = pooled(&subjects(&spec, &cfg));
    let out = train(&samples, &cfg).unwrap();
    let fresh = Model::new(&cfg.model_config(8, 256, 5), cfg.seed).unwrap();
    assert_eq!(out.model.params().trainable, fresh.params().trainable);
}

#[test]
fn single_class_is_refused() {
    let cfg = small_cfg(FusionMode::SdeeOnly, 1);
    let spec = SyntheticSpec { n_subjects: 2, n_trials: 6, ..SyntheticSpec::default() };
    let ones: Vec<FeatureSample> = pooled(&subjects(&spec, &cfg)).into_iter().filter(|s| s.label == 1).collect();
    assert!(matches!(train(&ones, &cfg), Err(Error::Validation(_))));
}

#[test]
fn loso_never_trains_on_the_held_out_subject() {
    let cfg = small_cfg(FusionMode::SdeeOnly, 2);
    let spec = SyntheticSpec { n_subjects: 4, n_trials: 4, ..SyntheticSpec::default() };
    let subs = subjects(&spec, &cfg);
    let mut seen: Vec<(u32, BTreeSet<u32>)> = Vec::new();
    let report = loso_observed(&subs, &cfg, &mut |held, batch| {
        if seen.last().map(|(h, _)| *h) != Some(held) {
            seen.push((held, BTreeSet::new()));
        }
        seen.last_mut().unwrap().1.extend(batch.iter().map(|s| s.subject_id));
    })
    .unwrap();
    assert_eq!(seen.len(), 4);
    for (held, trained_on) in &seen {
        assert!(!trained_on.contains(held));
        assert_eq!(trained_on.len(), 3);
    }
    let order: Vec<u32> = report.folds.iter().map(|f| f.fold_subject).collect();
    assert_eq!(order, vec![1, 2, 3, 4]);
    for f in &report.folds {
        assert_eq!(f.n_test, subs.iter().find(|s| s.subject_id == f.fold_subject).unwrap().samples.len());
        assert_eq!(f.accuracy, f.n_correct as f64 / f.n_test as f64);
    }
    let mean = report.folds.iter().map(|f| f.accuracy).sum::<f64>() / 4.0;
    assert_eq!(report.mean_accuracy, mean);
}

#[test]
fn thirty_two_subjects_give_thirty_two_folds() {
    let cfg = TrainConfig { window_s: 2.0, ..small_cfg(FusionMode::SdeeOnly, 1) };
    let spec = SyntheticSpec { n_subjects: 32, n_trials: 4, duration_s: 2.0, ..SyntheticSpec::default() };
    let report = loso(&generate_synthetic(&spec).unwrap(), &cfg).unwrap();
    assert_eq!(report.folds.len(), 32);
}

#[test]
fn identical_separable_subjects_are_both_learned() {
    let cfg = small_cfg(FusionMode::TdeeOnly, 6);
    let spec = SyntheticSpec { n_subjects: 2, n_trials: 20, ..SyntheticSpec::default() };
    let recs = generate_synthetic(&spec).unwrap();
    let mut twin = recs[0].clone();
    twin.subject_id = 2;
    let report = loso(&[recs[0].clone(), twin], &cfg).unwrap();
    for f in &report.folds {
        assert!(f.accuracy >= 0.9, "fold {} accuracy {}", f.fold_subject, f.accuracy);
    }
}

#[test]
fn loso_needs_two_subjects() {
    let cfg = small_cfg(FusionMode::SdeeOnly, 1);
    let spec = SyntheticSpec { n_subjects: 2, n_trials: 2, ..SyntheticSpec::default() };
    let recs = generate_synthetic(&spec).unwrap();
    assert!(matches!(loso(&recs[..1], &cfg), Err(Error::Validation(_))));
    let dup = [recs[0].clone(), recs[0].clone()];
    assert!(featurize_subjects(&dup, &cfg).is_err());
}

#[test]
fn ablation_has_five_rows_in_order() {
    let cfg = TrainConfig { window_s: 2.0, ..small_cfg(FusionMode::TwoStep, 1) };
    let spec = SyntheticSpec { n_subjects: 2, n_trials: 8, duration_s: 2.0, ..SyntheticSpec::default() };
    let report = ablate(&generate_synthetic(&spec).unwrap(), &cfg).unwrap();
    let modes: Vec<FusionMode> = report.rows.iter().map(|r| r.mode).collect();
    assert_eq!(modes, FusionMode::ALL.to_vec());
}

#[test]
fn accuracy_oracles() {
    let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
    assert_eq!(accuracy_of(&labels, &labels).value(), 1.0);
    assert_eq!(accuracy_of(&[1; 10], &labels).value(), 0.5);
}

#[test]
fn evaluate_matches_recount() {
    let cfg = small_cfg(FusionMode::SdeeOnly, 1);
    let spec = SyntheticSpec { n_subjects: 2, n_trials: 6, ..SyntheticSpec::default() };
    let samples = pooled(&subjects(&spec, &cfg));
    let model = train(&samples, &cfg).unwrap().model;
    let mut correct = 0;
    for s in &samples {
        let batch = Batch::from_samples(&[s], cfg.k_nn).unwrap();
        let logits = model.logits(&batch).unwrap();
        correct += (argmax(logits.data()) == s.label) as usize;
    }
    let acc = evaluate(&model, &samples).unwrap();
    assert_eq!((acc.correct, acc.total), (correct, samples.len()));
}

#[test]
fn argmax_ties_go_to_first_class() {
    assert_eq!(argmax(&[0.5, 0.5]), 0);
    assert_eq!(argmax(&[0.1, 0.7]), 1);
}

#[test]
fn adam_is_deterministic() {
    let mut r = rng(31);
    let grads = vec![randn(&mut r, &[4, 3], 1.0), randn(&mut r, &[3], 1.0)];
    let run = || {
        let mut params = vec![Tensor::full(&[4, 3], 0.5), Tensor::zeros(&[3])];
        let mut state = AdamState::new(1e-2);
        for _ in 0..5 {
            adam_step(&mut params, &grads, &mut state).unwrap();
        }
        params
    };
    assert_eq!(run(), run());
}

#[test]
fn model_gradients_match_directional_differences() {
    let spec = SyntheticSpec { n_subjects: 2, n_trials: 2, ..SyntheticSpec::default() };
    for mode in FusionMode::ALL {
        let cfg = small_cfg(mode, 1);
        let samples = pooled(&subjects(&spec, &cfg));
        let refs: Vec<&FeatureSample> = samples.iter().take(6).collect();
        let batch = Batch::from_samples(&refs, cfg.k_nn).unwrap();
        let mut model = Model::new(&cfg.model_config(8, 256, 5), 9).unwrap();
        let (_, grads, _) = model.loss_and_gradients(&batch).unwrap();
        let g: Vec<f64> = grads.iter().flat_map(|t| t.data().to_vec()).collect();
        let theta = model.params().to_flat();
        let mut r = rng(mode as u64);
        let dir = randn(&mut r, &[theta.len()], 1.0);
        let mut at = |step: f64| {
            let moved: Vec<f64> = theta.iter().zip(dir.data()).map(|(t, d)| t + step * d).collect();
            model.params_mut().set_flat(&moved).unwrap();
            model.loss_and_gradients(&batch).unwrap().0
        };
        let analytic: f64 = g.iter().zip(dir.data()).map(|(a, b)| a * b).sum();
        let (err, numeric) = [1e-6, 1e-7]
            .map(|h| {
                let numeric = (at(h) - at(-h)) / (2.0 * h);
                (relative_error(&[analytic], &[numeric], 0.0), numeric)
            })
            .into_iter()
            .fold((f64::INFINITY, 0.0), |best, e| if e.0 < best.0 { e } else { best });
        assert!(err <= 1e-4, "{}: {analytic} vs {numeric}", mode.name());
    }
}
