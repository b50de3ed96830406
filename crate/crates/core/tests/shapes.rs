mod support;

use eegfuse_core::encoders::{EncoderKind, Sdee, SdeeConfig, Tdee, TdeeConfig};
use eegfuse_core::fusion::{apply_cross_domain_attention, fuse_two_step};
use eegfuse_core::nn::{Initializer, Mode, ModelParams};
use eegfuse_core::Tensor;
use support::*;

#[test]
fn tdee_maps_a_deap_window_to_thirty_steps() {
    let cfg = TdeeConfig::default();
    let mut params = ModelParams::default();
    let tdee = Tdee::register(&cfg, 32, &mut params, &mut Initializer::new(1));
    let mut r = rng(41);
    let y = tdee.encode(&params, &randn(&mut r, &[32, 256], 1.0), Mode::Eval).unwrap();
    assert_eq!(y.shape(), &[30, 64]);
    assert!(y.is_finite());
    assert_eq!(cfg.output_len(256).unwrap(), 30);
}

#[test]
fn tdee_rejects_too_short_windows() {
    assert!(TdeeConfig::default().output_len(10).is_err());
}

#[test]
fn tdee_zero_input_is_finite_and_repeatable() {
    let cfg = TdeeConfig::default();
    let mut params = ModelParams::default();
    let tdee = Tdee::register(&cfg, 4, &mut params, &mut Initializer::new(2));
    let a = tdee.encode(&params, &Tensor::zeros(&[4, 256]), Mode::Eval).unwrap();
    let b = tdee.encode(&params, &Tensor::zeros(&[4, 256]), Mode::Eval).unwrap();
    assert_eq!(a, b);
    assert!(a.is_finite());
}

fn sdee(kind: EncoderKind, seed: u64) -> (Sdee, ModelParams) {
    let cfg = SdeeConfig { encoder_kind: kind, ..SdeeConfig::default() };
    let mut params = ModelParams::default();
    let s = Sdee::register(&cfg, 5, &mut params, &mut Initializer::new(seed)).unwrap();
    (s, params)
}

#[test]
fn sdee_gives_one_embedding_per_channel() {
    let mut r = rng(42);
    let de = randn(&mut r, &[32, 5], 1.0);
    for kind in [EncoderKind::Gcn, EncoderKind::Gat] {
        let (s, p) = sdee(kind, 3);
        assert_eq!(s.encode(&p, &de, 5).unwrap().shape(), &[32, 64]);
    }
}

#[test]
fn gcn_and_gat_disagree() {
    let mut r = rng(43);
    let de = randn(&mut r, &[16, 5], 1.0);
    let (gcn, pg) = sdee(EncoderKind::Gcn, 4);
    let (gat, pa) = sdee(EncoderKind::Gat, 4);
    let a = gcn.encode(&pg, &de, 5).unwrap();
    let b = gat.encode(&pa, &de, 5).unwrap();
    assert!(a.max_abs_diff(&b) > 1e-6);
}

#[test]
fn fusion_widths() {
    let mut r = rng(44);
    let xa = randn(&mut r, &[32, 64], 1.0);
    let xb = randn(&mut r, &[30, 64], 1.0);
    let (x_cm, att) = apply_cross_domain_attention(&xa, &xb, &random_cda_weights(&mut r, 64), 8).unwrap();
    assert_eq!(x_cm.shape(), &[32, 64]);
    assert_eq!(att.shape(), &[8, 32, 30]);
    assert_eq!(fuse_two_step(&xa, &xb, &x_cm).unwrap().shape(), &[192]);
}
