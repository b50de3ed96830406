mod support;

use support::*;

fn check(name: &str) {
    let case = gradient_cases().into_iter().find(|c| c.name == name).unwrap();
    for seed in 0..6 {
        let errs = (case.run)(seed).unwrap();
        for (k, e) in errs.iter().enumerate() {
            assert!(*e <= case.tolerance(), "{name} seed {seed} input {k}: rel err {e:e}");
        }
    }
}

#[test]
fn linear() {
    check("linear");
}

#[test]
fn conv1d() {
    check("conv1d");
}

#[test]
fn batch_norm() {
    check("batch_norm");
}

#[test]
fn lstm() {
    check("lstm");
}

#[test]
fn bilstm() {
    check("bilstm");
}

#[test]
fn softmax() {
    check("softmax");
}

#[test]
fn cross_entropy() {
    check("cross_entropy");
}

#[test]
fn gcn_layer() {
    check("gcn_layer");
}

#[test]
fn gat_layer() {
    check("gat_layer");
}

#[test]
fn cross_domain_attention() {
    check("cross_domain_attention");
}

#[test]
fn classifier() {
    check("classifier");
}

#[test]
fn suite_covers_every_op() {
    let names: Vec<&str> = gradient_cases().iter().map(|c| c.name).collect();
    assert_eq!(names.len(), 11);
}
