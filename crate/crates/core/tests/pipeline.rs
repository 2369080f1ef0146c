mod common;

use common::{max_abs_diff, random_images};
use hebatch::model::reference::forward_plain;
use hebatch::model::{Architecture, BootstrapPolicy, NetworkDef};
use hebatch::nonlinear::{ActivationConfig, DEFAULT_DEGREES};
use hebatch::pipeline::{infer, plan, CostReport, InferOutput};
use hebatch::{Engine, EngineParams, Error};

fn run(net: &NetworkDef, n: usize, target: usize, workers: usize, seed: u64) -> (Vec<hebatch::Image>, InferOutput) {
    let p = plan(&net.arch, n, target).unwrap();
    let images = random_images(target, net.arch.input, seed);
    let mut e = Engine::new(EngineParams::new(n)).unwrap();
    let out = infer(&mut e, net, &p, &images, workers).unwrap();
    (images, out)
}

fn worst_deviation(net: &NetworkDef, images: &[hebatch::Image], scores: &[Vec<f64>]) -> f64 {
    images
        .iter()
        .zip(scores)
        .map(|(img, got)| max_abs_diff(&forward_plain(net, img), got))
        .fold(0.0, f64::max)
}

#[test]
fn tiny_net_matches_plaintext_at_every_batch() {
    let net = NetworkDef::random(&Architecture::tiny(), 1).unwrap();
    for target in [4, 16, 64] {
        let (images, out) = run(&net, 1024, target, 2, 7);
        assert!(worst_deviation(&net, &images, &out.scores) < 1e-9, "target {target}");
        assert!(out.report.key_violations.is_empty(), "{:?}", out.report.key_violations);
        assert_eq!(out.report.effective_batch, target);
    }
}

#[test]
fn narrow_resnet20_matches_plaintext() {
    let net = NetworkDef::random(&Architecture::resnet20([4, 8, 16], 10), 2).unwrap();
    let (images, out) = run(&net, 4096, 16, 2, 3);
    assert!(worst_deviation(&net, &images, &out.scores) < 1e-9);
    assert_eq!(out.report.factors, vec![4, 1]);
    assert!(out.report.within_memory_bound());
}

#[test]
fn worker_count_does_not_change_results() {
    let net = NetworkDef::random(&Architecture::tiny(), 5).unwrap();
    let (_, one) = run(&net, 1024, 16, 1, 9);
    let (_, four) = run(&net, 1024, 16, 4, 9);
    assert_eq!(one.scores, four.scores);
    assert_eq!(one.report.totals.rotations, four.report.totals.rotations);
    assert_eq!(one.report.totals.plain_mults, four.report.totals.plain_mults);
}

#[test]
fn polynomial_mode_without_bootstraps_runs_out_of_levels() {
    let act = ActivationConfig::polynomial(8.0, &DEFAULT_DEGREES).unwrap();
    let net = NetworkDef::random(&Architecture::tiny(), 6)
        .unwrap()
        .with_activation(act)
        .with_bootstrap(BootstrapPolicy::Explicit(Vec::new()));
    let p = plan(&net.arch, 1024, 4).unwrap();
    let images = random_images(4, net.arch.input, 1);
    let mut e = Engine::new(EngineParams::new(1024)).unwrap();
    assert!(matches!(infer(&mut e, &net, &p, &images, 1), Err(Error::LevelExhausted { .. })));
}

#[test]
fn explicit_bootstrap_sites_are_honoured() {
    let base = NetworkDef::random(&Architecture::tiny(), 6).unwrap();
    let mut sites = base.arch.layer_names();
    sites.extend(["pool".to_string(), "head".to_string()]);
    let net = base.with_bootstrap(BootstrapPolicy::Explicit(sites));
    let (images, out) = run(&net, 1024, 4, 1, 1);
    assert!(out.report.totals.bootstraps > 0);
    assert!(worst_deviation(&net, &images, &out.scores) < 1e-9);
    let auto = NetworkDef::random(&Architecture::tiny(), 6).unwrap();
    let (_, baseline) = run(&auto, 1024, 4, 1, 1);
    assert!(out.report.totals.bootstraps > baseline.report.totals.bootstraps);
}

#[test]
fn auto_bootstrap_counts_are_amortized() {
    let act = ActivationConfig::polynomial(8.0, &DEFAULT_DEGREES).unwrap();
    let net = NetworkDef::random(&Architecture::tiny(), 8).unwrap().with_activation(act);
    let (_, small) = run(&net, 1024, 4, 2, 2);
    let (_, large) = run(&net, 1024, 64, 2, 2);
    assert!(small.report.totals.bootstraps > 0);
    assert!(large.report.amortized.bootstraps < small.report.amortized.bootstraps);
}

#[test]
fn mismatched_inputs_are_rejected() {
    let net = NetworkDef::random(&Architecture::tiny(), 1).unwrap();
    let p = plan(&net.arch, 1024, 16).unwrap();
    let mut e = Engine::new(EngineParams::new(1024)).unwrap();
    let short = random_images(15, net.arch.input, 1);
    assert!(matches!(infer(&mut e, &net, &p, &short, 1), Err(Error::ShapeMismatch(_))));
    let mut other = Engine::new(EngineParams::new(2048)).unwrap();
    let images = random_images(16, net.arch.input, 1);
    assert!(matches!(infer(&mut other, &net, &p, &images, 1), Err(Error::ShapeMismatch(_))));
}

#[test]
fn small_noise_keeps_scores_close() {
    let net = NetworkDef::random(&Architecture::tiny(), 3).unwrap();
    let p = plan(&net.arch, 1024, 16).unwrap();
    let images = random_images(16, net.arch.input, 4);
    let mut e = Engine::new(EngineParams::new(1024).with_noise(1e-9)).unwrap();
    let out = infer(&mut e, &net, &p, &images, 2).unwrap();
    let worst = worst_deviation(&net, &images, &out.scores);
    assert!(worst > 0.0 && worst < 1e-5, "{worst:e}");
}

#[test]
fn report_round_trips_through_json() {
    let net = NetworkDef::random(&Architecture::tiny(), 1).unwrap();
    let (_, out) = run(&net, 1024, 16, 1, 1);
    let back: CostReport = serde_json::from_str(&out.report.to_json()).unwrap();
    assert_eq!(back, out.report);
    assert!(out.report.table().contains("rotations/image"));
}
