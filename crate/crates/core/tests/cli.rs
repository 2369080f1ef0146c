mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::random_images;
use hebatch::cli::{EXIT_INFEASIBLE, EXIT_IO, EXIT_OK, EXIT_FAILURE};
use hebatch::model::io::{load_scores, save_inputs, save_weights, BatchSection, RunConfig};
use hebatch::model::{Architecture, NetworkDef};
use hebatch::EngineParams;
use tempfile::TempDir;

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new(target: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let arch = Architecture::tiny();
        let cfg = RunConfig {
            he: EngineParams::new(1024),
            model: arch.clone(),
            batch: BatchSection { target, workers: 2 },
            activation: Default::default(),
            bootstrap: Default::default(),
            base_dir: PathBuf::new(),
        };
        std::fs::write(dir.path().join("run.toml"), cfg.to_toml().unwrap()).unwrap();
        save_weights(&dir.path().join("weights"), &NetworkDef::random(&arch, 11).unwrap()).unwrap();
        save_inputs(&dir.path().join("inputs.csv"), &random_images(target, arch.input, 12)).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_hebatch"))
            .current_dir(self.dir.path())
            .args(args)
            .output()
            .unwrap()
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn text(out: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
}

const DATA: [&str; 6] = ["--config", "run.toml", "--weights", "weights", "--inputs", "inputs.csv"];

#[test]
fn plan_prints_factors() {
    let f = Fixture::new(16);
    let out = f.run(&["plan", "--config", "run.toml"]);
    assert_eq!(code(&out), EXIT_OK, "{}", text(&out));
    assert!(text(&out).contains("planned key loads"));
}

#[test]
fn infeasible_batch_exits_with_its_code() {
    let f = Fixture::new(16);
    let out = f.run(&["plan", "--config", "run.toml", "--batch", "1000"]);
    assert_eq!(code(&out), EXIT_INFEASIBLE, "{}", text(&out));
    assert!(text(&out).contains("infeasible batch 1000"));
}

#[test]
fn missing_config_is_an_io_error() {
    let f = Fixture::new(16);
    let out = f.run(&["plan", "--config", "nope.toml"]);
    assert_eq!(code(&out), EXIT_IO, "{}", text(&out));
}

#[test]
fn infer_writes_scores_and_report_deterministically() {
    let f = Fixture::new(16);
    let mut args = vec!["infer"];
    args.extend(DATA);
    args.extend(["--out", "a.csv"]);
    let out = f.run(&args);
    assert_eq!(code(&out), EXIT_OK, "{}", text(&out));
    args.pop();
    args.push("b.csv");
    assert_eq!(code(&f.run(&args)), EXIT_OK);
    let a = load_scores(&f.path("a.csv")).unwrap();
    assert_eq!(a.len(), 16);
    assert_eq!(a, load_scores(&f.path("b.csv")).unwrap());
    assert!(f.path("a.csv.report.json").exists());

    let report = f.run(&["report", "--input", "a.csv.report.json"]);
    assert_eq!(code(&report), EXIT_OK, "{}", text(&report));
    assert!(text(&report).contains("rotations/image"));
}

#[test]
fn verify_passes_in_exact_mode() {
    let f = Fixture::new(16);
    let mut args = vec!["verify"];
    args.extend(DATA);
    args.extend(["--out", "verify.json"]);
    let out = f.run(&args);
    assert_eq!(code(&out), EXIT_OK, "{}", text(&out));
    let json = std::fs::read_to_string(f.path("verify.json")).unwrap();
    assert!(json.contains("\"passed\": true"));
}

#[test]
fn pack_writes_one_row_per_channel_and_tile() {
    let f = Fixture::new(16);
    let out = f.run(&["pack", "--config", "run.toml", "--inputs", "inputs.csv", "--out", "packed.csv"]);
    assert_eq!(code(&out), EXIT_OK, "{}", text(&out));
    let rows = load_scores(&f.path("packed.csv")).unwrap();
    // 16 images at 4 per tile, 3 channels per tile.
    assert_eq!(rows.len(), 12);
    assert!(rows.iter().all(|r| r.len() == 1024));
}

fn corrupt(path: &Path) {
    let body = std::fs::read_to_string(path).unwrap();
    let mut lines: Vec<&str> = body.lines().collect();
    lines.pop();
    std::fs::write(path, lines.join("\n")).unwrap();
}

#[test]
fn corrupted_weights_are_rejected() {
    let f = Fixture::new(16);
    corrupt(&f.path("weights/g1.b0.conv1.weight.csv"));
    let mut args = vec!["infer"];
    args.extend(DATA);
    args.extend(["--out", "s.csv"]);
    let out = f.run(&args);
    assert_eq!(code(&out), EXIT_FAILURE, "{}", text(&out));
    assert!(text(&out).contains("g1.b0.conv1"), "{}", text(&out));
    assert!(!f.path("s.csv").exists());
}

#[test]
fn wrong_image_count_is_rejected() {
    let f = Fixture::new(16);
    let mut args = vec!["infer"];
    args.extend(DATA);
    args.extend(["--out", "s.csv", "--batch", "64"]);
    let out = f.run(&args);
    assert_eq!(code(&out), EXIT_FAILURE, "{}", text(&out));
    assert!(text(&out).contains("holds 16 images"));
}
