//! Command implementations behind the `hebatch` binary.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::model::io::{format_rows, load_inputs, read_text, write_scores, write_text, RunConfig};
use crate::model::reference::{argmax, forward_plain};
use crate::nonlinear::ActivationMode;
use crate::packing::packed_slots;
use crate::pipeline::{infer, plan, CostReport, Plan};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "hebatch", version, about = "Batched encrypted CNN inference on a simulated HE engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pack input images into first-stage slot vectors.
    Pack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the batch plan without running anything.
    Plan {
        #[command(flatten)]
        common: Common,
    },
    /// Run encrypted inference and write scores plus a JSON report.
    Infer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        out: PathBuf,
        /// Report path; defaults to `<out>.report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compare encrypted inference against the plaintext forward pass.
    Verify {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        /// Required argmax agreement in polynomial mode.
        #[arg(long, default_value_t = 0.98)]
        min_agreement: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a saved JSON report as a table.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Exact,
    Polynomial,
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured batch target.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long, value_enum)]
    pub activation_mode: Option<ModeArg>,
}

#[derive(Debug, Args)]
pub struct Data {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub inputs: PathBuf,
}

impl Common {
    pub fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(b) = self.batch {
            cfg.batch.target = b;
        }
        if let Some(w) = self.workers {
            cfg.batch.workers = w.max(1);
        }
        if let Some(s) = self.noise_sigma {
            cfg.he.noise_sigma = s;
            cfg.he.validate()?;
        }
        if let Some(m) = self.activation_mode {
            cfg.activation.mode = match m {
                ModeArg::Exact => ActivationMode::ExactOracle,
                ModeArg::Polynomial => ActivationMode::Polynomial,
            };
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub images: usize,
    pub max_abs_deviation: f64,
    pub argmax_agreement: f64,
    pub passed: bool,
}

/// Machine-readable summary of one command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub plan: Plan,
    pub cost: CostReport,
    pub verification: Option<Verification>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InfeasibleBatch { .. } => EXIT_INFEASIBLE,
        Error::Io { .. } => EXIT_IO,
        _ => EXIT_FAILURE,
    }
}

pub fn cmd_plan(cfg: &RunConfig) -> Result<Plan> {
    plan(&cfg.model, cfg.he.slots, cfg.batch.target)
}

/// Slot vectors of every first-stage tile, one CSV row per channel ciphertext.
pub fn cmd_pack(cfg: &RunConfig, inputs: &Path, out: &Path) -> Result<usize> {
    let p = cmd_plan(cfg)?;
    let images = load_batch(cfg, inputs)?;
    let layout = p.stages[0].layout;
    let mut rows = Vec::new();
    for tile in images.chunks(layout.batch) {
        rows.extend(packed_slots(tile, &layout)?);
    }
    write_text(out, &format_rows(&rows))?;
    Ok(rows.len())
}

fn load_batch(cfg: &RunConfig, inputs: &Path) -> Result<Vec<crate::tensor::Image>> {
    let images = load_inputs(inputs, cfg.model.input)?;
    if images.len() != cfg.batch.target {
        return Err(Error::ShapeMismatch(format!(
            "{} holds {} images, batch target is {}",
            inputs.display(),
            images.len(),
            cfg.batch.target
        )));
    }
    Ok(images)
}

/// Scores per image and the run report.
pub fn cmd_infer(cfg: &RunConfig, weights: &Path, inputs: &Path) -> Result<(Vec<Vec<f64>>, RunReport)> {
    let net = cfg.load_network(weights)?;
    let p = cmd_plan(cfg)?;
    let images = load_batch(cfg, inputs)?;
    let mut engine = Engine::new(cfg.he.clone())?;
    let out = infer(&mut engine, &net, &p, &images, cfg.batch.workers)?;
    Ok((
        out.scores,
        RunReport {
            plan: p,
            cost: out.report,
            verification: None,
        },
    ))
}

pub fn cmd_verify(cfg: &RunConfig, weights: &Path, inputs: &Path, min_agreement: f64) -> Result<RunReport> {
    let (scores, mut report) = cmd_infer(cfg, weights, inputs)?;
    let net = cfg.load_network(weights)?;
    let images = load_batch(cfg, inputs)?;
    let mut worst = 0.0f64;
    let mut agree = 0;
    for (img, got) in images.iter().zip(&scores) {
        let want = forward_plain(&net, img);
        worst = want.iter().zip(got).fold(worst, |m, (a, b)| m.max((a - b).abs()));
        agree += (argmax(&want) == argmax(got)) as usize;
    }
    let rate = agree as f64 / images.len() as f64;
    let passed = match cfg.activation.mode {
        ActivationMode::ExactOracle => worst <= 1e-9 && agree == images.len(),
        ActivationMode::Polynomial => rate >= min_agreement,
    };
    report.verification = Some(Verification {
        images: images.len(),
        max_abs_deviation: worst,
        argmax_agreement: rate,
        passed,
    });
    Ok(report)
}

pub fn cmd_report(input: &Path) -> Result<String> {
    let text = read_text(input)?;
    let report: RunReport =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", input.display())))?;
    let mut out = report.plan.describe();
    out.push_str(&report.cost.table());
    if let Some(v) = &report.verification {
        out.push_str(&format!(
            "verification: {} images, max deviation {:e}, agreement {:.2}%, {}\n",
            v.images,
            v.max_abs_deviation,
            100.0 * v.argmax_agreement,
            if v.passed { "pass" } else { "FAIL" }
        ));
    }
    Ok(out)
}

/// Run a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Pack { common, inputs, out } => common.load().and_then(|cfg| {
            let rows = cmd_pack(&cfg, &inputs, &out)?;
            println!("wrote {rows} packed ciphertext rows to {}", out.display());
            Ok(EXIT_OK)
        }),
        Command::Plan { common } => common.load().and_then(|cfg| {
            let p = cmd_plan(&cfg)?;
            print!("{}", p.describe());
            println!("planned key loads: {}", p.planned_key_loads());
            Ok(EXIT_OK)
        }),
        Command::Infer {
            common,
            data,
            out,
            report,
        } => common.load().and_then(|cfg| {
            let (scores, rep) = cmd_infer(&cfg, &data.weights, &data.inputs)?;
            let report_path = report.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".report.json");
                PathBuf::from(p)
            });
            write_scores(&out, &scores)?;
            write_text(&report_path, &rep.to_json())?;
            print!("{}", rep.cost.table());
            Ok(EXIT_OK)
        }),
        Command::Verify {
            common,
            data,
            min_agreement,
            out,
        } => common.load().and_then(|cfg| {
            let rep = cmd_verify(&cfg, &data.weights, &data.inputs, min_agreement)?;
            if let Some(path) = out {
                write_text(&path, &rep.to_json())?;
            }
            let v = rep.verification.as_ref().expect("verify fills this");
            print!("{}", rep.cost.table());
            println!(
                "max deviation {:e}, argmax agreement {:.2}% -> {}",
                v.max_abs_deviation,
                100.0 * v.argmax_agreement,
                if v.passed { "pass" } else { "FAIL" }
            );
            Ok(if v.passed { EXIT_OK } else { EXIT_VERIFY })
        }),
        Command::Report { input } => cmd_report(&input).map(|text| {
            print!("{text}");
            EXIT_OK
        }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
