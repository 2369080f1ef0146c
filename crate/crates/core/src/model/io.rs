//! File formats.
//!
//! Tensors are CSV files named `<layer>.<param>.csv`: a `shape: d1 d2 ...`
//! header line, then comma-separated values in row-major order (line breaks
//! anywhere). Run configuration is TOML. Inputs and scores are CSV with one
//! row per image.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conv::ConvSpec;
use crate::engine::EngineParams;
use crate::error::{Error, Result};
use crate::fc::FcSpec;
use crate::nonlinear::{ActivationConfig, ActivationMode, DEFAULT_BOUND, DEFAULT_DEGREES};
use crate::tensor::Image;

use super::reference::{fold_batch_norm, BatchNorm, DEFAULT_BN_EPS};
use super::{Architecture, BootstrapPolicy, NetworkDef};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Writes `text`, creating missing parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn parse_cell(cell: &str, origin: &str) -> Result<f64> {
    let v: f64 = cell
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("{origin}: bad number {:?}", cell.trim())))?;
    if !v.is_finite() {
        return Err(Error::NonFiniteValue(origin.to_string()));
    }
    Ok(v)
}

/// A dense tensor with its declared shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {want} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let dims = header
            .trim()
            .strip_prefix("shape:")
            .ok_or_else(|| Error::Parse(format!("{origin}: first line must be `shape: d1 d2 ...`")))?;
        let shape = dims
            .split_whitespace()
            .map(|d| d.parse::<usize>().map_err(|_| Error::Parse(format!("{origin}: bad dimension {d:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let mut data = Vec::new();
        for (ln, line) in lines.enumerate() {
            let where_ = format!("{origin}:{}", ln + 2);
            for cell in line.split(',').filter(|c| !c.trim().is_empty()) {
                data.push(parse_cell(cell, &where_)?);
            }
        }
        Tensor::new(shape, data).map_err(|e| match e {
            Error::ShapeMismatch(m) => Error::ShapeMismatch(format!("{origin}: {m}")),
            other => other,
        })
    }

    /// One line per leading index; values use shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        let mut out = format!("shape: {}\n", dims.join(" "));
        let row = if self.shape.len() > 1 {
            self.data.len() / self.shape[0].max(1)
        } else {
            self.data.len()
        };
        for chunk in self.data.chunks(row.max(1)) {
            let cells: Vec<String> = chunk.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        Tensor::parse(&read_text(path)?, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_csv())
    }

    fn expect_shape(self, shape: &[usize], origin: &Path) -> Result<Vec<f64>> {
        if self.shape != shape {
            return Err(Error::ShapeMismatch(format!(
                "{}: declared shape {:?}, expected {shape:?}",
                origin.display(),
                self.shape
            )));
        }
        Ok(self.data)
    }
}

fn tensor_path(dir: &Path, layer: &str, param: &str) -> PathBuf {
    dir.join(format!("{layer}.{param}.csv"))
}

fn load_optional(dir: &Path, layer: &str, param: &str, shape: &[usize]) -> Result<Option<Vec<f64>>> {
    let path = tensor_path(dir, layer, param);
    if !path.exists() {
        return Ok(None);
    }
    Tensor::load(&path)?.expect_shape(shape, &path).map(Some)
}

fn load_required(dir: &Path, layer: &str, param: &str, shape: &[usize]) -> Result<Vec<f64>> {
    let path = tensor_path(dir, layer, param);
    Tensor::load(&path)?.expect_shape(shape, &path)
}

fn load_conv(dir: &Path, name: &str, i: usize, o: usize, k: usize, s: usize) -> Result<ConvSpec> {
    let weights = load_required(dir, name, "weight", &[o, i, k, k])?;
    let bias = load_optional(dir, name, "bias", &[o])?.unwrap_or_else(|| vec![0.0; o]);
    let spec = ConvSpec::new(i, o, k, s, weights, bias)?;
    let bn = ["bn_gamma", "bn_beta", "bn_mean", "bn_var"]
        .iter()
        .map(|p| load_optional(dir, name, p, &[o]))
        .collect::<Result<Vec<_>>>()?;
    match bn.as_slice() {
        [None, None, None, None] => Ok(spec),
        [Some(gamma), Some(beta), Some(mean), Some(var)] => {
            let eps = load_optional(dir, name, "bn_eps", &[1])?.map_or(DEFAULT_BN_EPS, |v| v[0]);
            let bn = BatchNorm {
                gamma: gamma.clone(),
                beta: beta.clone(),
                mean: mean.clone(),
                var: var.clone(),
                eps,
            };
            fold_batch_norm(&spec, &bn)
        }
        _ => Err(Error::ShapeMismatch(format!(
            "{name}: batch norm needs all of bn_gamma, bn_beta, bn_mean, bn_var"
        ))),
    }
}

/// Load every layer of `arch` from a directory of tensor files, folding
/// batch norm where present. Missing biases default to zero.
pub fn load_weights(dir: &Path, arch: &Architecture) -> Result<NetworkDef> {
    let d_in = arch.feature_channels();
    let fc_w = load_required(dir, "fc", "weight", &[arch.classes, d_in])?;
    let fc_b = load_optional(dir, "fc", "bias", &[arch.classes])?.unwrap_or_else(|| vec![0.0; arch.classes]);
    let head = FcSpec::new(d_in, arch.classes, fc_w, fc_b)?;
    let mut first_err = None;
    let net = NetworkDef::build_with(
        arch,
        |name, i, o, k, s| match load_conv(dir, name, i, o, k, s) {
            Ok(spec) => spec,
            Err(e) => {
                first_err.get_or_insert(e);
                ConvSpec::zeros(i, o, k, s)
            }
        },
        head,
    );
    match first_err {
        Some(e) => Err(e),
        None => net,
    }
}

/// Write folded weights and biases, one file per tensor.
pub fn save_weights(dir: &Path, net: &NetworkDef) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (name, spec) in net.conv_layers() {
        let (o, i, k) = (spec.out_channels, spec.in_channels, spec.kernel);
        Tensor::new(vec![o, i, k, k], spec.weights.clone())?.save(&tensor_path(dir, &name, "weight"))?;
        Tensor::new(vec![o], spec.bias.clone())?.save(&tensor_path(dir, &name, "bias"))?;
    }
    let h = &net.head;
    Tensor::new(vec![h.d_out, h.d_in], h.weights.clone())?.save(&tensor_path(dir, "fc", "weight"))?;
    Tensor::new(vec![h.d_out], h.bias.clone())?.save(&tensor_path(dir, "fc", "bias"))
}

/// One image per row, channel-major then row-major.
pub fn parse_inputs(text: &str, shape: [usize; 3], origin: &str) -> Result<Vec<Image>> {
    let [c, h, w] = shape;
    let mut images = Vec::new();
    for (ln, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let where_ = format!("{origin}:{}", ln + 1);
        let row = line.split(',').map(|cell| parse_cell(cell, &where_)).collect::<Result<Vec<_>>>()?;
        if row.len() != c * h * w {
            return Err(Error::ShapeMismatch(format!(
                "{where_}: row has {} values, expected {c}x{h}x{w} = {}",
                row.len(),
                c * h * w
            )));
        }
        images.push(Image::new(c, h, w, row)?);
    }
    Ok(images)
}

pub fn load_inputs(path: &Path, shape: [usize; 3]) -> Result<Vec<Image>> {
    parse_inputs(&read_text(path)?, shape, &path.display().to_string())
}

pub fn format_rows(rows: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for r in rows {
        let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn save_inputs(path: &Path, images: &[Image]) -> Result<()> {
    let rows: Vec<Vec<f64>> = images.iter().map(|i| i.data.clone()).collect();
    write_text(path, &format_rows(&rows))
}

pub fn write_scores(path: &Path, scores: &[Vec<f64>]) -> Result<()> {
    write_text(path, &format_rows(scores))
}

pub fn load_scores(path: &Path) -> Result<Vec<Vec<f64>>> {
    let origin = path.display().to_string();
    read_text(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|c| parse_cell(c, &origin)).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSection {
    pub target: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationSection {
    #[serde(default = "default_mode")]
    pub mode: ActivationMode,
    #[serde(default = "default_bound")]
    pub bound: f64,
    #[serde(default = "default_degrees")]
    pub degrees: Vec<usize>,
    /// Fitted coefficients are read from here when present, else fitted
    /// and written here. Relative to the config file.
    #[serde(default)]
    pub cache: Option<PathBuf>,
}

fn default_mode() -> ActivationMode {
    ActivationMode::ExactOracle
}

fn default_bound() -> f64 {
    DEFAULT_BOUND
}

fn default_degrees() -> Vec<usize> {
    DEFAULT_DEGREES.to_vec()
}

impl Default for ActivationSection {
    fn default() -> Self {
        ActivationSection {
            mode: default_mode(),
            bound: default_bound(),
            degrees: default_degrees(),
            cache: None,
        }
    }
}

impl ActivationSection {
    pub fn resolve(&self, base: &Path) -> Result<ActivationConfig> {
        if self.mode == ActivationMode::ExactOracle {
            return Ok(ActivationConfig {
                bound: self.bound,
                degrees: self.degrees.clone(),
                ..ActivationConfig::exact()
            });
        }
        let cache = self.cache.as_ref().map(|p| base.join(p));
        if let Some(path) = cache.as_ref().filter(|p| p.exists()) {
            let cfg = ActivationConfig::load(path)?;
            if cfg.degrees == self.degrees && cfg.mode == ActivationMode::Polynomial {
                return Ok(cfg.with_bound(self.bound));
            }
        }
        let cfg = ActivationConfig::polynomial(self.bound, &self.degrees)?;
        if let Some(path) = cache {
            cfg.save(&path)?;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct BootstrapSection {
    /// Explicit sites; empty means automatic placement.
    #[serde(default)]
    pub points: Vec<String>,
}

impl BootstrapSection {
    pub fn policy(&self) -> BootstrapPolicy {
        if self.points.is_empty() {
            BootstrapPolicy::Auto
        } else {
            BootstrapPolicy::Explicit(self.points.clone())
        }
    }
}

/// The whole run configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub he: EngineParams,
    pub model: Architecture,
    pub batch: BatchSection,
    #[serde(default)]
    pub activation: ActivationSection,
    #[serde(default)]
    pub bootstrap: BootstrapSection,
    /// Directory that relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse(format!("{origin}: {e}")))?;
        cfg.he.validate()?;
        cfg.model.validate()?;
        if cfg.batch.target == 0 || cfg.batch.workers == 0 {
            return Err(Error::InvalidConfig("batch target and workers must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::parse(&read_text(path)?, &path.display().to_string())?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn activation_config(&self) -> Result<ActivationConfig> {
        self.activation.resolve(&self.base_dir)
    }

    /// Network with weights from `dir` and this file's activation and bootstrap settings.
    pub fn load_network(&self, dir: &Path) -> Result<NetworkDef> {
        Ok(load_weights(dir, &self.model)?
            .with_activation(self.activation_config()?)
            .with_bootstrap(self.bootstrap.policy()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_file_parses() {
        let t = Tensor::parse("shape: 1 1 3 3\n1,2,3\n4,5,6\n7,8,9\n", "k").unwrap();
        assert_eq!(t.shape, vec![1, 1, 3, 3]);
        assert_eq!(t.data[8], 9.0);
    }

    #[test]
    fn short_file_is_shape_mismatch() {
        let body: Vec<String> = (0..53).map(|v| v.to_string()).collect();
        let text = format!("shape: 2 3 3 3\n{}\n", body.join(","));
        assert!(matches!(Tensor::parse(&text, "w"), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(Tensor::parse("shape: 2\n1,inf\n", "w"), Err(Error::NonFiniteValue(_))));
        assert!(matches!(Tensor::parse("shape: 2\n1,x\n", "w"), Err(Error::Parse(_))));
    }

    #[test]
    fn tensor_round_trip_is_exact() {
        let t = Tensor::new(vec![2, 2], vec![0.1, 1.0 / 3.0, -2e-300, 7.0]).unwrap();
        assert_eq!(Tensor::parse(&t.to_csv(), "t").unwrap(), t);
    }

    #[test]
    fn inputs_row_length_checked() {
        assert!(matches!(parse_inputs("1,2,3\n", [1, 2, 2], "in"), Err(Error::ShapeMismatch(_))));
        assert_eq!(parse_inputs("1,2,3,4\n\n5,6,7,8\n", [1, 2, 2], "in").unwrap().len(), 2);
    }

    const MINIMAL: &str = r#"
[he]
slots = 1024

[model]
input = [3, 8, 8]
stem_channels = 2
classes = 4
groups = [{ channels = 2, blocks = 1, stride = 1 }]

[batch]
target = 16
"#;

    #[test]
    fn minimal_config_parses() {
        let cfg = RunConfig::parse(MINIMAL, "cfg").unwrap();
        assert_eq!(cfg.he.max_level, 25);
        assert_eq!(cfg.batch.workers, 1);
        assert_eq!(cfg.bootstrap.policy(), BootstrapPolicy::Auto);
    }

    #[test]
    fn unknown_field_named() {
        let text = MINIMAL.replace("target = 16", "target = 16\nspeed = 3");
        match RunConfig::parse(&text, "cfg") {
            Err(Error::Parse(msg)) => assert!(msg.contains("speed"), "{msg}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn weights_round_trip() {
        let net = NetworkDef::random(&Architecture::tiny(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_weights(dir.path(), &net).unwrap();
        assert_eq!(load_weights(dir.path(), &net.arch).unwrap(), net);
    }

    #[test]
    fn missing_bias_defaults_to_zero() {
        let net = NetworkDef::random(&Architecture::tiny(), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_weights(dir.path(), &net).unwrap();
        fs::remove_file(tensor_path(dir.path(), "stem", "bias")).unwrap();
        let loaded = load_weights(dir.path(), &net.arch).unwrap();
        assert!(loaded.stem.bias.iter().all(|&b| b == 0.0));
    }
}
