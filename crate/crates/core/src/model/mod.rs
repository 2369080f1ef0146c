//! Network definitions, weight import, batch-norm folding and a plaintext
//! reference forward pass.

pub mod io;
pub mod reference;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::fc::FcSpec;
use crate::nonlinear::ActivationConfig;

pub use reference::{forward_plain, BatchNorm};

/// `relu(conv2(relu(conv1(x))) + shortcut(x))`; identity shortcut when absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub conv1: ConvSpec,
    pub conv2: ConvSpec,
    pub shortcut: Option<ConvSpec>,
}

impl ResidualBlock {
    pub fn stride(&self) -> usize {
        self.conv1.stride
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockGroup {
    pub blocks: Vec<ResidualBlock>,
}

impl BlockGroup {
    pub fn entry_stride(&self) -> usize {
        self.blocks.first().map_or(1, |b| b.stride())
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.out_channels())
    }
}

/// Where bootstraps go: before any layer short on levels, or only at the
/// named sites (`stem`, `g0.b1.conv2`, `pool`, `head`, ...).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum BootstrapPolicy {
    #[default]
    Auto,
    Explicit(Vec<String>),
}

impl BootstrapPolicy {
    pub fn is_explicit_site(&self, site: &str) -> bool {
        matches!(self, BootstrapPolicy::Explicit(sites) if sites.iter().any(|s| s == site))
    }
}

/// Shape-only description of a residual network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// `[channels, height, width]` of the input images.
    pub input: [usize; 3],
    pub stem_channels: usize,
    pub groups: Vec<GroupShape>,
    pub classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupShape {
    pub channels: usize,
    pub blocks: usize,
    pub stride: usize,
}

impl Architecture {
    /// ResNet-20 layout: 32x32 inputs, three groups of three blocks.
    pub fn resnet20(channels: [usize; 3], classes: usize) -> Self {
        Architecture {
            input: [3, 32, 32],
            stem_channels: channels[0],
            groups: channels
                .iter()
                .enumerate()
                .map(|(i, &c)| GroupShape {
                    channels: c,
                    blocks: 3,
                    stride: if i == 0 { 1 } else { 2 },
                })
                .collect(),
            classes,
        }
    }

    /// ResNet-34-style layout: four groups of 3, 4, 6, 3 blocks.
    pub fn resnet34_style(channels: [usize; 4], classes: usize) -> Self {
        Architecture {
            input: [3, 32, 32],
            stem_channels: channels[0],
            groups: channels
                .iter()
                .zip([3, 4, 6, 3])
                .enumerate()
                .map(|(i, (&c, blocks))| GroupShape {
                    channels: c,
                    blocks,
                    stride: if i == 0 { 1 } else { 2 },
                })
                .collect(),
            classes,
        }
    }

    /// Small two-group net with two downsampling entries: 16x16 -> 8x8 -> 4x4.
    pub fn tiny() -> Self {
        Architecture {
            input: [3, 16, 16],
            stem_channels: 2,
            groups: vec![
                GroupShape {
                    channels: 4,
                    blocks: 1,
                    stride: 2,
                },
                GroupShape {
                    channels: 8,
                    blocks: 2,
                    stride: 2,
                },
            ],
            classes: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [c, mut h, mut w] = self.input;
        if c == 0 || h == 0 || w == 0 || self.stem_channels == 0 || self.classes == 0 {
            return Err(Error::ShapeMismatch("architecture has a zero dimension".into()));
        }
        for (gi, g) in self.groups.iter().enumerate() {
            if g.blocks == 0 || g.channels == 0 {
                return Err(Error::ShapeMismatch(format!("group {gi} is empty")));
            }
            match g.stride {
                1 => {}
                2 if h % 2 == 0 && w % 2 == 0 => {
                    h /= 2;
                    w /= 2;
                }
                2 => {
                    return Err(Error::ShapeMismatch(format!(
                        "group {gi} halves an odd resolution {h}x{w}"
                    )))
                }
                s => return Err(Error::UnsupportedStride(s)),
            }
        }
        Ok(())
    }

    /// Channels feeding the classifier.
    pub fn feature_channels(&self) -> usize {
        self.groups.last().map_or(self.stem_channels, |g| g.channels)
    }

    /// Layer names in execution order.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names = vec!["stem".to_string()];
        let mut c_in = self.stem_channels;
        for (gi, g) in self.groups.iter().enumerate() {
            for bi in 0..g.blocks {
                let stride = if bi == 0 { g.stride } else { 1 };
                names.push(format!("g{gi}.b{bi}.conv1"));
                names.push(format!("g{gi}.b{bi}.conv2"));
                if stride != 1 || c_in != g.channels {
                    names.push(format!("g{gi}.b{bi}.shortcut"));
                }
                c_in = g.channels;
            }
        }
        names.push("fc".into());
        names
    }
}

/// A residual network with plaintext weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkDef {
    pub arch: Architecture,
    pub stem: ConvSpec,
    pub groups: Vec<BlockGroup>,
    pub head: FcSpec,
    pub activation: ActivationConfig,
    pub bootstrap: BootstrapPolicy,
}

impl NetworkDef {
    /// Build every layer through `make(name, in, out, kernel, stride)`.
    pub fn build_with(
        arch: &Architecture,
        mut make: impl FnMut(&str, usize, usize, usize, usize) -> ConvSpec,
        head: FcSpec,
    ) -> Result<Self> {
        arch.validate()?;
        let stem = make("stem", arch.input[0], arch.stem_channels, 3, 1);
        let mut c_in = arch.stem_channels;
        let mut groups = Vec::with_capacity(arch.groups.len());
        for (gi, g) in arch.groups.iter().enumerate() {
            let mut blocks = Vec::with_capacity(g.blocks);
            for bi in 0..g.blocks {
                let stride = if bi == 0 { g.stride } else { 1 };
                let conv1 = make(&format!("g{gi}.b{bi}.conv1"), c_in, g.channels, 3, stride);
                let conv2 = make(&format!("g{gi}.b{bi}.conv2"), g.channels, g.channels, 3, 1);
                let shortcut = (stride != 1 || c_in != g.channels)
                    .then(|| make(&format!("g{gi}.b{bi}.shortcut"), c_in, g.channels, 1, stride));
                blocks.push(ResidualBlock { conv1, conv2, shortcut });
                c_in = g.channels;
            }
            groups.push(BlockGroup { blocks });
        }
        let net = NetworkDef {
            arch: arch.clone(),
            stem,
            groups,
            head,
            activation: ActivationConfig::exact(),
            bootstrap: BootstrapPolicy::Auto,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn zeros(arch: &Architecture) -> Result<Self> {
        let d_in = arch.feature_channels();
        let head = FcSpec::new(d_in, arch.classes, vec![0.0; d_in * arch.classes], vec![0.0; arch.classes])?;
        NetworkDef::build_with(arch, |_, i, o, k, s| ConvSpec::zeros(i, o, k, s), head)
    }

    /// Random weights with batch norm folded in. Scales keep activations
    /// of unit-range inputs within a few units.
    pub fn random(arch: &Architecture, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let make = |_: &str, i: usize, o: usize, k: usize, s: usize| {
            let std = (1.0 / (i * k * k) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let weights = (0..o * i * k * k).map(|_| normal.sample(&mut rng)).collect();
            let bias = (0..o).map(|_| rng.gen_range(-0.1..0.1)).collect();
            let spec = ConvSpec::new(i, o, k, s, weights, bias).expect("shapes are consistent");
            let bn = BatchNorm::random(o, &mut rng);
            reference::fold_batch_norm(&spec, &bn).expect("random variances are positive")
        };
        let d_in = arch.feature_channels();
        let mut rng2 = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let std = (1.0 / d_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let weights = (0..d_in * arch.classes).map(|_| normal.sample(&mut rng2)).collect();
        let bias = (0..arch.classes).map(|_| rng2.gen_range(-0.1..0.1)).collect();
        let head = FcSpec::new(d_in, arch.classes, weights, bias)?;
        NetworkDef::build_with(arch, make, head)
    }

    pub fn with_activation(mut self, activation: ActivationConfig) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_bootstrap(mut self, policy: BootstrapPolicy) -> Self {
        self.bootstrap = policy;
        self
    }

    /// Every conv layer with its name, in execution order.
    pub fn conv_layers(&self) -> Vec<(String, &ConvSpec)> {
        let mut out = vec![("stem".to_string(), &self.stem)];
        for (gi, g) in self.groups.iter().enumerate() {
            for (bi, b) in g.blocks.iter().enumerate() {
                out.push((format!("g{gi}.b{bi}.conv1"), &b.conv1));
                out.push((format!("g{gi}.b{bi}.conv2"), &b.conv2));
                if let Some(sc) = &b.shortcut {
                    out.push((format!("g{gi}.b{bi}.shortcut"), sc));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let mismatch = |what: String| Err(Error::ShapeMismatch(what));
        if self.stem.in_channels != self.arch.input[0] || self.stem.kernel != 3 || self.stem.stride != 1 {
            return mismatch("stem must be a stride-1 3x3 conv over the input channels".into());
        }
        let mut c = self.stem.out_channels;
        for (gi, g) in self.groups.iter().enumerate() {
            for (bi, b) in g.blocks.iter().enumerate() {
                let name = format!("g{gi}.b{bi}");
                for spec in [&b.conv1, &b.conv2] {
                    spec.validate()?;
                    if spec.kernel != 3 {
                        return Err(Error::UnsupportedKernel(spec.kernel));
                    }
                }
                if b.conv1.in_channels != c || b.conv2.in_channels != b.conv1.out_channels {
                    return mismatch(format!("{name} channel counts do not chain"));
                }
                if bi > 0 && b.stride() != 1 {
                    return mismatch(format!("{name} downsamples outside a group entry"));
                }
                if b.conv2.stride != 1 {
                    return Err(Error::UnsupportedStride(b.conv2.stride));
                }
                match &b.shortcut {
                    Some(sc) => {
                        sc.validate()?;
                        if sc.kernel != 1 || sc.stride != b.stride() || sc.in_channels != c || sc.out_channels != b.out_channels() {
                            return mismatch(format!("{name}.shortcut does not match its block"));
                        }
                    }
                    None if b.stride() != 1 || c != b.out_channels() => {
                        return mismatch(format!("{name} changes shape without a shortcut"));
                    }
                    None => {}
                }
                c = b.out_channels();
            }
        }
        self.head.validate()?;
        if self.head.d_in != c {
            return mismatch(format!("head expects {} features, network yields {c}", self.head.d_in));
        }
        self.activation.validate()
    }
}
