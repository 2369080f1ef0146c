//! Plaintext forward pass used as the correctness oracle.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::fc::FcSpec;
use crate::tensor::Image;

use super::{NetworkDef, ResidualBlock};

pub const DEFAULT_BN_EPS: f64 = 1e-5;

/// Per-channel batch-norm parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0 - DEFAULT_BN_EPS; channels],
            eps: DEFAULT_BN_EPS,
        }
    }

    pub fn random(channels: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 0.1).expect("positive std");
        BatchNorm {
            gamma: (0..channels).map(|_| rng.gen_range(0.5..1.5)).collect(),
            beta: (0..channels).map(|_| normal.sample(rng)).collect(),
            mean: (0..channels).map(|_| normal.sample(rng)).collect(),
            var: (0..channels).map(|_| rng.gen_range(0.5..2.0)).collect(),
            eps: DEFAULT_BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn scale(&self, o: usize) -> Result<f64> {
        let v = self.var[o] + self.eps;
        if v.is_nan() || v <= 0.0 {
            return Err(Error::NonPositiveVariance(o));
        }
        Ok(self.gamma[o] / v.sqrt())
    }

    /// Apply the normalization to an activation tensor.
    pub fn apply(&self, x: &Image) -> Result<Image> {
        let mut out = x.clone();
        for o in 0..x.channels {
            let s = self.scale(o)?;
            for v in out.channel_mut(o) {
                *v = s * (*v - self.mean[o]) + self.beta[o];
            }
        }
        Ok(out)
    }
}

/// Fold batch norm into the preceding conv:
/// `W'[o] = s_o W[o]`, `b'_o = s_o (b_o - mean_o) + beta_o`, `s_o = gamma_o / sqrt(var_o + eps)`.
pub fn fold_batch_norm(spec: &ConvSpec, bn: &BatchNorm) -> Result<ConvSpec> {
    let q = spec.out_channels;
    if [&bn.gamma, &bn.beta, &bn.mean, &bn.var].iter().any(|v| v.len() != q) {
        return Err(Error::ShapeMismatch(format!(
            "batch norm has {} channels, conv has {q}",
            bn.channels()
        )));
    }
    let per_out = spec.in_channels * spec.kernel * spec.kernel;
    let mut weights = spec.weights.clone();
    let mut bias = spec.bias.clone();
    for o in 0..q {
        let s = bn.scale(o)?;
        weights[o * per_out..(o + 1) * per_out].iter_mut().for_each(|w| *w *= s);
        bias[o] = s * (spec.bias[o] - bn.mean[o]) + bn.beta[o];
    }
    ConvSpec::new(spec.in_channels, q, spec.kernel, spec.stride, weights, bias)
}

/// Zero-padded ("same") convolution with stride.
pub fn conv2d(x: &Image, spec: &ConvSpec) -> Image {
    let k = spec.kernel as i64;
    let r = k / 2;
    let (h, w) = (x.height as i64, x.width as i64);
    let s = spec.stride as i64;
    let (ho, wo) = ((h + s - 1) / s, (w + s - 1) / s);
    let mut out = Image::zeros(spec.out_channels, ho as usize, wo as usize);
    for o in 0..spec.out_channels {
        for yo in 0..ho {
            for xo in 0..wo {
                let mut acc = spec.bias[o];
                for i in 0..spec.in_channels {
                    for ky in 0..k {
                        for kx in 0..k {
                            let (y, xx) = (yo * s + ky - r, xo * s + kx - r);
                            if y < 0 || y >= h || xx < 0 || xx >= w {
                                continue;
                            }
                            let wt = spec.weights[((o * spec.in_channels + i) * spec.kernel + ky as usize) * spec.kernel + kx as usize];
                            acc += wt * x.at(i, y as usize, xx as usize);
                        }
                    }
                }
                out.data[(o * ho as usize + yo as usize) * wo as usize + xo as usize] = acc;
            }
        }
    }
    out
}

fn map(x: &Image, f: &impl Fn(f64) -> f64) -> Image {
    Image {
        data: x.data.iter().map(|&v| f(v)).collect(),
        ..x.clone()
    }
}

fn add(a: &Image, b: &Image) -> Image {
    Image {
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
        ..a.clone()
    }
}

/// Forward pass with a caller-chosen activation. `observe` sees every
/// activation input tensor.
pub fn forward_with(
    net: &NetworkDef,
    image: &Image,
    act: impl Fn(f64) -> f64,
    mut observe: impl FnMut(&Image),
) -> Vec<f64> {
    let mut relu = |x: Image| {
        observe(&x);
        map(&x, &act)
    };
    let mut x = relu(conv2d(image, &net.stem));
    for g in &net.groups {
        for ResidualBlock { conv1, conv2, shortcut } in &g.blocks {
            let h = relu(conv2d(&x, conv1));
            let y = conv2d(&h, conv2);
            let sc = match shortcut {
                Some(s) => conv2d(&x, s),
                None => x.clone(),
            };
            x = relu(add(&y, &sc));
        }
    }
    let pooled: Vec<f64> = (0..x.channels)
        .map(|c| x.channel(c).iter().sum::<f64>() / x.plane_len() as f64)
        .collect();
    fc_plain(&net.head, &pooled)
}

pub fn fc_plain(head: &FcSpec, x: &[f64]) -> Vec<f64> {
    head.apply_plain(x)
}

/// Scores with exact ReLU.
pub fn forward_plain(net: &NetworkDef, image: &Image) -> Vec<f64> {
    forward_with(net, image, |v| v.max(0.0), |_| {})
}

/// Largest activation input magnitude seen over a set of images.
pub fn max_activation_input(net: &NetworkDef, images: &[Image]) -> f64 {
    let mut m = 0.0f64;
    for img in images {
        forward_with(net, img, |v| v.max(0.0), |x| {
            m = x.data.iter().fold(m, |a, v| a.max(v.abs()));
        });
    }
    m
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_norm_keeps_weights() {
        let spec = ConvSpec::new(1, 1, 3, 1, (1..=9).map(f64::from).collect(), vec![0.5]).unwrap();
        let folded = fold_batch_norm(&spec, &BatchNorm::identity(1)).unwrap();
        for (a, b) in spec.weights.iter().zip(&folded.weights) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((folded.bias[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fold_worked_example() {
        let spec = ConvSpec::new(1, 1, 1, 1, vec![2.0], vec![0.0]).unwrap();
        let bn = BatchNorm {
            gamma: vec![2.0],
            beta: vec![1.0],
            mean: vec![3.0],
            var: vec![4.0 - DEFAULT_BN_EPS],
            eps: DEFAULT_BN_EPS,
        };
        let f = fold_batch_norm(&spec, &bn).unwrap();
        assert!((f.weights[0] - 2.0).abs() < 1e-12);
        assert!((f.bias[0] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn negative_variance_rejected() {
        let spec = ConvSpec::zeros(1, 1, 1, 1);
        let mut bn = BatchNorm::identity(1);
        bn.var[0] = -1.0;
        assert!(matches!(fold_batch_norm(&spec, &bn), Err(Error::NonPositiveVariance(0))));
    }

    #[test]
    fn strided_conv_samples_even_positions() {
        let x = Image::new(1, 4, 4, (0..16).map(f64::from).collect()).unwrap();
        let spec = ConvSpec::new(1, 1, 1, 2, vec![1.0], vec![0.0]).unwrap();
        assert_eq!(conv2d(&x, &spec).data, vec![0.0, 2.0, 8.0, 10.0]);
    }
}
