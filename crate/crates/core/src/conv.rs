//! Batched homomorphic convolution over channel-by-channel packed inputs.
//!
//! A 3x3 layer aligns each input channel once with eight rotations drawn
//! from the four keys `{-1, +1, -W, +W}`, then every output channel is a
//! sum of plaintext products of the aligned ciphertexts. Channel
//! accumulation is pure addition. Zero padding lives in the encoded taps.
//! Stride 2 is a stride-1 evaluation followed by slot compaction.

use std::collections::BTreeSet;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{CipherVec, Engine, PlainVec};
use crate::error::{Error, Result};
use crate::packing::{occupied_constant, tap_validity_mask, PackingLayout, TapOffset};
use crate::routing::ShiftNetwork;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `[out][in][k][k]`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let spec = ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            weights,
            bias,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            weights: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel != 1 && self.kernel != 3 {
            return Err(Error::UnsupportedKernel(self.kernel));
        }
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::UnsupportedStride(self.stride));
        }
        let expected = self.out_channels * self.in_channels * self.kernel * self.kernel;
        if self.weights.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "conv weights have {} values, expected {expected}",
                self.weights.len()
            )));
        }
        if self.bias.len() != self.out_channels {
            return Err(Error::ShapeMismatch(format!(
                "conv bias has {} values, expected {}",
                self.bias.len(),
                self.out_channels
            )));
        }
        Ok(())
    }

    pub fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    pub fn weight(&self, out: usize, inp: usize, tap: usize) -> f64 {
        self.weights[(out * self.in_channels + inp) * self.taps() + tap]
    }
}

/// Rotation offsets a stride-1 layer needs at this width.
pub fn conv_keys(width: usize, kernel: usize) -> Result<BTreeSet<i64>> {
    match kernel {
        1 => Ok(BTreeSet::new()),
        3 => {
            let w = width as i64;
            Ok([-1, 1, -w, w].into_iter().collect())
        }
        k => Err(Error::UnsupportedKernel(k)),
    }
}

/// The `k*k` shifted copies of one input channel, in `TapOffset::all` order.
#[derive(Debug)]
pub struct AlignedSet {
    kernel: usize,
    cts: Vec<CipherVec>,
}

impl AlignedSet {
    pub fn get(&self, tap: TapOffset) -> &CipherVec {
        &self.cts[tap.kernel_index(self.kernel)]
    }

    pub fn by_index(&self, idx: usize) -> &CipherVec {
        &self.cts[idx]
    }

    pub fn len(&self) -> usize {
        self.cts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cts.is_empty()
    }
}

/// Eight rotations: two unit rotations, then `+-W` on each of the three bases.
pub fn align_inputs(engine: &Engine, ct: &CipherVec, layout: &PackingLayout) -> Result<AlignedSet> {
    let w = layout.width as i64;
    let bases = [engine.rotate(ct, -1)?, ct.clone(), engine.rotate(ct, 1)?];
    let mut up = Vec::with_capacity(3);
    let mut down = Vec::with_capacity(3);
    for b in &bases {
        up.push(engine.rotate(b, -w)?);
        down.push(engine.rotate(b, w)?);
    }
    let mut cts = Vec::with_capacity(9);
    cts.extend(up);
    cts.extend(bases);
    cts.extend(down);
    Ok(AlignedSet { kernel: 3, cts })
}

fn align_for(engine: &Engine, ct: &CipherVec, kernel: usize, layout: &PackingLayout) -> Result<AlignedSet> {
    if kernel == 1 {
        Ok(AlignedSet {
            kernel: 1,
            cts: vec![ct.clone()],
        })
    } else {
        align_inputs(engine, ct, layout)
    }
}

/// A conv layer's tap masks bound to one packing layout.
#[derive(Debug)]
pub struct ConvKernel<'a> {
    pub spec: &'a ConvSpec,
    pub layout: PackingLayout,
    masks: Vec<PlainVec>,
}

impl<'a> ConvKernel<'a> {
    pub fn new(spec: &'a ConvSpec, layout: PackingLayout) -> Result<Self> {
        spec.validate()?;
        let masks = if spec.kernel == 1 {
            vec![occupied_constant(&layout, 1.0)]
        } else {
            TapOffset::all(3)
                .into_iter()
                .map(|t| tap_validity_mask(t, &layout))
                .collect()
        };
        Ok(ConvKernel { spec, layout, masks })
    }

    pub fn align(&self, engine: &Engine, ct: &CipherVec) -> Result<AlignedSet> {
        align_for(engine, ct, self.spec.kernel, &self.layout)
    }

    /// Add input channel `inp`'s contribution to each output channel in
    /// `outs`, where `outs[k]` holds output channel `range.start + k`.
    pub fn accumulate(
        &self,
        engine: &Engine,
        inp: usize,
        aligned: &AlignedSet,
        outs: &mut [Option<CipherVec>],
        range: Range<usize>,
    ) -> Result<()> {
        debug_assert_eq!(outs.len(), range.len());
        outs.par_iter_mut()
            .zip(range.into_par_iter())
            .try_for_each(|(slot, o)| -> Result<()> {
                for tap in 0..self.spec.taps() {
                    let w = self.spec.weight(o, inp, tap);
                    let prod = engine.mult_plain(aligned.by_index(tap), &self.masks[tap].scaled(w))?;
                    *slot = Some(match slot.take() {
                        None => prod,
                        Some(acc) => engine.add(&acc, &prod)?,
                    });
                }
                Ok(())
            })
    }

    /// Bias over every occupied slot of the layout.
    pub fn bias_plain(&self, o: usize) -> PlainVec {
        occupied_constant(&self.layout, self.spec.bias[o])
    }

    pub fn add_bias(&self, engine: &Engine, o: usize, ct: &CipherVec) -> Result<CipherVec> {
        engine.add_plain(ct, &self.bias_plain(o))
    }
}

/// Shift network gathering even `(y, x)` positions of every segment into a
/// densely packed half-resolution layout with the same batch.
pub fn compaction_network(layout: &PackingLayout) -> Result<ShiftNetwork> {
    let out = layout.downsampled(2)?;
    let mut moves = Vec::with_capacity(out.occupied());
    for j in 0..layout.batch {
        for y in 0..out.height {
            for x in 0..out.width {
                moves.push((layout.slot(j, 2 * y, 2 * x), out.slot(j, y, x)));
            }
        }
    }
    ShiftNetwork::build(layout.n, &moves)
}

pub fn compaction_offsets(layout: &PackingLayout) -> Result<BTreeSet<i64>> {
    Ok(compaction_network(layout)?.offsets())
}

/// Keep stride-2 samples and pack them contiguously: image `j`'s
/// `(H/2) x (W/2)` plane lands at `[j*m/4, (j+1)*m/4)`.
pub fn compact_strided(engine: &Engine, ct: &CipherVec, layout: &PackingLayout, r: usize) -> Result<CipherVec> {
    if r != 2 {
        return Err(Error::UnsupportedStride(r));
    }
    compaction_network(layout)?.apply(engine, ct)
}

/// Full layer. Returns the output channels and their layout (compacted
/// when the stride is 2).
pub fn conv_forward_with_layout(
    engine: &Engine,
    inputs: &[CipherVec],
    spec: &ConvSpec,
    layout: &PackingLayout,
) -> Result<(Vec<CipherVec>, PackingLayout)> {
    if inputs.len() != spec.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "conv expects {} input channels, got {}",
            spec.in_channels,
            inputs.len()
        )));
    }
    let kernel = ConvKernel::new(spec, *layout)?;
    let q = spec.out_channels;
    let mut outs: Vec<Option<CipherVec>> = (0..q).map(|_| None).collect();
    for (i, ct) in inputs.iter().enumerate() {
        let aligned = kernel.align(engine, ct)?;
        kernel.accumulate(engine, i, &aligned, &mut outs, 0..q)?;
    }
    let mut results = Vec::with_capacity(q);
    for (o, acc) in outs.into_iter().enumerate() {
        let acc = match acc {
            Some(a) => a,
            None => engine.encrypt(&[])?,
        };
        results.push(kernel.add_bias(engine, o, &acc)?);
    }
    if spec.stride == 2 {
        let net = compaction_network(layout)?;
        let compacted = results
            .iter()
            .map(|ct| net.apply(engine, ct))
            .collect::<Result<Vec<_>>>()?;
        Ok((compacted, layout.downsampled(2)?))
    } else {
        Ok((results, *layout))
    }
}

pub fn conv_forward(
    engine: &Engine,
    inputs: &[CipherVec],
    spec: &ConvSpec,
    layout: &PackingLayout,
) -> Result<Vec<CipherVec>> {
    conv_forward_with_layout(engine, inputs, spec, layout).map(|(cts, _)| cts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::EngineParams;
    use crate::packing::pack_inputs;
    use crate::tensor::Image;

    fn setup(n: usize, layout: &PackingLayout) -> Engine {
        let mut e = Engine::new(EngineParams::new(n)).unwrap();
        e.register_rotation_keys(conv_keys(layout.width, 3).unwrap());
        e
    }

    #[test]
    fn four_keys() {
        assert_eq!(
            conv_keys(32, 3).unwrap().into_iter().collect::<Vec<_>>(),
            vec![-32, -1, 1, 32]
        );
        assert_eq!(conv_keys(4, 3).unwrap().len(), 4);
        assert!(conv_keys(4, 1).unwrap().is_empty());
        assert!(matches!(conv_keys(4, 5), Err(Error::UnsupportedKernel(5))));
    }

    #[test]
    fn alignment_uses_eight_rotations() {
        let layout = PackingLayout::new(64, 4, 4, 2).unwrap();
        let e = setup(64, &layout);
        let ct = e.encrypt(&(0..32).map(f64::from).collect::<Vec<_>>()).unwrap();
        let before = e.snapshot_counters().rotations;
        let set = align_inputs(&e, &ct, &layout).unwrap();
        assert_eq!(e.snapshot_counters().rotations - before, 8);
        assert_eq!(e.decrypt(set.get(TapOffset::new(0, 0))), e.decrypt(&ct));
        let up = e.rotate(&ct, -4).unwrap();
        assert_eq!(e.decrypt(set.get(TapOffset::new(-1, 0))), e.decrypt(&up));
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let layout = PackingLayout::new(64, 4, 4, 2).unwrap();
        let e = setup(64, &layout);
        let mut spec = ConvSpec::zeros(1, 1, 3, 1);
        spec.weights[4] = 1.0;
        let ims: Vec<Image> = (0..2)
            .map(|j| Image::new(1, 4, 4, (0..16).map(|v| (v + 16 * j) as f64).collect()).unwrap())
            .collect();
        let cts = pack_inputs(&e, &ims, &layout).unwrap();
        let out = conv_forward(&e, &cts, &spec, &layout).unwrap();
        assert_eq!(e.decrypt(&out[0]), e.decrypt(&cts[0]));
    }

    #[test]
    fn compaction_picks_even_positions() {
        let layout = PackingLayout::new(16, 4, 4, 1).unwrap();
        let net = compaction_network(&layout).unwrap();
        let mut e = Engine::new(EngineParams::new(16)).unwrap();
        e.register_rotation_keys(net.offsets());
        let vals: Vec<f64> = (0..16).map(|v| 10.0 * (v / 4) as f64 + (v % 4) as f64).collect();
        let ct = e.encrypt(&vals).unwrap();
        let out = e.decrypt(&compact_strided(&e, &ct, &layout, 2).unwrap());
        assert_eq!(&out[..4], &[0.0, 2.0, 20.0, 22.0]);
        assert!(out[4..].iter().all(|&v| v == 0.0));
        let zero = e.encrypt(&[]).unwrap();
        assert!(e.decrypt(&compact_strided(&e, &zero, &layout, 2).unwrap()).iter().all(|&v| v == 0.0));
        assert!(matches!(
            compact_strided(&e, &ct, &layout, 3),
            Err(Error::UnsupportedStride(3))
        ));
    }

    #[test]
    fn plain_mult_count_matches_layer_shape() {
        let layout = PackingLayout::new(256, 4, 4, 4).unwrap();
        let e = setup(256, &layout);
        let spec = ConvSpec::zeros(3, 16, 3, 1);
        let cts: Vec<CipherVec> = (0..3).map(|_| e.encrypt(&[1.0; 64]).unwrap()).collect();
        let before = e.snapshot_counters();
        conv_forward(&e, &cts, &spec, &layout).unwrap();
        let d = e.snapshot_counters().since(&before);
        assert_eq!(d.plain_mults, 9 * 3 * 16);
        assert_eq!(d.rotations, 8 * 3);
    }
}
