//! Batched fully connected layer.
//!
//! Input image `j` sits in block `[j*D, j*D + d_in)` where `D` is `d_in`
//! rounded up to a power of two. Each output row is one plaintext
//! multiplication followed by a rotate-add block sum. The per-row results
//! are merged into one ciphertext and each image's output block is then
//! moved to `[j*d_out, (j+1)*d_out)` with at most two rotations.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{CipherVec, Engine, PlainVec};
use crate::error::{Error, Result};
use crate::packing::{encode_replicated, PackingLayout};
use crate::routing::{binary_offsets, place_blocks, placement_offsets, placement_shift_count, rotate_binary, Block};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcSpec {
    pub d_in: usize,
    pub d_out: usize,
    /// `[d_out][d_in]`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl FcSpec {
    pub fn new(d_in: usize, d_out: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let spec = FcSpec {
            d_in,
            d_out,
            weights,
            bias,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.d_in * self.d_out {
            return Err(Error::ShapeMismatch(format!(
                "fc weights have {} values, expected {}x{}",
                self.weights.len(),
                self.d_out,
                self.d_in
            )));
        }
        if self.bias.len() != self.d_out {
            return Err(Error::ShapeMismatch(format!(
                "fc bias has {} values, expected {}",
                self.bias.len(),
                self.d_out
            )));
        }
        Ok(())
    }

    pub fn row(&self, o: usize) -> &[f64] {
        &self.weights[o * self.d_in..(o + 1) * self.d_in]
    }

    pub fn apply_plain(&self, x: &[f64]) -> Vec<f64> {
        (0..self.d_out)
            .map(|o| self.row(o).iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias[o])
            .collect()
    }
}

/// Slot geometry of the FC stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcLayout {
    pub n: usize,
    pub batch: usize,
    pub d_in: usize,
    pub d_out: usize,
    /// Input block stride (power of two, at least `d_in`).
    pub block: usize,
}

/// Largest batch the head can hold: `b*d_in <= n` and `b*d_out <= n`.
pub fn max_head_batch(n: usize, d_in: usize, d_out: usize) -> usize {
    n / d_in.max(d_out)
}

impl FcLayout {
    pub fn new(n: usize, batch: usize, d_in: usize, d_out: usize) -> Result<Self> {
        let widest = batch * d_in.max(d_out);
        if widest > n {
            return Err(Error::SlotConstraintViolated { used: widest, n });
        }
        let mut block = d_in.next_power_of_two();
        if d_out > block && batch * d_out.next_power_of_two() <= n {
            block = d_out.next_power_of_two();
        }
        if batch * block > n {
            return Err(Error::SlotConstraintViolated {
                used: batch * block,
                n,
            });
        }
        Ok(FcLayout {
            n,
            batch,
            d_in,
            d_out,
            block,
        })
    }

    /// Output rows handled per merged ciphertext.
    pub fn chunks(&self) -> usize {
        self.d_out.div_ceil(self.block)
    }

    /// Granularity of the coarse rotation component.
    pub fn base_step(&self) -> usize {
        let unit = self.block.abs_diff(self.d_out).max(1);
        unit * (self.batch as f64).sqrt().ceil() as usize
    }

    fn batch_mask(&self, stride: usize) -> PlainVec {
        let mut s = vec![0.0; self.n];
        for j in 0..self.batch {
            s[j * stride] = 1.0;
        }
        PlainVec::new(s)
    }

    fn placement_blocks(&self, chunk: usize) -> Vec<Block> {
        let d = self.block;
        let len = d.min(self.d_out - chunk * d);
        (0..self.batch)
            .map(|j| Block {
                src: j * d,
                len,
                dst: j * self.d_out + chunk * d,
            })
            .collect()
    }

    /// Rotations used by output reconstruction (block placement) only.
    pub fn reconstruction_rotation_bound(&self) -> usize {
        (0..self.chunks())
            .map(|c| 2 * placement_shift_count(&self.placement_blocks(c)))
            .sum()
    }
}

/// Rotate-add tree: slot `s` receives `sum_{u < block} x[s + u]`.
pub fn block_sum(engine: &Engine, ct: &CipherVec, block: usize) -> Result<CipherVec> {
    if !block.is_power_of_two() {
        return Err(Error::NonPowerOfTwoBlock(block));
    }
    let mut acc = ct.clone();
    let mut step = 1;
    while step < block {
        let rot = engine.rotate(&acc, step as i64)?;
        acc = engine.add(&acc, &rot)?;
        step *= 2;
    }
    Ok(acc)
}

pub fn block_sum_offsets(block: usize) -> BTreeSet<i64> {
    std::iter::successors(Some(1usize), |s| Some(s * 2))
        .take_while(|&s| s < block)
        .map(|s| s as i64)
        .collect()
}

/// Every rotation offset `fc_forward` uses for this layout.
pub fn fc_offsets(layout: &FcLayout) -> BTreeSet<i64> {
    let mut keys = block_sum_offsets(layout.block);
    for o in 0..layout.d_out {
        keys.extend(binary_offsets(-((o % layout.block) as i64)));
    }
    for c in 0..layout.chunks() {
        keys.extend(placement_offsets(&layout.placement_blocks(c), layout.base_step()));
    }
    keys
}

/// `y_j = W x_j + bias` for every image; output image `j` at `[j*d_out, (j+1)*d_out)`.
/// Consumes three levels.
pub fn fc_forward(engine: &Engine, ct_in: &CipherVec, spec: &FcSpec, layout: &FcLayout) -> Result<CipherVec> {
    spec.validate()?;
    if spec.d_in != layout.d_in || spec.d_out != layout.d_out {
        return Err(Error::ShapeMismatch(format!(
            "fc spec {}x{} does not match layout {}x{}",
            spec.d_out, spec.d_in, layout.d_out, layout.d_in
        )));
    }
    let n = engine.slots();
    let d = layout.block;
    let first_slots = layout.batch_mask(d);
    let row_result = |o: usize| -> Result<(usize, CipherVec)> {
        let w = encode_replicated(spec.row(o), d, layout.batch, n)?;
        let prod = engine.mult_plain(ct_in, &w)?;
        let summed = block_sum(engine, &prod, d)?;
        drop(prod);
        let picked = engine.mult_plain(&summed, &first_slots)?;
        drop(summed);
        Ok((o / d, rotate_binary(engine, &picked, -((o % d) as i64))?))
    };

    let mut merged: Vec<Option<CipherVec>> = (0..layout.chunks()).map(|_| None).collect();
    let width = rayon::current_num_threads().max(1);
    let rows: Vec<usize> = (0..spec.d_out).collect();
    for group in rows.chunks(width) {
        let results = group.par_iter().map(|&o| row_result(o)).collect::<Result<Vec<_>>>()?;
        for (c, ct) in results {
            merged[c] = Some(match merged[c].take() {
                None => ct,
                Some(acc) => engine.add(&acc, &ct)?,
            });
        }
    }

    let mut out: Option<CipherVec> = None;
    for (c, m) in merged.into_iter().enumerate() {
        let m = m.expect("every chunk holds at least one row");
        let placed = place_blocks(engine, &m, &layout.placement_blocks(c), layout.base_step())?;
        drop(m);
        out = Some(match out {
            None => placed,
            Some(acc) => engine.add(&acc, &placed)?,
        });
    }
    let bias = encode_replicated(&spec.bias, spec.d_out, layout.batch, n)?;
    engine.add_plain(&out.expect("d_out > 0"), &bias)
}

fn gather_chunk(pool: &PackingLayout, fc: &FcLayout) -> usize {
    pool.m().min(fc.block)
}

fn gather_blocks(pool: &PackingLayout, fc: &FcLayout, channels: usize, chunk: usize) -> Vec<Block> {
    let s = gather_chunk(pool, fc);
    let len = s.min(channels - chunk * s);
    (0..fc.batch)
        .map(|j| Block {
            src: j * pool.m(),
            len,
            dst: j * fc.block + chunk * s,
        })
        .collect()
}

fn gather_base_step(pool: &PackingLayout, fc: &FcLayout) -> usize {
    pool.m().abs_diff(fc.block).max(1) * (fc.batch as f64).sqrt().ceil() as usize
}

pub fn gather_offsets(pool: &PackingLayout, fc: &FcLayout, channels: usize) -> BTreeSet<i64> {
    let s = gather_chunk(pool, fc);
    let mut keys = BTreeSet::new();
    for i in 0..channels {
        keys.extend(binary_offsets(-((i % s) as i64)));
    }
    for c in 0..channels.div_ceil(s) {
        keys.extend(placement_offsets(&gather_blocks(pool, fc, channels, c), gather_base_step(pool, fc)));
    }
    keys
}

/// Move per-channel pooled scalars (slot `j*m` of channel `i`) into the FC
/// input layout (slot `j*D + i`). Consumes two levels.
pub fn fc_input_gather(
    engine: &Engine,
    pooled: &[CipherVec],
    pool: &PackingLayout,
    fc: &FcLayout,
) -> Result<CipherVec> {
    let p = pooled.len();
    if p != fc.d_in || pool.batch != fc.batch {
        return Err(Error::ShapeMismatch(format!(
            "gather of {p} channels x {} images into fc input {}x{}",
            pool.batch, fc.d_in, fc.batch
        )));
    }
    if fc.batch * fc.d_in > engine.slots() {
        return Err(Error::SlotConstraintViolated {
            used: fc.batch * fc.d_in,
            n: engine.slots(),
        });
    }
    let s = gather_chunk(pool, fc);
    let mut mask = vec![0.0; engine.slots()];
    for j in 0..pool.batch {
        mask[j * pool.m()] = 1.0;
    }
    let mask = PlainVec::new(mask);
    let mut merged: Vec<Option<CipherVec>> = (0..p.div_ceil(s)).map(|_| None).collect();
    for (i, ct) in pooled.iter().enumerate() {
        let picked = engine.mult_plain(ct, &mask)?;
        let shifted = rotate_binary(engine, &picked, -((i % s) as i64))?;
        drop(picked);
        let c = i / s;
        merged[c] = Some(match merged[c].take() {
            None => shifted,
            Some(acc) => engine.add(&acc, &shifted)?,
        });
    }
    let mut out: Option<CipherVec> = None;
    for (c, m) in merged.into_iter().enumerate() {
        let m = m.expect("chunk non-empty");
        let placed = place_blocks(engine, &m, &gather_blocks(pool, fc, p, c), gather_base_step(pool, fc))?;
        drop(m);
        out = Some(match out {
            None => placed,
            Some(acc) => engine.add(&acc, &placed)?,
        });
    }
    Ok(out.expect("at least one channel"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::EngineParams;

    fn engine_with(n: usize, keys: BTreeSet<i64>) -> Engine {
        let mut e = Engine::new(EngineParams::new(n)).unwrap();
        e.register_rotation_keys(keys);
        e
    }

    #[test]
    fn block_sums() {
        let e = engine_with(8, block_sum_offsets(4));
        let ct = e.encrypt(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let before = e.snapshot_counters().rotations;
        let out = e.decrypt(&block_sum(&e, &ct, 4).unwrap());
        assert_eq!(out[0], 10.0);
        assert_eq!(out[4], 26.0);
        assert_eq!(e.snapshot_counters().rotations - before, 2);
        let same = block_sum(&e, &ct, 1).unwrap();
        assert_eq!(e.decrypt(&same), e.decrypt(&ct));
        assert_eq!(e.snapshot_counters().rotations - before, 2);
        assert!(matches!(block_sum(&e, &ct, 3), Err(Error::NonPowerOfTwoBlock(3))));
    }

    #[test]
    fn identity_fc_copies_segments() {
        let layout = FcLayout::new(16, 2, 4, 4).unwrap();
        let e = engine_with(16, fc_offsets(&layout));
        let mut w = vec![0.0; 16];
        for i in 0..4 {
            w[i * 4 + i] = 1.0;
        }
        let spec = FcSpec::new(4, 4, w, vec![0.0; 4]).unwrap();
        let x = [1.0, -2.0, 3.0, 0.5, 4.0, 5.0, -6.0, 7.0];
        let ct = e.encrypt(&x).unwrap();
        let out = e.decrypt(&fc_forward(&e, &ct, &spec, &layout).unwrap());
        assert_eq!(&out[..8], &x);
        assert!(out[8..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_geometry() {
        assert_eq!(max_head_batch(16384, 64, 100), 163);
        assert!(FcLayout::new(16384, 163, 64, 100).is_ok());
        assert!(FcLayout::new(16384, 164, 64, 100).is_err());
        assert!(FcLayout::new(32768, 256, 64, 10).is_ok());
    }

    #[test]
    fn wide_head_uses_chunks_when_it_cannot_widen() {
        let layout = FcLayout::new(16384, 163, 64, 100).unwrap();
        assert_eq!(layout.block, 64);
        assert_eq!(layout.chunks(), 2);
        let widened = FcLayout::new(256, 8, 3, 16).unwrap();
        assert_eq!(widened.block, 16);
        assert_eq!(widened.chunks(), 1);
    }

    #[test]
    fn gather_two_channels() {
        let pool = PackingLayout::new(16, 2, 2, 2).unwrap();
        let fc = FcLayout::new(16, 2, 2, 2).unwrap();
        let e = engine_with(16, gather_offsets(&pool, &fc, 2));
        let c0 = e.encrypt(&[1.0, 9.0, 9.0, 9.0, 2.0, 9.0, 9.0, 9.0]).unwrap();
        let c1 = e.encrypt(&[3.0, 9.0, 9.0, 9.0, 4.0, 9.0, 9.0, 9.0]).unwrap();
        let out = e.decrypt(&fc_input_gather(&e, &[c0, c1], &pool, &fc).unwrap());
        assert_eq!(&out[..4], &[1.0, 3.0, 2.0, 4.0]);
        assert!(out[4..].iter().all(|&v| v == 0.0));
    }
}
