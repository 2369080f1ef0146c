//! Channel-by-channel batch packing.
//!
//! One ciphertext per channel. Image `j` of the batch occupies the
//! contiguous segment `[j*m, (j+1)*m)` with its `H x W` plane flattened
//! row-major. Slots past `b*m` stay zero.

use serde::{Deserialize, Serialize};

use crate::engine::{CipherVec, Engine, PlainVec};
use crate::error::{Error, Result};
use crate::tensor::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PackingLayout {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    /// Segments (images) per ciphertext.
    pub batch: usize,
}

impl PackingLayout {
    pub fn new(n: usize, height: usize, width: usize, batch: usize) -> Result<Self> {
        let layout = PackingLayout {
            n,
            height,
            width,
            batch,
        };
        if layout.occupied() > n {
            return Err(Error::SlotConstraintViolated {
                used: layout.occupied(),
                n,
            });
        }
        Ok(layout)
    }

    /// Largest batch that fits `n` slots at this resolution.
    pub fn max_batch(n: usize, height: usize, width: usize) -> usize {
        n / (height * width)
    }

    /// Slots per image channel.
    pub fn m(&self) -> usize {
        self.height * self.width
    }

    pub fn occupied(&self) -> usize {
        self.m() * self.batch
    }

    pub fn slot(&self, image: usize, y: usize, x: usize) -> usize {
        image * self.m() + y * self.width + x
    }

    pub fn with_batch(&self, batch: usize) -> Result<Self> {
        PackingLayout::new(self.n, self.height, self.width, batch)
    }

    /// Layout after stride-`r` downsampling with the same batch.
    pub fn downsampled(&self, r: usize) -> Result<Self> {
        if r == 0 || !self.height.is_multiple_of(r) || !self.width.is_multiple_of(r) {
            return Err(Error::UnsupportedStride(r));
        }
        PackingLayout::new(self.n, self.height / r, self.width / r, self.batch)
    }
}

/// Spatial offset of one kernel tap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TapOffset {
    pub dy: i64,
    pub dx: i64,
}

impl TapOffset {
    pub fn new(dy: i64, dx: i64) -> Self {
        TapOffset { dy, dx }
    }

    /// All taps of an odd `k x k` kernel in row-major order.
    pub fn all(k: usize) -> Vec<TapOffset> {
        let r = (k / 2) as i64;
        (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| TapOffset { dy, dx }))
            .collect()
    }

    /// Index into a row-major `k x k` kernel.
    pub fn kernel_index(&self, k: usize) -> usize {
        let r = (k / 2) as i64;
        ((self.dy + r) as usize) * k + (self.dx + r) as usize
    }

    /// Slot rotation bringing input `(y+dy, x+dx)` to output position `(y, x)`.
    pub fn rotation(&self, width: usize) -> i64 {
        self.dy * width as i64 + self.dx
    }

    fn valid_at(&self, layout: &PackingLayout, y: usize, x: usize) -> bool {
        let sy = y as i64 + self.dy;
        let sx = x as i64 + self.dx;
        sy >= 0 && sy < layout.height as i64 && sx >= 0 && sx < layout.width as i64
    }
}

/// Kernel weight encoded at every slot whose source pixel is in bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedKernelTap {
    pub plain: PlainVec,
}

/// 0/1 validity mask of a tap over all segments: zero-padding semantics.
pub fn tap_validity_mask(tap: TapOffset, layout: &PackingLayout) -> PlainVec {
    let mut slots = vec![0.0; layout.n];
    for j in 0..layout.batch {
        for y in 0..layout.height {
            for x in 0..layout.width {
                if tap.valid_at(layout, y, x) {
                    slots[layout.slot(j, y, x)] = 1.0;
                }
            }
        }
    }
    PlainVec::new(slots)
}

pub fn encode_kernel_tap(w: f64, tap: TapOffset, layout: &PackingLayout) -> EncodedKernelTap {
    EncodedKernelTap {
        plain: tap_validity_mask(tap, layout).scaled(w),
    }
}

/// `vec` repeated `copies` times at offsets `0, stride, 2*stride, ...`.
pub fn encode_replicated(vec: &[f64], stride: usize, copies: usize, n: usize) -> Result<PlainVec> {
    if vec.len() > stride {
        return Err(Error::ShapeMismatch(format!(
            "vector of length {} does not fit stride {stride}",
            vec.len()
        )));
    }
    let used = stride * copies.saturating_sub(1) + vec.len();
    if copies > 0 && used > n {
        return Err(Error::LengthExceedsSlots { len: used, n });
    }
    let mut slots = vec![0.0; n];
    for c in 0..copies {
        slots[c * stride..c * stride + vec.len()].copy_from_slice(vec);
    }
    Ok(PlainVec::new(slots))
}

/// Plaintext 0/1 cleaning mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMask {
    pub plain: PlainVec,
}

pub fn make_segment_mask(ranges: &[(usize, usize)], n: usize) -> Result<SegmentMask> {
    let mut sorted: Vec<(usize, usize)> = ranges.iter().copied().filter(|(s, e)| e > s).collect();
    sorted.sort_unstable();
    for w in sorted.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::OverlappingRanges(w[0].0, w[0].1, w[1].0, w[1].1));
        }
    }
    let mut slots = vec![0.0; n];
    for &(s, e) in &sorted {
        if e > n {
            return Err(Error::LengthExceedsSlots { len: e, n });
        }
        slots[s..e].iter_mut().for_each(|v| *v = 1.0);
    }
    Ok(SegmentMask {
        plain: PlainVec::new(slots),
    })
}

/// Occupied-slot mask `[0, b*m)` scaled by `value`; used for biases.
pub fn occupied_constant(layout: &PackingLayout, value: f64) -> PlainVec {
    let mut slots = vec![0.0; layout.n];
    slots[..layout.occupied()].iter_mut().for_each(|v| *v = value);
    PlainVec::new(slots)
}

/// Slot vector for each channel of a batch, without encryption.
pub fn packed_slots(batch: &[Image], layout: &PackingLayout) -> Result<Vec<Vec<f64>>> {
    if batch.len() != layout.batch {
        return Err(Error::ShapeMismatch(format!(
            "batch of {} images, layout expects {}",
            batch.len(),
            layout.batch
        )));
    }
    let channels = batch.first().map_or(0, |im| im.channels);
    for im in batch {
        if im.shape() != (channels, layout.height, layout.width) {
            return Err(Error::ShapeMismatch(format!(
                "image shape {:?}, layout expects {}x{}x{}",
                im.shape(),
                channels,
                layout.height,
                layout.width
            )));
        }
    }
    let m = layout.m();
    Ok((0..channels)
        .map(|c| {
            let mut slots = vec![0.0; layout.n];
            for (j, im) in batch.iter().enumerate() {
                slots[j * m..(j + 1) * m].copy_from_slice(im.channel(c));
            }
            slots
        })
        .collect())
}

/// Encrypt a batch into one ciphertext per channel.
pub fn pack_inputs(engine: &Engine, batch: &[Image], layout: &PackingLayout) -> Result<Vec<CipherVec>> {
    if layout.n != engine.slots() {
        return Err(Error::ShapeMismatch(format!(
            "layout has {} slots, engine {}",
            layout.n,
            engine.slots()
        )));
    }
    PackingLayout::new(layout.n, layout.height, layout.width, layout.batch)?;
    packed_slots(batch, layout)?
        .iter()
        .map(|s| engine.encrypt(s))
        .collect()
}

/// Split a decrypted channel ciphertext back into per-image planes.
pub fn unpack_outputs(engine: &Engine, ct: &CipherVec, layout: &PackingLayout) -> Vec<Vec<f64>> {
    unpack_slots(&engine.decrypt(ct), layout)
}

pub fn unpack_slots(slots: &[f64], layout: &PackingLayout) -> Vec<Vec<f64>> {
    let m = layout.m();
    (0..layout.batch)
        .map(|j| slots[j * m..(j + 1) * m].to_vec())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::EngineParams;

    #[test]
    fn cifar_geometry_fits_sixteen_images() {
        assert_eq!(PackingLayout::max_batch(16384, 32, 32), 16);
        assert_eq!(PackingLayout::max_batch(32768, 32, 32), 32);
    }

    #[test]
    fn two_images_concatenate() {
        let e = Engine::new(EngineParams::new(8)).unwrap();
        let layout = PackingLayout::new(8, 2, 2, 2).unwrap();
        let a = Image::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Image::new(1, 2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let cts = pack_inputs(&e, &[a, b], &layout).unwrap();
        assert_eq!(cts.len(), 1);
        assert_eq!(e.decrypt(&cts[0]), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn slot_constraint_boundary() {
        assert!(PackingLayout::new(16, 2, 2, 4).is_ok());
        assert!(matches!(
            PackingLayout::new(16, 17, 1, 1),
            Err(Error::SlotConstraintViolated { used: 17, n: 16 })
        ));
    }

    #[test]
    fn pack_rejects_wrong_batch_or_shape() {
        let e = Engine::new(EngineParams::new(16)).unwrap();
        let layout = PackingLayout::new(16, 2, 2, 2).unwrap();
        let im = Image::zeros(1, 2, 2);
        assert!(matches!(
            pack_inputs(&e, std::slice::from_ref(&im), &layout),
            Err(Error::ShapeMismatch(_))
        ));
        let odd = Image::zeros(1, 2, 3);
        assert!(pack_inputs(&e, &[im, odd], &layout).is_err());
    }

    #[test]
    fn zero_ciphertext_unpacks_to_zero_planes() {
        let e = Engine::new(EngineParams::new(16)).unwrap();
        let layout = PackingLayout::new(16, 2, 2, 3).unwrap();
        let ct = e.encrypt(&[]).unwrap();
        let planes = unpack_outputs(&e, &ct, &layout);
        assert_eq!(planes, vec![vec![0.0; 4]; 3]);
    }

    #[test]
    fn center_tap_is_identity_mask() {
        let layout = PackingLayout::new(32, 3, 3, 2).unwrap();
        let enc = encode_kernel_tap(1.0, TapOffset::new(0, 0), &layout);
        let s = enc.plain.slots();
        assert!(s[..18].iter().all(|&v| v == 1.0));
        assert!(s[18..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn right_tap_zeroes_last_column() {
        let layout = PackingLayout::new(16, 4, 4, 1).unwrap();
        let enc = encode_kernel_tap(2.0, TapOffset::new(0, 1), &layout);
        for y in 0..4 {
            for x in 0..4 {
                let v = enc.plain.slots()[layout.slot(0, y, x)];
                assert_eq!(v, if x == 3 { 0.0 } else { 2.0 });
            }
        }
    }

    #[test]
    fn corner_tap_counts_valid_positions() {
        let layout = PackingLayout::new(32, 3, 3, 2).unwrap();
        let enc = encode_kernel_tap(1.5, TapOffset::new(-1, -1), &layout);
        for j in 0..2 {
            let seg = &enc.plain.slots()[j * 9..(j + 1) * 9];
            // Oracle: enumerate (y, x) with y-1 >= 0 and x-1 >= 0.
            let expected = (0..3)
                .flat_map(|y| (0..3).map(move |x| (y, x)))
                .filter(|&(y, x)| y >= 1 && x >= 1)
                .count();
            assert_eq!(seg.iter().filter(|&&v| v != 0.0).count(), expected);
            assert_eq!(expected, 4);
        }
    }

    #[test]
    fn replicated_encodings() {
        let p = encode_replicated(&[1.0, 2.0], 2, 4, 8).unwrap();
        assert_eq!(p.slots(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let c = encode_replicated(&[3.0], 1, 8, 8).unwrap();
        assert_eq!(c.slots(), &[3.0; 8]);
        let row = [0.5, -1.0, 2.0, 4.0];
        let fc = encode_replicated(&row, 4, 3, 16).unwrap();
        for s in 0..16 {
            let expected = if s < 12 { row[s % 4] } else { 0.0 };
            assert_eq!(fc.slots()[s], expected);
        }
        assert!(encode_replicated(&row, 4, 5, 16).is_err());
    }

    #[test]
    fn segment_masks() {
        let m = make_segment_mask(&[(0, 4)], 8).unwrap();
        assert_eq!(m.plain.slots(), &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let z = make_segment_mask(&[], 8).unwrap();
        assert_eq!(z.plain.slots(), &[0.0; 8]);
        let a = make_segment_mask(&[(1, 3), (5, 6)], 8).unwrap();
        let b = make_segment_mask(&[(0, 1), (3, 5), (6, 8)], 8).unwrap();
        let sum: Vec<f64> = a.plain.slots().iter().zip(b.plain.slots()).map(|(x, y)| x + y).collect();
        assert_eq!(sum, vec![1.0; 8]);
        assert!(matches!(
            make_segment_mask(&[(0, 4), (3, 6)], 8),
            Err(Error::OverlappingRanges(0, 4, 3, 6))
        ));
    }
}
