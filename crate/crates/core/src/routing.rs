//! Slot movement built from masks, rotations and additions.
//!
//! Three building blocks shared by the layers:
//! - two-component offset decomposition, so large families of shifts
//!   need only `O(sqrt(b))` distinct rotation keys;
//! - block placement, which masks contiguous slot blocks and moves each to
//!   its destination with a decomposed rotation;
//! - an LSB-first shift network for order-preserving compaction, which
//!   needs only power-of-two keys.

use std::collections::{BTreeMap, BTreeSet};

use crate::engine::{CipherVec, Engine, PlainVec};
use crate::error::{Error, Result};

/// `j * unit = base_idx + mod_idx` with `base_idx` a multiple of `base_step`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RotationDecomposition {
    pub base_idx: usize,
    pub mod_idx: usize,
    pub base_step: usize,
}

impl RotationDecomposition {
    pub fn rotations(&self) -> usize {
        (self.base_idx != 0) as usize + (self.mod_idx != 0) as usize
    }
}

/// Split an offset magnitude into a coarse and a fine component.
pub fn decompose(magnitude: usize, base_step: usize) -> RotationDecomposition {
    let base_step = base_step.max(1);
    RotationDecomposition {
        base_idx: base_step * (magnitude / base_step),
        mod_idx: magnitude % base_step,
        base_step,
    }
}

/// Decomposition of the output alignment offset `j * unit`.
pub fn decompose_offset(j: usize, unit: usize, base_step: usize) -> RotationDecomposition {
    decompose(j * unit, base_step)
}

/// Signed rotations realizing a shift of `t` (positive = toward lower slots).
pub fn decomposed_offsets(t: i64, base_step: usize) -> Vec<i64> {
    let d = decompose(t.unsigned_abs() as usize, base_step);
    let sign = t.signum();
    [d.base_idx, d.mod_idx]
        .into_iter()
        .filter(|&c| c != 0)
        .map(|c| sign * c as i64)
        .collect()
}

pub fn rotate_decomposed(engine: &Engine, ct: &CipherVec, t: i64, base_step: usize) -> Result<CipherVec> {
    let mut out = ct.clone();
    for k in decomposed_offsets(t, base_step) {
        out = engine.rotate(&out, k)?;
    }
    Ok(out)
}

/// Power-of-two rotations realizing a shift of `t`.
pub fn binary_offsets(t: i64) -> Vec<i64> {
    let mag = t.unsigned_abs();
    (0..64)
        .filter(|b| mag >> b & 1 == 1)
        .map(|b| t.signum() * (1i64 << b))
        .collect()
}

pub fn rotate_binary(engine: &Engine, ct: &CipherVec, t: i64) -> Result<CipherVec> {
    let mut out = ct.clone();
    for k in binary_offsets(t) {
        out = engine.rotate(&out, k)?;
    }
    Ok(out)
}

/// A contiguous run of `len` slots moved from `src` to `dst`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub src: usize,
    pub len: usize,
    pub dst: usize,
}

impl Block {
    fn shift(&self) -> i64 {
        self.src as i64 - self.dst as i64
    }
}

fn blocks_by_shift(blocks: &[Block]) -> BTreeMap<i64, Vec<Block>> {
    let mut by_shift: BTreeMap<i64, Vec<Block>> = BTreeMap::new();
    for b in blocks.iter().filter(|b| b.len > 0) {
        by_shift.entry(b.shift()).or_default().push(*b);
    }
    by_shift
}

/// Rotation offsets `place_blocks` will use.
pub fn placement_offsets(blocks: &[Block], base_step: usize) -> BTreeSet<i64> {
    blocks_by_shift(blocks)
        .keys()
        .flat_map(|&t| decomposed_offsets(t, base_step))
        .collect()
}

/// Nonzero shifts `place_blocks` will apply (one decomposed rotation each).
pub fn placement_shift_count(blocks: &[Block]) -> usize {
    blocks_by_shift(blocks).keys().filter(|&&t| t != 0).count()
}

/// Move every block to its destination; everything outside the blocks is
/// discarded. Blocks sharing a shift share one mask and one rotation.
/// Consumes one level.
pub fn place_blocks(engine: &Engine, ct: &CipherVec, blocks: &[Block], base_step: usize) -> Result<CipherVec> {
    let n = engine.slots();
    let mut acc: Option<CipherVec> = None;
    for (shift, group) in blocks_by_shift(blocks) {
        let mut mask = vec![0.0; n];
        for b in &group {
            if b.src + b.len > n || b.dst + b.len > n {
                return Err(Error::OccupancyOverflow {
                    used: (b.src.max(b.dst)) + b.len,
                    n,
                });
            }
            mask[b.src..b.src + b.len].iter_mut().for_each(|v| *v = 1.0);
        }
        let masked = engine.mult_plain(ct, &PlainVec::new(mask))?;
        let moved = rotate_decomposed(engine, &masked, shift, base_step)?;
        drop(masked);
        acc = Some(match acc {
            None => moved,
            Some(a) => engine.add(&a, &moved)?,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => engine.mult_plain(ct, &PlainVec::zeros(n)),
    }
}

#[derive(Debug, Clone)]
struct Round {
    shift: usize,
    stay: PlainVec,
    moving: Option<PlainVec>,
}

/// Order-preserving left compaction realized as `ceil(log2(max shift + 1))`
/// mask-rotate-add rounds, lowest shift bit first.
#[derive(Debug, Clone)]
pub struct ShiftNetwork {
    rounds: Vec<Round>,
}

impl ShiftNetwork {
    /// `moves` maps source slots to destinations with `dst <= src`.
    /// Slots not listed are cleared.
    pub fn build(n: usize, moves: &[(usize, usize)]) -> Result<Self> {
        let mut cur: Vec<usize> = Vec::with_capacity(moves.len());
        let mut rem: Vec<usize> = Vec::with_capacity(moves.len());
        for &(src, dst) in moves {
            if src >= n || dst > src {
                return Err(Error::ShapeMismatch(format!(
                    "shift network move {src} -> {dst} is not a left move within {n} slots"
                )));
            }
            cur.push(src);
            rem.push(src - dst);
        }
        let max_shift = rem.iter().copied().max().unwrap_or(0);
        let bits = usize::BITS - max_shift.leading_zeros();
        let mut rounds = Vec::new();
        for b in 0..bits.max(1) {
            let step = 1usize << b;
            let mut stay = vec![0.0; n];
            let mut moving = vec![0.0; n];
            let mut any_moving = false;
            for (k, pos) in cur.iter_mut().enumerate() {
                if rem[k] & step != 0 {
                    moving[*pos] = 1.0;
                    any_moving = true;
                    *pos -= step;
                } else {
                    stay[*pos] = 1.0;
                }
            }
            let mut seen = BTreeSet::new();
            if let Some(&p) = cur.iter().find(|&&p| !seen.insert(p)) {
                return Err(Error::ShapeMismatch(format!(
                    "shift network collision at slot {p} in round {b}"
                )));
            }
            if !any_moving && b > 0 {
                continue;
            }
            rounds.push(Round {
                shift: step,
                stay: PlainVec::new(stay),
                moving: any_moving.then(|| PlainVec::new(moving)),
            });
        }
        Ok(ShiftNetwork { rounds })
    }

    /// Levels consumed by `apply`.
    pub fn depth(&self) -> u32 {
        self.rounds.len() as u32
    }

    pub fn offsets(&self) -> BTreeSet<i64> {
        self.rounds
            .iter()
            .filter(|r| r.moving.is_some())
            .map(|r| r.shift as i64)
            .collect()
    }

    pub fn rotations(&self) -> usize {
        self.rounds.iter().filter(|r| r.moving.is_some()).count()
    }

    pub fn apply(&self, engine: &Engine, ct: &CipherVec) -> Result<CipherVec> {
        let mut cur = ct.clone();
        for round in &self.rounds {
            let stay = engine.mult_plain(&cur, &round.stay)?;
            cur = match &round.moving {
                None => stay,
                Some(mask) => {
                    let mv = engine.mult_plain(&cur, mask)?;
                    let rot = engine.rotate(&mv, round.shift as i64)?;
                    drop(mv);
                    engine.add(&stay, &rot)?
                }
            };
        }
        Ok(cur)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::EngineParams;

    #[test]
    fn decomposition_examples() {
        let zero = decompose_offset(0, 10, 64);
        assert_eq!((zero.base_idx, zero.mod_idx, zero.rotations()), (0, 0, 0));
        let d = decompose_offset(7, 10, 64);
        assert_eq!((d.base_idx, d.mod_idx), (64, 6));
        assert_eq!(d.base_idx + d.mod_idx, 70);
        assert_eq!(decomposed_offsets(-70, 64), vec![-64, -6]);
        assert_eq!(decomposed_offsets(64, 64), vec![64]);
    }

    #[test]
    fn binary_offsets_cover_magnitude() {
        assert_eq!(binary_offsets(13), vec![1, 4, 8]);
        assert_eq!(binary_offsets(-6), vec![-2, -4]);
        assert!(binary_offsets(0).is_empty());
    }

    #[test]
    fn place_blocks_moves_and_cleans() {
        let mut e = Engine::new(EngineParams::new(16)).unwrap();
        let blocks = [
            Block { src: 0, len: 2, dst: 0 },
            Block { src: 4, len: 2, dst: 2 },
            Block { src: 8, len: 2, dst: 4 },
        ];
        e.register_rotation_keys(placement_offsets(&blocks, 2));
        let ct = e.encrypt(&(1..=16).map(f64::from).collect::<Vec<_>>()).unwrap();
        let out = e.decrypt(&place_blocks(&e, &ct, &blocks, 2).unwrap());
        assert_eq!(&out[..6], &[1.0, 2.0, 5.0, 6.0, 9.0, 10.0]);
        assert!(out[6..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shift_network_compacts_even_slots() {
        let n = 32;
        let moves: Vec<(usize, usize)> = (0..8).map(|k| (4 * k + 1, k)).collect();
        let net = ShiftNetwork::build(n, &moves).unwrap();
        let mut e = Engine::new(EngineParams::new(n)).unwrap();
        e.register_rotation_keys(net.offsets());
        let ct = e.encrypt(&(0..32).map(|v| v as f64 + 100.0).collect::<Vec<_>>()).unwrap();
        let moved = net.apply(&e, &ct).unwrap();
        let out = e.decrypt(&moved);
        for (k, v) in out[..8].iter().enumerate() {
            assert_eq!(*v, (4 * k + 1) as f64 + 100.0);
        }
        assert!(out[8..].iter().all(|&v| v == 0.0));
        assert_eq!(moved.level(), ct.level() - net.depth());
    }

    #[test]
    fn shift_network_rejects_right_moves() {
        assert!(ShiftNetwork::build(8, &[(1, 3)]).is_err());
    }
}
