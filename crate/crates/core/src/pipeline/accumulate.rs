//! Merging compacted passes into one ciphertext, and the live-ciphertext
//! bound that incremental merging makes possible.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::engine::{CipherVec, Engine};
use crate::error::{Error, Result};
use crate::nonlinear::{ActivationConfig, ActivationMode};
use crate::packing::{make_segment_mask, SegmentMask};

use super::plan::Plan;

/// Rotations the merge of `g` blocks of `sts_prime` slots needs.
pub fn accumulator_offsets(g: usize, sts_prime: usize) -> BTreeSet<i64> {
    (1..g).map(|i| -((i * sts_prime) as i64)).collect()
}

/// Mask keeping the first `sts_prime` slots.
pub fn block_mask(sts_prime: usize, n: usize) -> Result<SegmentMask> {
    make_segment_mask(&[(0, sts_prime)], n)
}

/// `sum_i rot(cts[i] * mask, -i * sts_prime)`: input `i`'s first
/// `sts_prime` slots land at `[i * sts_prime, (i + 1) * sts_prime)`.
/// Inputs are consumed one by one. Consumes one level.
pub fn accumulate(engine: &Engine, cts: Vec<CipherVec>, sts_prime: usize, mask: &SegmentMask) -> Result<CipherVec> {
    let n = engine.slots();
    let used = cts.len() * sts_prime;
    if used > n {
        return Err(Error::OccupancyOverflow { used, n });
    }
    let mut joined: Option<CipherVec> = None;
    for (i, ct) in cts.into_iter().enumerate() {
        let masked = engine.mult_plain(&ct, &mask.plain)?;
        drop(ct);
        let placed = engine.rotate(&masked, -((i * sts_prime) as i64))?;
        drop(masked);
        joined = Some(match joined {
            None => placed,
            Some(j) => engine.add(&j, &placed)?,
        });
    }
    joined.ok_or_else(|| Error::ShapeMismatch("nothing to accumulate".into()))
}

/// Transient ciphertexts one worker holds inside the activation.
pub fn activation_scratch(cfg: &ActivationConfig) -> usize {
    match cfg.mode {
        ActivationMode::ExactOracle => 1,
        ActivationMode::Polynomial => {
            let max_terms = cfg.stages.iter().map(Vec::len).max().unwrap_or(1);
            let ladder = (usize::BITS - (2 * max_terms - 2).leading_zeros()) as usize;
            // t, half, running sum, term, ladder, factor list and one product.
            4 + ladder + (ladder + 1) + 1
        }
    }
}

/// Live-ciphertext budget for a run.
///
/// A stage `s` pass keeps at most two tensors of its own width live (block
/// input plus the tensor being produced) while every enclosing stage holds
/// one partial merge of its own width. With channels doubling per stage this
/// telescopes to twice the widest merged stage. On top come one aligned set
/// (`k^2`), the channel in flight between compaction and merge with its
/// rotated copy, and per-worker scratch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBound {
    /// Twice the widest merged stage's channel count.
    pub channel_term: usize,
    /// The telescoping sum of partial merges and stage tensors; equals
    /// `channel_term` when channels double at every merge.
    pub nested_term: usize,
    pub workspace: usize,
}

/// Handles held outside any worker: the channel between compaction and
/// merge, its rotated copy, and the shortcut partial.
pub const IN_FLIGHT: usize = 3;

/// Largest per-worker scratch among the parallel kernels: conv accumulate
/// (product and new sum), shift-network rounds (stay, move, rotated, sum)
/// and the activation.
fn worker_scratch(cfg: &ActivationConfig) -> usize {
    activation_scratch(cfg).max(4)
}

impl MemoryBound {
    pub fn for_plan(plan: &Plan, activation: &ActivationConfig, kernel: usize, workers: usize) -> Self {
        let widths: Vec<usize> = plan.stages.iter().map(|s| s.channels).collect();
        let stem_in = 1;
        let merged_max = widths.iter().skip(1).copied().max().unwrap_or(widths[0]);
        let nested_term = (0..widths.len())
            .map(|s| {
                let enclosing: usize = widths[s + 1..].iter().sum();
                let own = 2 * widths[s];
                let entry = if s + 1 < widths.len() { widths[s] + widths[s].min(widths[s + 1]) } else { 0 };
                let stem = if s == 0 { stem_in + widths[0] } else { 0 };
                enclosing + own.max(entry).max(stem)
            })
            .max()
            .unwrap_or(0);
        MemoryBound {
            channel_term: 2 * merged_max,
            nested_term,
            workspace: kernel * kernel + IN_FLIGHT + workers * worker_scratch(activation),
        }
    }

    pub fn limit(&self) -> usize {
        self.channel_term.max(self.nested_term) + self.workspace
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::EngineParams;
    use crate::model::Architecture;
    use crate::pipeline::plan::plan;

    #[test]
    fn four_blocks_concatenate() {
        let n = 16;
        let mut e = Engine::new(EngineParams::new(n)).unwrap();
        e.register_rotation_keys(accumulator_offsets(4, 4));
        let cts: Vec<CipherVec> = (0..4)
            .map(|i| e.encrypt(&[10.0 * i as f64 + 1.0, 2.0, 3.0, 4.0, 99.0]).unwrap())
            .collect();
        let joined = accumulate(&e, cts, 4, &block_mask(4, n).unwrap()).unwrap();
        let out = e.decrypt(&joined);
        assert_eq!(out[0], 1.0);
        assert_eq!(out[4], 11.0);
        assert_eq!(out[12..16], [31.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.live_ciphertexts(), 1);
    }

    #[test]
    fn single_block_is_masked_identity() {
        let e = Engine::new(EngineParams::new(8)).unwrap();
        let ct = e.encrypt(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = e.decrypt(&accumulate(&e, vec![ct], 2, &block_mask(2, 8).unwrap()).unwrap());
        assert_eq!(out, vec![1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn overflow_rejected() {
        let e = Engine::new(EngineParams::new(8)).unwrap();
        let cts = (0..3).map(|_| e.encrypt(&[1.0]).unwrap()).collect();
        assert!(matches!(
            accumulate(&e, cts, 4, &block_mask(4, 8).unwrap()),
            Err(Error::OccupancyOverflow { used: 12, n: 8 })
        ));
    }

    #[test]
    fn doubling_channels_telescope() {
        let p = plan(&Architecture::resnet20([16, 32, 64], 10), 16384, 256).unwrap();
        let b = MemoryBound::for_plan(&p, &ActivationConfig::exact(), 3, 1);
        assert_eq!(b.channel_term, 128);
        assert_eq!(b.nested_term, 128);
    }
}
