//! Batch planning: iteration factors, per-stage layouts and key sets.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::conv::{compaction_offsets, conv_keys};
use crate::engine::signed_rep;
use crate::error::{Constraint, Error, Result};
use crate::fc::{fc_offsets, gather_offsets, FcLayout};
use crate::model::Architecture;
use crate::nonlinear::pool_offsets;
use crate::packing::PackingLayout;

/// Largest merge factor one stride-2 downsampling can absorb (`r_h * r_w`).
pub const MAX_MERGE: usize = 4;

/// Batch configuration: `total = base_batch * prod(factors)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub n: usize,
    pub base_batch: usize,
    /// One factor per downsampling cut, in network order.
    pub factors: Vec<usize>,
    pub total: usize,
}

/// One pipeline stage: everything evaluated at one spatial resolution.
///
/// Stage `s > 0` begins with an accumulator that merges `g` passes of
/// stage `s - 1`, each contributing a block of `sts_prime` slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub index: usize,
    pub name: String,
    pub layout: PackingLayout,
    pub channels: usize,
    pub g: usize,
    /// Slots occupied per ciphertext entering the downsampling.
    pub sts: usize,
    /// Slots occupied after downsampling one pass.
    pub sts_prime: usize,
    /// Fraction of slots freed by the downsampling.
    pub f: f64,
    pub effective_batch_in: usize,
    pub effective_batch_out: usize,
    /// How often this stage runs over the whole batch.
    pub runs: usize,
    pub keys: BTreeSet<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadPlan {
    pub pool_layout: PackingLayout,
    pub fc: FcLayout,
    pub keys: BTreeSet<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub batch: BatchConfig,
    pub stages: Vec<StagePlan>,
    pub head: HeadPlan,
}

impl Plan {
    /// Key sets by activation index: stages, then the head.
    pub fn key_sets(&self) -> Vec<&BTreeSet<i64>> {
        self.stages.iter().map(|s| &s.keys).chain([&self.head.keys]).collect()
    }

    pub fn head_index(&self) -> usize {
        self.stages.len()
    }

    /// Order in which key sets become resident during a run. Stage `s`
    /// is re-entered once per pass; consecutive repeats are collapsed.
    pub fn activation_schedule(&self) -> Vec<usize> {
        fn visit(s: usize, stages: &[StagePlan], out: &mut Vec<usize>) {
            if s > 0 {
                for _ in 0..stages[s].g {
                    visit(s - 1, stages, out);
                }
            }
            if out.last() != Some(&s) {
                out.push(s);
            }
        }
        let mut out = Vec::new();
        visit(self.stages.len() - 1, &self.stages, &mut out);
        out.push(self.head_index());
        out
    }

    /// Total key loads of a run that reloads each set on activation.
    pub fn planned_key_loads(&self) -> u64 {
        let sets = self.key_sets();
        self.activation_schedule().iter().map(|&i| sets[i].len() as u64).sum()
    }

    pub fn max_resident_keys(&self) -> usize {
        self.key_sets().iter().map(|k| k.len()).max().unwrap_or(0)
    }

    /// Stage-by-stage summary for printing.
    pub fn describe(&self) -> String {
        let b = &self.batch;
        let mut out = format!(
            "n = {}, base batch = {}, factors = {:?}, total = {}\n",
            b.n, b.base_batch, b.factors, b.total
        );
        for s in &self.stages {
            out.push_str(&format!(
                "stage {} [{}]: {}x{} x{} ch, batch {} -> {}, g = {}, sts = {}, sts' = {}, f = {:.2}, runs = {}, keys = {:?}\n",
                s.index,
                s.name,
                s.layout.height,
                s.layout.width,
                s.channels,
                s.effective_batch_in,
                s.effective_batch_out,
                s.g,
                s.sts,
                s.sts_prime,
                s.f,
                s.runs,
                s.keys
            ));
        }
        out.push_str(&format!(
            "head: batch {}, fc {}x{} block {}, keys = {:?}\n",
            self.head.fc.batch, self.head.fc.d_out, self.head.fc.d_in, self.head.fc.block, self.head.keys
        ));
        out
    }
}

/// Resolution stages of an architecture: `(height, width, channels, body)`
/// where `body` counts the blocks run entirely at that resolution. A
/// downsampling group entry belongs to neither side.
pub(crate) fn stage_shapes(arch: &Architecture) -> Vec<(usize, usize, usize, usize)> {
    let [_, mut h, mut w] = arch.input;
    let mut shapes = vec![(h, w, arch.stem_channels, 0)];
    for g in &arch.groups {
        if g.stride == 2 {
            h /= 2;
            w /= 2;
            shapes.push((h, w, g.channels, g.blocks - 1));
        } else {
            let last = shapes.last_mut().expect("stem stage");
            last.2 = g.channels;
            last.3 += g.blocks;
        }
    }
    shapes
}

/// Offsets reduced to one signed representative per residue, zero dropped.
fn canonical(keys: BTreeSet<i64>, n: usize) -> BTreeSet<i64> {
    keys.into_iter()
        .map(|k| k.rem_euclid(n as i64) as usize)
        .filter(|&r| r != 0)
        .map(|r| signed_rep(r, n))
        .collect()
}

fn infeasible(target: usize, constraint: Constraint, detail: String) -> Error {
    Error::InfeasibleBatch {
        target,
        constraint,
        detail,
    }
}

/// Choose iteration factors for `target` images and derive every stage's
/// layout and rotation keys.
pub fn plan(arch: &Architecture, n: usize, target: usize) -> Result<Plan> {
    arch.validate()?;
    if target == 0 {
        return Err(Error::InvalidConfig("target batch must be positive".into()));
    }
    let shapes = stage_shapes(arch);
    let cuts = shapes.len() - 1;
    let (h0, w0, _, _) = shapes[0];
    let m0 = h0 * w0;
    let b0_max = PackingLayout::max_batch(n, h0, w0);
    if b0_max == 0 {
        return Err(infeasible(target, Constraint::SlotPacking, format!("one {h0}x{w0} image exceeds {n} slots")));
    }
    let (hl, wl, _, _) = shapes[cuts];
    if hl * wl * target > n {
        return Err(infeasible(
            target,
            Constraint::SlotPacking,
            format!("last stage needs {}x{}x{target} = {} slots of {n}", hl, wl, hl * wl * target),
        ));
    }
    let d_in = arch.feature_channels();
    let d_out = arch.classes;
    let head_width = d_in.next_power_of_two().max(d_out);
    if target * head_width > n {
        return Err(infeasible(
            target,
            Constraint::HeadPacking,
            format!(
                "fc needs {target}x{head_width} slots of {n}; at most {} images fit",
                n / head_width
            ),
        ));
    }
    let b0 = b0_max.min(target);
    if !target.is_multiple_of(b0) {
        return Err(infeasible(target, Constraint::Factorization, format!("{target} is not a multiple of {b0}")));
    }
    let mut rest = target / b0;
    let mut factors = Vec::with_capacity(cuts);
    for _ in 0..cuts {
        let g = (1..=MAX_MERGE).rev().find(|g| rest.is_multiple_of(*g)).expect("1 divides");
        factors.push(g);
        rest /= g;
    }
    if rest != 1 {
        return Err(infeasible(
            target,
            Constraint::Factorization,
            format!("{target} = {b0} x {} needs more than {cuts} merges of at most {MAX_MERGE}", target / b0),
        ));
    }

    let mut stages = Vec::with_capacity(shapes.len());
    let mut batch = b0;
    for (s, &(h, w, channels, _)) in shapes.iter().enumerate() {
        let g = if s == 0 { 1 } else { factors[s - 1] };
        let (sts, sts_prime, f, b_in) = if s == 0 {
            (m0 * b0, m0 * b0, 0.0, b0)
        } else {
            let (hp, wp, _, _) = shapes[s - 1];
            (hp * wp * batch, h * w * batch, 0.75, batch)
        };
        batch = b_in * g;
        let runs: usize = factors[s..].iter().product();
        stages.push(StagePlan {
            index: s,
            name: if s == 0 { "stem".into() } else { format!("merge{s}") },
            layout: PackingLayout::new(n, h, w, batch)?,
            channels,
            g,
            sts,
            sts_prime,
            f,
            effective_batch_in: b_in,
            effective_batch_out: batch,
            runs,
            keys: BTreeSet::new(),
        });
    }
    for s in 0..stages.len() {
        let layout = stages[s].layout;
        let mut keys = BTreeSet::new();
        if s == 0 || shapes[s].3 > 0 || s + 1 < stages.len() {
            keys.extend(conv_keys(layout.width, 3)?);
        }
        if s + 1 < stages.len() {
            let next = &stages[s + 1];
            keys.extend(compaction_offsets(&layout)?);
            keys.extend((1..next.g).map(|i| -((i * next.sts_prime) as i64)));
            keys.extend(conv_keys(next.layout.width, 3)?);
        }
        stages[s].keys = canonical(keys, n);
    }
    let pool_layout = stages[cuts].layout;
    let fc = FcLayout::new(n, target, d_in, d_out)?;
    let mut head_keys = pool_offsets(&pool_layout);
    head_keys.extend(gather_offsets(&pool_layout, &fc, d_in));
    head_keys.extend(fc_offsets(&fc));
    let head_keys = canonical(head_keys, n);
    Ok(Plan {
        batch: BatchConfig {
            n,
            base_batch: b0,
            factors,
            total: target,
        },
        stages,
        head: HeadPlan {
            pool_layout,
            fc,
            keys: head_keys,
        },
    })
}
