//! End-to-end execution: stem, merged stages, pooling and classifier.

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::conv::{compaction_network, ConvKernel};
use crate::engine::{CipherVec, Engine, OpCounters};
use crate::error::{Error, Result};
use crate::fc::{fc_forward, fc_input_gather};
use crate::model::{BootstrapPolicy, NetworkDef, ResidualBlock};
use crate::nonlinear::{global_avg_pool_one, relu_one};
use crate::packing::{occupied_constant, packed_slots};
use crate::tensor::Image;

use super::accumulate::MemoryBound;
use super::plan::{stage_shapes, Plan};
use super::report::{Amortized, CostReport, StageCost};

/// Replace the resident rotation keys with `keys`.
pub fn stage_keys(engine: &mut Engine, keys: &BTreeSet<i64>) {
    engine.unload_all_rotation_keys();
    engine.register_rotation_keys(keys.iter().copied());
}

#[derive(Debug)]
pub struct InferOutput {
    pub scores: Vec<Vec<f64>>,
    pub report: CostReport,
}

/// Blocks evaluated in each stage: the downsampling entry merged into the
/// stage (if any) and the blocks run at the stage's resolution.
#[derive(Debug, Clone, Default)]
struct StageBlocks {
    entry: Option<(usize, usize)>,
    body: Vec<(usize, usize)>,
}

fn stage_blocks(net: &NetworkDef) -> Vec<StageBlocks> {
    let mut stages = vec![StageBlocks::default()];
    for (gi, g) in net.groups.iter().enumerate() {
        for (bi, b) in g.blocks.iter().enumerate() {
            if b.stride() == 2 {
                stages.push(StageBlocks {
                    entry: Some((gi, bi)),
                    body: Vec::new(),
                });
            } else {
                stages.last_mut().expect("stem stage").body.push((gi, bi));
            }
        }
    }
    stages
}

fn site(gi: usize, bi: usize, layer: &str) -> String {
    format!("g{gi}.b{bi}.{layer}")
}

/// Bring `ct` to at least `cost` levels according to the bootstrap policy.
fn prepare(engine: &Engine, policy: &BootstrapPolicy, site: Option<&str>, ct: CipherVec, cost: u32) -> Result<CipherVec> {
    match policy {
        BootstrapPolicy::Auto => engine.ensure_level(ct, cost),
        BootstrapPolicy::Explicit(_) if site.is_some_and(|s| policy.is_explicit_site(s)) => engine.bootstrap(&ct),
        BootstrapPolicy::Explicit(_) => Ok(ct),
    }
}

fn prepare_all(engine: &Engine, policy: &BootstrapPolicy, site: Option<&str>, cts: &mut [CipherVec], cost: u32) -> Result<()> {
    cts.par_iter_mut().try_for_each(|ct| {
        let prepared = prepare(engine, policy, site, ct.clone(), cost)?;
        *ct = prepared;
        Ok(())
    })
}

struct Run<'a> {
    engine: &'a mut Engine,
    net: &'a NetworkDef,
    plan: &'a Plan,
    images: &'a [Image],
    blocks: Vec<StageBlocks>,
    active: Option<usize>,
    mark: OpCounters,
    costs: Vec<StageCost>,
    head_peak: u64,
    body_peak: u64,
    key_high_water: usize,
    violations: Vec<String>,
}

impl<'a> Run<'a> {
    fn close_active(&mut self) {
        let Some(prev) = self.active else { return };
        let now = self.engine.snapshot_counters();
        let mut delta = now.since(&self.mark);
        delta.peak_live_ciphertexts = self.engine.reset_peak();
        let cost = &mut self.costs[prev];
        let c = &mut cost.counters;
        c.rotations += delta.rotations;
        c.plain_mults += delta.plain_mults;
        c.ct_mults += delta.ct_mults;
        c.adds += delta.adds;
        c.bootstraps += delta.bootstraps;
        c.key_loads += delta.key_loads;
        c.peak_live_ciphertexts = c.peak_live_ciphertexts.max(delta.peak_live_ciphertexts);
        if prev == self.plan.head_index() {
            self.head_peak = self.head_peak.max(delta.peak_live_ciphertexts);
        } else {
            self.body_peak = self.body_peak.max(delta.peak_live_ciphertexts);
        }
        let n = self.engine.slots() as i64;
        let planned: BTreeSet<i64> = self.plan.key_sets()[prev].iter().map(|k| k.rem_euclid(n)).collect();
        for used in self.engine.take_used_offsets() {
            if !planned.contains(&used.rem_euclid(n)) {
                self.violations.push(format!("stage {prev} rotated by {used} outside its key set"));
            }
        }
        self.mark = self.engine.snapshot_counters();
    }

    fn activate(&mut self, idx: usize) {
        if self.active == Some(idx) {
            return;
        }
        self.close_active();
        let keys = self.plan.key_sets()[idx];
        stage_keys(self.engine, keys);
        let resident = self.engine.resident_key_count();
        if resident != keys.len() {
            self.violations.push(format!("stage {idx}: {resident} keys resident, {} planned", keys.len()));
        }
        self.key_high_water = self.key_high_water.max(resident);
        self.costs[idx].activations += 1;
        self.active = Some(idx);
    }

    fn relu_all(&self, cts: &mut [CipherVec]) -> Result<()> {
        let e: &Engine = self.engine;
        let act = &self.net.activation;
        let policy = &self.net.bootstrap;
        cts.par_iter_mut().try_for_each(|ct| {
            let ready = prepare(e, policy, None, ct.clone(), act.level_cost())?;
            *ct = relu_one(e, &ready, act)?;
            Ok(())
        })
    }

    fn stem(&mut self, tile: usize) -> Result<Vec<CipherVec>> {
        let layout = self.plan.stages[0].layout;
        let b = layout.batch;
        let images = &self.images[tile * b..(tile + 1) * b];
        let slots = packed_slots(images, &layout)?;
        let e: &Engine = self.engine;
        let spec = &self.net.stem;
        let kernel = ConvKernel::new(spec, layout)?;
        let mut outs: Vec<Option<CipherVec>> = (0..spec.out_channels).map(|_| None).collect();
        for (c, s) in slots.iter().enumerate() {
            let ct = prepare(e, &self.net.bootstrap, Some("stem"), e.encrypt(s)?, 1)?;
            let aligned = kernel.align(e, &ct)?;
            drop(ct);
            kernel.accumulate(e, c, &aligned, &mut outs, 0..spec.out_channels)?;
        }
        let mut x = finish_outputs(e, &kernel, outs)?;
        self.relu_all(&mut x)?;
        Ok(x)
    }

    fn block(&self, gi: usize, bi: usize) -> &'a ResidualBlock {
        &self.net.groups[gi].blocks[bi]
    }

    /// A stride-1 residual block, in place over the stage layout.
    fn residual(&mut self, x: Vec<CipherVec>, stage: usize, gi: usize, bi: usize) -> Result<Vec<CipherVec>> {
        let layout = self.plan.stages[stage].layout;
        let block = self.block(gi, bi);
        let e: &Engine = self.engine;
        let policy = &self.net.bootstrap;
        let mut x = x;
        let s1 = site(gi, bi, "conv1");
        prepare_all(e, policy, Some(&s1), &mut x, 1)?;
        let k1 = ConvKernel::new(&block.conv1, layout)?;
        let c1 = block.conv1.out_channels;
        let mut h: Vec<Option<CipherVec>> = (0..c1).map(|_| None).collect();
        for (i, xi) in x.iter().enumerate() {
            let aligned = k1.align(e, xi)?;
            k1.accumulate(e, i, &aligned, &mut h, 0..c1)?;
        }
        let mut h = finish_outputs(e, &k1, h)?;
        self.relu_all(&mut h)?;

        let c2 = block.conv2.out_channels;
        let mut outs: Vec<Option<CipherVec>> = match &block.shortcut {
            None => x.into_iter().map(Some).collect(),
            Some(sc) => {
                let ks = ConvKernel::new(sc, layout)?;
                let ss = site(gi, bi, "shortcut");
                prepare_all(e, policy, Some(&ss), &mut x, 1)?;
                let mut y: Vec<Option<CipherVec>> = (0..c2).map(|_| None).collect();
                for (i, xi) in x.iter().enumerate() {
                    let aligned = ks.align(e, xi)?;
                    ks.accumulate(e, i, &aligned, &mut y, 0..c2)?;
                }
                drop(x);
                finish_outputs(e, &ks, y)?.into_iter().map(Some).collect()
            }
        };
        let s2 = site(gi, bi, "conv2");
        prepare_all(e, policy, Some(&s2), &mut h, 1)?;
        let k2 = ConvKernel::new(&block.conv2, layout)?;
        for (i, hi) in h.into_iter().enumerate() {
            let aligned = k2.align(e, &hi)?;
            drop(hi);
            k2.accumulate(e, i, &aligned, &mut outs, 0..c2)?;
        }
        let mut y = finish_outputs(e, &k2, outs)?;
        self.relu_all(&mut y)?;
        Ok(y)
    }

    /// One pass of a downsampling entry block: its conv2 and shortcut
    /// contributions land in region `i` of the merged partial sums.
    fn merge_pass(&mut self, stage: usize, i: usize, x: Vec<CipherVec>, acc: &mut [Option<CipherVec>]) -> Result<()> {
        let (gi, bi) = self.blocks[stage].entry.expect("merged stage has an entry block");
        let block = self.block(gi, bi);
        let in_layout = self.plan.stages[stage - 1].layout;
        let merged = self.plan.stages[stage].layout;
        let shift = -((i * self.plan.stages[stage].sts_prime) as i64);
        let e: &Engine = self.engine;
        let policy = &self.net.bootstrap;
        let act = &self.net.activation;
        let network = compaction_network(&in_layout)?;
        let depth = network.depth();

        let mut x = x;
        let s1 = site(gi, bi, "conv1");
        prepare_all(e, policy, Some(&s1), &mut x, 1)?;
        let k1 = ConvKernel::new(&block.conv1, in_layout)?;
        let k2 = ConvKernel::new(&block.conv2, merged)?;
        let (c_in, c_mid, c_out) = (block.conv1.in_channels, block.conv1.out_channels, block.conv2.out_channels);
        let s2 = site(gi, bi, "conv2");
        let mut start = 0;
        while start < c_mid {
            let range = start..(start + c_in).min(c_mid);
            let mut outs: Vec<Option<CipherVec>> = range.clone().map(|_| None).collect();
            for (ii, xi) in x.iter().enumerate() {
                let aligned = k1.align(e, xi)?;
                k1.accumulate(e, ii, &aligned, &mut outs, range.clone())?;
            }
            for (k, o) in range.clone().enumerate() {
                let full = k1.add_bias(e, o, &outs[k].take().expect("accumulated"))?;
                let full = prepare(e, policy, None, full, depth)?;
                let h = network.apply(e, &full)?;
                drop(full);
                let h = prepare(e, policy, None, h, act.level_cost())?;
                let h = relu_one(e, &h, act)?;
                let h = e.rotate(&h, shift)?;
                let h = prepare(e, policy, Some(&s2), h, 1)?;
                let aligned = k2.align(e, &h)?;
                drop(h);
                k2.accumulate(e, o, &aligned, acc, 0..c_out)?;
            }
            start = range.end;
        }

        let sc = block.shortcut.as_ref().ok_or_else(|| {
            Error::ShapeMismatch(format!("g{gi}.b{bi} downsamples without a shortcut"))
        })?;
        let ss = site(gi, bi, "shortcut");
        prepare_all(e, policy, Some(&ss), &mut x, 1)?;
        let ks = ConvKernel::new(sc, in_layout)?;
        for (o, slot) in acc.iter_mut().enumerate() {
            let mut one = [None];
            for (ii, xi) in x.iter().enumerate() {
                let aligned = ks.align(e, xi)?;
                ks.accumulate(e, ii, &aligned, &mut one, o..o + 1)?;
            }
            let y = prepare(e, policy, None, one[0].take().expect("accumulated"), depth)?;
            let y = network.apply(e, &y)?;
            let y = e.rotate(&y, shift)?;
            *slot = Some(match slot.take() {
                None => y,
                Some(a) => e.add(&a, &y)?,
            });
        }
        Ok(())
    }

    /// Stage `s` output for tile `tile` of its effective batch.
    fn stage_output(&mut self, s: usize, tile: usize) -> Result<Vec<CipherVec>> {
        let mut x = if s == 0 {
            self.activate(0);
            self.stem(tile)?
        } else {
            self.merge(s, tile)?
        };
        self.activate(s);
        for (gi, bi) in self.blocks[s].body.clone() {
            x = self.residual(x, s, gi, bi)?;
        }
        Ok(x)
    }

    fn merge(&mut self, s: usize, tile: usize) -> Result<Vec<CipherVec>> {
        let g = self.plan.stages[s].g;
        let (gi, bi) = self.blocks[s].entry.expect("merged stage has an entry block");
        let block = self.block(gi, bi);
        let mut acc: Vec<Option<CipherVec>> = (0..block.conv2.out_channels).map(|_| None).collect();
        for i in 0..g {
            let x = self.stage_output(s - 1, tile * g + i)?;
            self.activate(s - 1);
            self.merge_pass(s, i, x, &mut acc)?;
        }
        self.activate(s);
        let layout = self.plan.stages[s].layout;
        let sc_bias = &block.shortcut.as_ref().expect("checked in merge_pass").bias;
        let e: &Engine = self.engine;
        let mut x = acc
            .into_iter()
            .enumerate()
            .map(|(o, a)| {
                let bias = occupied_constant(&layout, block.conv2.bias[o] + sc_bias[o]);
                e.add_plain(&a.expect("every pass contributes"), &bias)
            })
            .collect::<Result<Vec<_>>>()?;
        self.relu_all(&mut x)?;
        Ok(x)
    }

    fn head(&mut self, x: Vec<CipherVec>) -> Result<Vec<Vec<f64>>> {
        self.activate(self.plan.head_index());
        let e: &Engine = self.engine;
        let policy = &self.net.bootstrap;
        let pool_layout = self.plan.head.pool_layout;
        let fc = self.plan.head.fc;
        let mut pooled = Vec::with_capacity(x.len());
        for ct in x {
            let ct = prepare(e, policy, Some("pool"), ct, 1)?;
            pooled.push(global_avg_pool_one(e, &ct, &pool_layout)?);
        }
        prepare_all(e, policy, Some("head"), &mut pooled, 2)?;
        let gathered = fc_input_gather(e, &pooled, &pool_layout, &fc)?;
        drop(pooled);
        let gathered = prepare(e, policy, None, gathered, 3)?;
        let out = fc_forward(e, &gathered, &self.net.head, &fc)?;
        drop(gathered);
        let slots = e.decrypt(&out);
        Ok((0..fc.batch)
            .map(|j| slots[j * fc.d_out..(j + 1) * fc.d_out].to_vec())
            .collect())
    }
}

fn finish_outputs(e: &Engine, kernel: &ConvKernel<'_>, outs: Vec<Option<CipherVec>>) -> Result<Vec<CipherVec>> {
    outs.into_iter()
        .enumerate()
        .map(|(o, acc)| {
            let acc = match acc {
                Some(a) => a,
                None => e.encrypt(&[])?,
            };
            kernel.add_bias(e, o, &acc)
        })
        .collect()
}

/// Run the planned pipeline over `images` (exactly `plan.batch.total` of
/// them) on a pool of `workers` threads.
pub fn infer(engine: &mut Engine, net: &NetworkDef, plan: &Plan, images: &[Image], workers: usize) -> Result<InferOutput> {
    net.validate()?;
    if images.len() != plan.batch.total {
        return Err(Error::ShapeMismatch(format!(
            "plan is for {} images, got {}",
            plan.batch.total,
            images.len()
        )));
    }
    if plan.batch.n != engine.slots() {
        return Err(Error::ShapeMismatch(format!(
            "plan is for {} slots, engine has {}",
            plan.batch.n,
            engine.slots()
        )));
    }
    let shapes = stage_shapes(&net.arch);
    if shapes.len() != plan.stages.len() {
        return Err(Error::ShapeMismatch("plan does not match the network's stages".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;

    let costs = plan
        .key_sets()
        .iter()
        .enumerate()
        .map(|(i, k)| StageCost {
            name: if i == plan.head_index() {
                "head".into()
            } else {
                plan.stages[i].name.clone()
            },
            counters: OpCounters::default(),
            activations: 0,
            planned_keys: k.len(),
        })
        .collect();
    engine.take_used_offsets();
    engine.reset_peak();
    let bound_before = engine.bound_exceeded_count();
    let mark = engine.snapshot_counters();
    let mut run = Run {
        engine,
        net,
        plan,
        images,
        blocks: stage_blocks(net),
        active: None,
        mark,
        costs,
        head_peak: 0,
        body_peak: 0,
        key_high_water: 0,
        violations: Vec::new(),
    };
    let last = plan.stages.len() - 1;
    let scores = pool.install(|| -> Result<Vec<Vec<f64>>> {
        let x = run.stage_output(last, 0)?;
        run.head(x)
    })?;
    run.close_active();
    run.active = None;
    let report = CostReport {
        effective_batch: plan.batch.total,
        factors: plan.batch.factors.clone(),
        stages: run.costs,
        totals: OpCounters::default(),
        amortized: Amortized {
            rotations: 0.0,
            plain_mults: 0.0,
            ct_mults: 0.0,
            bootstraps: 0.0,
        },
        peak_live_ciphertexts: run.body_peak,
        head_peak_live_ciphertexts: run.head_peak,
        memory_bound: MemoryBound::for_plan(plan, &net.activation, 3, workers.max(1)),
        key_high_water: run.key_high_water,
        planned_key_loads: plan.planned_key_loads(),
        bound_exceeded: run.engine.bound_exceeded_count() - bound_before,
        key_violations: run.violations,
    }
    .finish();
    Ok(InferOutput { scores, report })
}
