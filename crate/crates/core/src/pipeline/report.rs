//! Operation-count cost report of one run.

use serde::{Deserialize, Serialize};

use crate::engine::OpCounters;

use super::accumulate::MemoryBound;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub name: String,
    pub counters: OpCounters,
    pub activations: u64,
    pub planned_keys: usize,
}

/// Per-image averages: totals divided by the effective batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Amortized {
    pub rotations: f64,
    pub plain_mults: f64,
    pub ct_mults: f64,
    pub bootstraps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub effective_batch: usize,
    pub factors: Vec<usize>,
    pub stages: Vec<StageCost>,
    pub totals: OpCounters,
    pub amortized: Amortized,
    /// Peak over the stages before the head.
    pub peak_live_ciphertexts: u64,
    pub head_peak_live_ciphertexts: u64,
    pub memory_bound: MemoryBound,
    pub key_high_water: usize,
    pub planned_key_loads: u64,
    pub bound_exceeded: u64,
    /// Offsets used while not in the active stage's planned set, and
    /// resident-set mismatches at stage boundaries.
    pub key_violations: Vec<String>,
}

impl CostReport {
    pub(crate) fn finish(mut self) -> Self {
        let mut t = OpCounters::default();
        for s in &self.stages {
            let c = &s.counters;
            t.rotations += c.rotations;
            t.plain_mults += c.plain_mults;
            t.ct_mults += c.ct_mults;
            t.adds += c.adds;
            t.bootstraps += c.bootstraps;
            t.key_loads += c.key_loads;
            t.peak_live_ciphertexts = t.peak_live_ciphertexts.max(c.peak_live_ciphertexts);
        }
        let b = self.effective_batch as f64;
        self.amortized = Amortized {
            rotations: t.rotations as f64 / b,
            plain_mults: t.plain_mults as f64 / b,
            ct_mults: t.ct_mults as f64 / b,
            bootstraps: t.bootstraps as f64 / b,
        };
        self.totals = t;
        self
    }

    pub fn within_memory_bound(&self) -> bool {
        (self.peak_live_ciphertexts.max(self.head_peak_live_ciphertexts) as usize) <= self.memory_bound.limit()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Human-readable table.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<10} {:>10} {:>12} {:>10} {:>10} {:>11} {:>6} {:>6}\n",
            "stage", "rotations", "plain_mults", "ct_mults", "adds", "bootstraps", "peak", "runs"
        );
        let row = |name: &str, c: &OpCounters, runs: String| {
            format!(
                "{:<10} {:>10} {:>12} {:>10} {:>10} {:>11} {:>6} {:>6}\n",
                name, c.rotations, c.plain_mults, c.ct_mults, c.adds, c.bootstraps, c.peak_live_ciphertexts, runs
            )
        };
        for s in &self.stages {
            out.push_str(&row(&s.name, &s.counters, s.activations.to_string()));
        }
        out.push_str(&row("total", &self.totals, String::new()));
        let a = &self.amortized;
        out.push_str(&format!(
            "batch {} (factors {:?}): {:.3} rotations/image, {:.3} plain mults/image, {:.3} ct mults/image, {:.4} bootstraps/image\n",
            self.effective_batch, self.factors, a.rotations, a.plain_mults, a.ct_mults, a.bootstraps
        ));
        out.push_str(&format!(
            "peak live ciphertexts {} (head {}), bound {} = max({}, {}) + {}; key high water {}, key loads {} (planned {})\n",
            self.peak_live_ciphertexts,
            self.head_peak_live_ciphertexts,
            self.memory_bound.limit(),
            self.memory_bound.channel_term,
            self.memory_bound.nested_term,
            self.memory_bound.workspace,
            self.key_high_water,
            self.totals.key_loads,
            self.planned_key_loads
        ));
        if self.bound_exceeded > 0 {
            out.push_str(&format!("activation bound exceeded {} times\n", self.bound_exceeded));
        }
        for v in &self.key_violations {
            out.push_str(&format!("key violation: {v}\n"));
        }
        out
    }
}
