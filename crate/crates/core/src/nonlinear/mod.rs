//! ReLU through a composite odd sign polynomial, and global average pooling.

pub mod remez;

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{CipherVec, Engine, PlainVec};
use crate::error::{Error, Result};
use crate::fc::{block_sum, block_sum_offsets};
use crate::packing::PackingLayout;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationMode {
    /// Simulator computes `max(x, 0)` directly at no level cost.
    #[serde(alias = "exact")]
    ExactOracle,
    Polynomial,
}

/// Activation settings. In polynomial mode `stages` holds the fitted odd
/// coefficients `[c1, c3, c5, ...]` of each composite stage, and
/// `tolerance` is the worst absolute relu error on `[-bound, bound]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationConfig {
    pub mode: ActivationMode,
    pub bound: f64,
    pub degrees: Vec<usize>,
    #[serde(default)]
    pub stages: Vec<Vec<f64>>,
    #[serde(default)]
    pub tolerance: f64,
}

pub const DEFAULT_BOUND: f64 = 40.0;
pub const DEFAULT_DEGREES: [usize; 3] = [7, 7, 7];

impl Default for ActivationConfig {
    fn default() -> Self {
        ActivationConfig::exact()
    }
}

impl ActivationConfig {
    pub fn exact() -> Self {
        ActivationConfig {
            mode: ActivationMode::ExactOracle,
            bound: DEFAULT_BOUND,
            degrees: DEFAULT_DEGREES.to_vec(),
            stages: Vec::new(),
            tolerance: 0.0,
        }
    }

    /// Fit the composite polynomial and record its tolerance.
    pub fn polynomial(bound: f64, degrees: &[usize]) -> Result<Self> {
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(Error::InvalidConfig(format!("activation bound {bound} must be positive")));
        }
        if degrees.is_empty() || degrees.iter().any(|d| d % 2 == 0) {
            return Err(Error::InvalidConfig(format!("degrees {degrees:?} must be odd and non-empty")));
        }
        let stages = remez::fit_sign_composite(degrees);
        let mut cfg = ActivationConfig {
            mode: ActivationMode::Polynomial,
            bound,
            degrees: degrees.to_vec(),
            stages,
            tolerance: 0.0,
        };
        cfg.tolerance = cfg.measured_error(1 << 18) * 1.01;
        Ok(cfg)
    }

    /// Rescale the fitted polynomial to a new input bound.
    pub fn with_bound(&self, bound: f64) -> Self {
        let mut c = self.clone();
        c.tolerance *= bound / self.bound;
        c.bound = bound;
        c
    }

    /// Plaintext model of the activation in this mode.
    pub fn apply_plain(&self, x: f64) -> f64 {
        match self.mode {
            ActivationMode::ExactOracle => x.max(0.0),
            ActivationMode::Polynomial => {
                let p = remez::eval_composite(&self.stages, x / self.bound);
                0.5 * x * (1.0 + p)
            }
        }
    }

    /// Max `|approx(x) - relu(x)|` over a uniform grid of `[-bound, bound]`.
    pub fn measured_error(&self, points: usize) -> f64 {
        (0..=points)
            .map(|i| -self.bound + 2.0 * self.bound * i as f64 / points as f64)
            .map(|x| (self.apply_plain(x) - x.max(0.0)).abs())
            .fold(0.0, f64::max)
    }

    /// Levels one activation consumes.
    pub fn level_cost(&self) -> u32 {
        match self.mode {
            ActivationMode::ExactOracle => 0,
            ActivationMode::Polynomial => {
                2 + self.stages.iter().map(|c| odd_poly_depth(c.len())).sum::<u32>()
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == ActivationMode::Polynomial {
            if self.bound.is_nan() || self.bound <= 0.0 {
                return Err(Error::InvalidConfig("polynomial activation needs bound > 0".into()));
            }
            if self.stages.is_empty() {
                return Err(Error::InvalidConfig("polynomial activation has no fitted stages".into()));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(path, text).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: ActivationConfig =
            toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Factors of the term `c * t^e`: depth of each factor before multiplying.
fn term_factor_depths(e: usize) -> Vec<u32> {
    let mut depths = vec![1];
    let rest = e - 1;
    for b in 1..usize::BITS {
        if rest >> b & 1 == 1 {
            depths.push(b);
        }
    }
    depths
}

fn product_depth(mut depths: Vec<u32>) -> u32 {
    while depths.len() > 1 {
        depths.sort_unstable_by(|a, b| b.cmp(a));
        let a = depths.pop().unwrap();
        let b = depths.pop().unwrap();
        depths.push(a.max(b) + 1);
    }
    depths[0]
}

/// Multiplicative depth of an odd polynomial with `terms` coefficients.
pub fn odd_poly_depth(terms: usize) -> u32 {
    (0..terms)
        .map(|k| product_depth(term_factor_depths(2 * k + 1)))
        .max()
        .unwrap_or(0)
}

fn constant(engine: &Engine, v: f64) -> PlainVec {
    PlainVec::constant(engine.slots(), v)
}

/// Evaluate `sum_k c[k] t^(2k+1)` with a power-of-two ladder.
pub fn eval_odd_poly(engine: &Engine, t: &CipherVec, coeffs: &[f64]) -> Result<CipherVec> {
    let max_e = 2 * coeffs.len() - 1;
    let mut ladder: Vec<CipherVec> = vec![t.clone()];
    while (1usize << ladder.len()) < max_e {
        let last = ladder.last().unwrap();
        let sq = engine.mult_ct(last, last)?;
        ladder.push(sq);
    }
    let mut sum: Option<CipherVec> = None;
    for (k, &c) in coeffs.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let e = 2 * k + 1;
        let mut factors: Vec<CipherVec> = vec![engine.mult_plain(t, &constant(engine, c))?];
        for (b, pow) in ladder.iter().enumerate().skip(1) {
            if (e - 1) >> b & 1 == 1 {
                factors.push(pow.clone());
            }
        }
        while factors.len() > 1 {
            factors.sort_by_key(|f| f.level());
            let a = factors.pop().unwrap();
            let b = factors.pop().unwrap();
            factors.push(engine.mult_ct(&a, &b)?);
        }
        let term = factors.pop().unwrap();
        sum = Some(match sum {
            None => term,
            Some(s) => engine.add(&s, &term)?,
        });
    }
    match sum {
        Some(s) => Ok(s),
        None => engine.mult_plain(t, &constant(engine, 0.0)),
    }
}

pub fn relu_one(engine: &Engine, ct: &CipherVec, cfg: &ActivationConfig) -> Result<CipherVec> {
    match cfg.mode {
        ActivationMode::ExactOracle => engine.map_exact(ct, |v| v.max(0.0)),
        ActivationMode::Polynomial => {
            let needed = cfg.level_cost();
            if ct.level() < needed {
                return Err(Error::LevelExhausted {
                    needed,
                    available: ct.level(),
                });
            }
            if engine.peek_max_abs(ct) > cfg.bound {
                engine.note_bound_exceeded();
                log::warn!("activation input exceeds bound {}", cfg.bound);
            }
            let mut t = engine.mult_plain(ct, &constant(engine, 1.0 / cfg.bound))?;
            for stage in &cfg.stages {
                t = eval_odd_poly(engine, &t, stage)?;
            }
            let half = engine.mult_plain(ct, &constant(engine, 0.5))?;
            let gated = engine.mult_ct(&half, &t)?;
            drop(t);
            engine.add(&half, &gated)
        }
    }
}

/// Apply the activation to every ciphertext independently, order preserved.
pub fn relu(engine: &Engine, cts: &[CipherVec], cfg: &ActivationConfig) -> Result<Vec<CipherVec>> {
    cts.par_iter().map(|ct| relu_one(engine, ct, cfg)).collect()
}

pub fn pool_offsets(layout: &PackingLayout) -> BTreeSet<i64> {
    block_sum_offsets(layout.m())
}

/// Slot `j*m` of each output holds the mean of segment `j`. Other slots
/// keep rotate-add residue. Consumes one level.
pub fn global_avg_pool_one(engine: &Engine, ct: &CipherVec, layout: &PackingLayout) -> Result<CipherVec> {
    let m = layout.m();
    let summed = block_sum(engine, ct, m)?;
    engine.mult_plain(&summed, &constant(engine, 1.0 / m as f64))
}

pub fn global_avg_pool(engine: &Engine, cts: &[CipherVec], layout: &PackingLayout) -> Result<Vec<CipherVec>> {
    if !layout.m().is_power_of_two() {
        return Err(Error::NonPowerOfTwoBlock(layout.m()));
    }
    cts.par_iter().map(|ct| global_avg_pool_one(engine, ct, layout)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::EngineParams;

    #[test]
    fn exact_relu() {
        let e = Engine::new(EngineParams::new(4)).unwrap();
        let ct = e.encrypt(&[-1.0, 2.0, 0.0]).unwrap();
        let out = relu(&e, &[ct], &ActivationConfig::exact()).unwrap();
        assert_eq!(e.decrypt(&out[0]), vec![0.0, 2.0, 0.0, 0.0]);
        assert_eq!(out[0].level(), 25);
    }

    #[test]
    fn degree_seven_uses_three_levels() {
        assert_eq!(odd_poly_depth(4), 3);
        assert_eq!(odd_poly_depth(2), 2);
        assert_eq!(odd_poly_depth(1), 1);
        let e = Engine::new(EngineParams::new(8)).unwrap();
        let t = e.encrypt(&[0.5, -0.25]).unwrap();
        let coeffs = [1.0, -2.0, 0.5, 0.25];
        let out = eval_odd_poly(&e, &t, &coeffs).unwrap();
        assert_eq!(t.level() - out.level(), 3);
        let got = e.decrypt(&out);
        for (i, &x) in [0.5f64, -0.25].iter().enumerate() {
            let want = remez::eval_odd(&coeffs, x);
            assert!((got[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn polynomial_relu_tracks_tolerance() {
        let cfg = ActivationConfig::polynomial(40.0, &DEFAULT_DEGREES).unwrap();
        assert!(cfg.tolerance > 0.0);
        let e = Engine::new(EngineParams::new(8)).unwrap();
        let ct = e.encrypt(&[20.0; 8]).unwrap();
        let out = e.decrypt(&relu_one(&e, &ct, &cfg).unwrap());
        assert!(out.iter().all(|v| (v - 20.0).abs() <= cfg.tolerance));
        assert_eq!(ct.level() - relu_one(&e, &ct, &cfg).unwrap().level(), cfg.level_cost());
    }

    #[test]
    fn bound_violation_is_diagnosed() {
        let cfg = ActivationConfig::polynomial(1.0, &[7]).unwrap();
        let e = Engine::new(EngineParams::new(4)).unwrap();
        let ct = e.encrypt(&[3.0]).unwrap();
        relu_one(&e, &ct, &cfg).unwrap();
        assert_eq!(e.bound_exceeded_count(), 1);
    }

    #[test]
    fn pooling_means() {
        let layout = PackingLayout::new(16, 2, 2, 2).unwrap();
        let mut e = Engine::new(EngineParams::new(16)).unwrap();
        e.register_rotation_keys(pool_offsets(&layout));
        let ct = e.encrypt(&[1.0, 2.0, 3.0, 4.0, 7.0, 7.0, 7.0, 7.0]).unwrap();
        let out = e.decrypt(&global_avg_pool(&e, &[ct], &layout).unwrap()[0]);
        assert_eq!(out[0], 2.5);
        assert_eq!(out[4], 7.0);
    }

    #[test]
    fn config_file_round_trip() {
        let cfg = ActivationConfig::polynomial(10.0, &[7, 7]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("act.toml");
        cfg.save(&path).unwrap();
        assert_eq!(ActivationConfig::load(&path).unwrap(), cfg);
    }
}
