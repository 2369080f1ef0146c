//! Abstract homomorphic SIMD vector engine and its reference simulator.
//!
//! Ciphertexts are modelled as plain slot vectors tagged with a level. The
//! simulator enforces the semantics a real CKKS backend would impose:
//! rotations need a registered key, multiplications consume level, and
//! bootstrapping restores it. Every operation is counted so layouts and
//! schedules can be compared by operation counts.
//!
//! Rotation convention: `rotate(ct, k)` yields `out[i] = in[(i + k) mod n]`,
//! so a positive `k` moves contents toward lower slot indices.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static NEXT_CONTEXT: AtomicU64 = AtomicU64::new(1);

/// Parameters of a simulated CKKS context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineParams {
    /// Slot count (N/2 for ring degree N).
    pub slots: usize,
    pub max_level: u32,
    pub mult_level_cost: u32,
    /// Post-bootstrap level is `max_level - bootstrap_reserve`.
    pub bootstrap_reserve: u32,
    pub noise_sigma: f64,
    pub noise_seed: u64,
    // Carried for reporting only; the simulator gives them no meaning.
    pub first_modulus_bits: u32,
    pub scale_bits: u32,
    pub key_switch_digits: u32,
}

impl EngineParams {
    pub fn new(slots: usize) -> Self {
        EngineParams {
            slots,
            ..Default::default()
        }
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn bootstrap_level(&self) -> u32 {
        self.max_level - self.bootstrap_reserve
    }

    pub fn validate(&self) -> Result<()> {
        if !self.slots.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "slot count {} is not a power of two",
                self.slots
            )));
        }
        if self.bootstrap_reserve == 0 || self.bootstrap_reserve >= self.max_level {
            return Err(Error::InvalidConfig(format!(
                "bootstrap reserve {} must lie in (0, {})",
                self.bootstrap_reserve, self.max_level
            )));
        }
        if self.mult_level_cost == 0 {
            return Err(Error::InvalidConfig("mult_level_cost must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig("noise_sigma must be finite and >= 0".into()));
        }
        Ok(())
    }
}

impl Default for EngineParams {
    fn default() -> Self {
        EngineParams {
            slots: 16384,
            max_level: 25,
            mult_level_cost: 1,
            bootstrap_reserve: 10,
            noise_sigma: 0.0,
            noise_seed: 0x5eed,
            first_modulus_bits: 50,
            scale_bits: 46,
            key_switch_digits: 4,
        }
    }
}

/// Resident rotation keys, stored as offsets reduced modulo `n`.
#[derive(Debug, Clone, Default)]
pub struct RotationKeySet {
    n: usize,
    offsets: BTreeSet<usize>,
    generation_count: u64,
}

impl RotationKeySet {
    fn new(n: usize) -> Self {
        RotationKeySet {
            n,
            offsets: BTreeSet::new(),
            generation_count: 0,
        }
    }

    fn reduce(&self, k: i64) -> usize {
        k.rem_euclid(self.n as i64) as usize
    }

    /// Returns how many offsets were newly inserted.
    fn insert_all(&mut self, offsets: impl IntoIterator<Item = i64>) -> u64 {
        let mut added = 0;
        for k in offsets {
            let r = self.reduce(k);
            if r != 0 && self.offsets.insert(r) {
                added += 1;
            }
        }
        self.generation_count += added;
        added
    }

    fn remove_all(&mut self, offsets: impl IntoIterator<Item = i64>) {
        for k in offsets {
            let r = self.reduce(k);
            self.offsets.remove(&r);
        }
    }

    pub fn contains(&self, k: i64) -> bool {
        let r = self.reduce(k);
        r == 0 || self.offsets.contains(&r)
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn generation_count(&self) -> u64 {
        self.generation_count
    }

    /// Offsets as signed representatives in `(-n/2, n/2]`.
    pub fn signed_offsets(&self) -> BTreeSet<i64> {
        self.offsets
            .iter()
            .map(|&r| signed_rep(r, self.n))
            .collect()
    }
}

/// Signed representative of a slot offset in `(-n/2, n/2]`.
pub fn signed_rep(r: usize, n: usize) -> i64 {
    if r > n / 2 {
        r as i64 - n as i64
    } else {
        r as i64
    }
}

/// Snapshot of the engine's operation counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounters {
    pub rotations: u64,
    pub plain_mults: u64,
    pub ct_mults: u64,
    pub adds: u64,
    pub bootstraps: u64,
    pub key_loads: u64,
    pub peak_live_ciphertexts: u64,
}

impl OpCounters {
    /// Counter growth since `earlier`. The peak is taken from `self`.
    pub fn since(&self, earlier: &OpCounters) -> OpCounters {
        OpCounters {
            rotations: self.rotations - earlier.rotations,
            plain_mults: self.plain_mults - earlier.plain_mults,
            ct_mults: self.ct_mults - earlier.ct_mults,
            adds: self.adds - earlier.adds,
            bootstraps: self.bootstraps - earlier.bootstraps,
            key_loads: self.key_loads - earlier.key_loads,
            peak_live_ciphertexts: self.peak_live_ciphertexts,
        }
    }
}

/// Shared, internally synchronized accounting sink.
#[derive(Debug, Default)]
struct Accounting {
    rotations: AtomicU64,
    plain_mults: AtomicU64,
    ct_mults: AtomicU64,
    adds: AtomicU64,
    bootstraps: AtomicU64,
    key_loads: AtomicU64,
    live: AtomicUsize,
    peak_live: AtomicUsize,
    next_id: AtomicU64,
    bound_exceeded: AtomicU64,
    used_offsets: Mutex<BTreeSet<usize>>,
}

impl Accounting {
    fn acquire(&self) -> u64 {
        let live = self.live.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_live.fetch_max(live, Ordering::SeqCst);
        self.next_id.fetch_add(1, Ordering::Relaxed)
    }

    fn release(&self) {
        self.live.fetch_sub(1, Ordering::SeqCst);
    }
}

/// A simulated ciphertext. Immutable once created; dropping it releases its
/// live-ciphertext slot.
pub struct CipherVec {
    slots: Arc<Vec<f64>>,
    level: u32,
    scale_bits: u32,
    id: u64,
    context: u64,
    sink: Arc<Accounting>,
}

impl CipherVec {
    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn scale_bits(&self) -> u32 {
        self.scale_bits
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

impl Clone for CipherVec {
    fn clone(&self) -> Self {
        let id = self.sink.acquire();
        CipherVec {
            slots: Arc::clone(&self.slots),
            level: self.level,
            scale_bits: self.scale_bits,
            id,
            context: self.context,
            sink: Arc::clone(&self.sink),
        }
    }
}

impl Drop for CipherVec {
    fn drop(&mut self) {
        self.sink.release();
    }
}

impl fmt::Debug for CipherVec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CipherVec")
            .field("id", &self.id)
            .field("level", &self.level)
            .field("n", &self.slots.len())
            .finish()
    }
}

/// An encoded plaintext vector of exactly `n` slots.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainVec {
    slots: Vec<f64>,
}

impl PlainVec {
    pub fn new(slots: Vec<f64>) -> Self {
        PlainVec { slots }
    }

    pub fn zeros(n: usize) -> Self {
        PlainVec { slots: vec![0.0; n] }
    }

    pub fn constant(n: usize, value: f64) -> Self {
        PlainVec {
            slots: vec![value; n],
        }
    }

    pub fn slots(&self) -> &[f64] {
        &self.slots
    }

    pub fn slots_mut(&mut self) -> &mut [f64] {
        &mut self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Elementwise scaled copy.
    pub fn scaled(&self, factor: f64) -> PlainVec {
        PlainVec {
            slots: self.slots.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.slots
    }
}

/// The reference simulator backend.
pub struct Engine {
    params: EngineParams,
    context: u64,
    keys: RotationKeySet,
    sink: Arc<Accounting>,
    rng: Mutex<ChaCha8Rng>,
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine")
            .field("params", &self.params)
            .field("resident_keys", &self.keys.len())
            .finish()
    }
}

impl Engine {
    pub fn new(params: EngineParams) -> Result<Self> {
        params.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(params.noise_seed);
        Ok(Engine {
            keys: RotationKeySet::new(params.slots),
            context: NEXT_CONTEXT.fetch_add(1, Ordering::Relaxed),
            sink: Arc::new(Accounting::default()),
            rng: Mutex::new(rng),
            params,
        })
    }

    pub fn params(&self) -> &EngineParams {
        &self.params
    }

    pub fn slots(&self) -> usize {
        self.params.slots
    }

    fn wrap(&self, slots: Vec<f64>, level: u32) -> CipherVec {
        debug_assert_eq!(slots.len(), self.params.slots);
        let id = self.sink.acquire();
        CipherVec {
            slots: Arc::new(slots),
            level,
            scale_bits: self.params.scale_bits,
            id,
            context: self.context,
            sink: Arc::clone(&self.sink),
        }
    }

    fn check_ct(&self, ct: &CipherVec) -> Result<()> {
        if ct.context != self.context {
            return Err(Error::ContextMismatch);
        }
        Ok(())
    }

    fn check_plain(&self, p: &PlainVec) -> Result<()> {
        if p.len() != self.params.slots {
            return Err(Error::LengthExceedsSlots {
                len: p.len(),
                n: self.params.slots,
            });
        }
        Ok(())
    }

    fn perturb(&self, slots: &mut [f64]) {
        let sigma = self.params.noise_sigma;
        if sigma == 0.0 {
            return;
        }
        let normal = Normal::new(0.0, sigma).expect("sigma validated");
        let mut rng = self.rng.lock().expect("noise rng poisoned");
        for v in slots.iter_mut() {
            *v += normal.sample(&mut *rng);
        }
    }

    /// Encode a vector of at most `n` values, zero padded.
    pub fn encode(&self, values: &[f64]) -> Result<PlainVec> {
        let n = self.params.slots;
        if values.len() > n {
            return Err(Error::LengthExceedsSlots {
                len: values.len(),
                n,
            });
        }
        let mut slots = vec![0.0; n];
        slots[..values.len()].copy_from_slice(values);
        Ok(PlainVec::new(slots))
    }

    pub fn encrypt(&self, values: &[f64]) -> Result<CipherVec> {
        let plain = self.encode(values)?;
        Ok(self.wrap(plain.into_vec(), self.params.max_level))
    }

    /// Encrypt at an explicit level; useful for exercising level bookkeeping.
    pub fn encrypt_at(&self, values: &[f64], level: u32) -> Result<CipherVec> {
        if level > self.params.max_level {
            return Err(Error::InvalidConfig(format!(
                "level {level} above max {}",
                self.params.max_level
            )));
        }
        let plain = self.encode(values)?;
        Ok(self.wrap(plain.into_vec(), level))
    }

    pub fn decrypt(&self, ct: &CipherVec) -> Vec<f64> {
        ct.slots.as_ref().clone()
    }

    /// Cyclic rotation; positive `k` shifts toward lower indices.
    pub fn rotate(&self, ct: &CipherVec, k: i64) -> Result<CipherVec> {
        self.check_ct(ct)?;
        let n = self.params.slots;
        let r = k.rem_euclid(n as i64) as usize;
        if r == 0 {
            return Ok(ct.clone());
        }
        if !self.keys.contains(k) {
            return Err(Error::MissingRotationKey(k));
        }
        let src = ct.slots.as_slice();
        let mut out = Vec::with_capacity(n);
        out.extend_from_slice(&src[r..]);
        out.extend_from_slice(&src[..r]);
        self.sink.rotations.fetch_add(1, Ordering::Relaxed);
        self.sink
            .used_offsets
            .lock()
            .expect("offset log poisoned")
            .insert(r);
        Ok(self.wrap(out, ct.level))
    }

    pub fn add(&self, a: &CipherVec, b: &CipherVec) -> Result<CipherVec> {
        self.check_ct(a)?;
        self.check_ct(b)?;
        let out = a.slots.iter().zip(b.slots.iter()).map(|(x, y)| x + y).collect();
        self.sink.adds.fetch_add(1, Ordering::Relaxed);
        Ok(self.wrap(out, a.level.min(b.level)))
    }

    pub fn add_plain(&self, a: &CipherVec, p: &PlainVec) -> Result<CipherVec> {
        self.check_ct(a)?;
        self.check_plain(p)?;
        let out = a.slots.iter().zip(p.slots()).map(|(x, y)| x + y).collect();
        self.sink.adds.fetch_add(1, Ordering::Relaxed);
        Ok(self.wrap(out, a.level))
    }

    fn consume_level(&self, level: u32) -> Result<u32> {
        let cost = self.params.mult_level_cost;
        level.checked_sub(cost).ok_or(Error::LevelExhausted {
            needed: cost,
            available: level,
        })
    }

    pub fn mult_plain(&self, ct: &CipherVec, p: &PlainVec) -> Result<CipherVec> {
        self.check_ct(ct)?;
        self.check_plain(p)?;
        let level = self.consume_level(ct.level)?;
        let mut out: Vec<f64> = ct.slots.iter().zip(p.slots()).map(|(x, y)| x * y).collect();
        self.perturb(&mut out);
        self.sink.plain_mults.fetch_add(1, Ordering::Relaxed);
        Ok(self.wrap(out, level))
    }

    pub fn mult_ct(&self, a: &CipherVec, b: &CipherVec) -> Result<CipherVec> {
        self.check_ct(a)?;
        self.check_ct(b)?;
        let level = self.consume_level(a.level.min(b.level))?;
        let mut out: Vec<f64> = a.slots.iter().zip(b.slots.iter()).map(|(x, y)| x * y).collect();
        self.perturb(&mut out);
        self.sink.ct_mults.fetch_add(1, Ordering::Relaxed);
        Ok(self.wrap(out, level))
    }

    pub fn bootstrap(&self, ct: &CipherVec) -> Result<CipherVec> {
        self.check_ct(ct)?;
        let mut out = ct.slots.as_ref().clone();
        self.perturb(&mut out);
        self.sink.bootstraps.fetch_add(1, Ordering::Relaxed);
        Ok(self.wrap(out, self.params.bootstrap_level()))
    }

    /// Bootstrap only when `ct` has fewer than `needed` levels left.
    pub fn ensure_level(&self, ct: CipherVec, needed: u32) -> Result<CipherVec> {
        if ct.level >= needed {
            return Ok(ct);
        }
        if needed > self.params.bootstrap_level() {
            return Err(Error::LevelExhausted {
                needed,
                available: self.params.bootstrap_level(),
            });
        }
        self.bootstrap(&ct)
    }

    /// Simulator-only slotwise map at no level cost. Used for the exact
    /// activation oracle; a real backend has no equivalent.
    pub fn map_exact(&self, ct: &CipherVec, f: impl Fn(f64) -> f64) -> Result<CipherVec> {
        self.check_ct(ct)?;
        let out = ct.slots.iter().map(|&v| f(v)).collect();
        Ok(self.wrap(out, ct.level))
    }

    /// Simulator-only inspection of the largest slot magnitude.
    pub fn peek_max_abs(&self, ct: &CipherVec) -> f64 {
        ct.slots.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub(crate) fn note_bound_exceeded(&self) {
        self.sink.bound_exceeded.fetch_add(1, Ordering::Relaxed);
    }

    /// Number of polynomial activations whose input exceeded the configured bound.
    pub fn bound_exceeded_count(&self) -> u64 {
        self.sink.bound_exceeded.load(Ordering::Relaxed)
    }

    pub fn register_rotation_keys(&mut self, offsets: impl IntoIterator<Item = i64>) {
        let added = self.keys.insert_all(offsets);
        self.sink.key_loads.fetch_add(added, Ordering::Relaxed);
    }

    pub fn unload_rotation_keys(&mut self, offsets: impl IntoIterator<Item = i64>) {
        self.keys.remove_all(offsets);
    }

    pub fn unload_all_rotation_keys(&mut self) {
        self.keys.offsets.clear();
    }

    pub fn keys(&self) -> &RotationKeySet {
        &self.keys
    }

    pub fn resident_key_count(&self) -> usize {
        self.keys.len()
    }

    pub fn has_key(&self, k: i64) -> bool {
        self.keys.contains(k)
    }

    pub fn live_ciphertexts(&self) -> usize {
        self.sink.live.load(Ordering::SeqCst)
    }

    pub fn snapshot_counters(&self) -> OpCounters {
        let s = &self.sink;
        OpCounters {
            rotations: s.rotations.load(Ordering::SeqCst),
            plain_mults: s.plain_mults.load(Ordering::SeqCst),
            ct_mults: s.ct_mults.load(Ordering::SeqCst),
            adds: s.adds.load(Ordering::SeqCst),
            bootstraps: s.bootstraps.load(Ordering::SeqCst),
            key_loads: s.key_loads.load(Ordering::SeqCst),
            peak_live_ciphertexts: s.peak_live.load(Ordering::SeqCst) as u64,
        }
    }

    /// Restart the running peak at the current live count, returning the old peak.
    pub fn reset_peak(&self) -> u64 {
        let live = self.sink.live.load(Ordering::SeqCst);
        self.sink.peak_live.swap(live, Ordering::SeqCst) as u64
    }

    /// Distinct rotation offsets used since the last reset, as signed representatives.
    pub fn used_offsets(&self) -> BTreeSet<i64> {
        let n = self.params.slots;
        self.sink
            .used_offsets
            .lock()
            .expect("offset log poisoned")
            .iter()
            .map(|&r| signed_rep(r, n))
            .collect()
    }

    pub fn take_used_offsets(&self) -> BTreeSet<i64> {
        let n = self.params.slots;
        let taken = std::mem::take(&mut *self.sink.used_offsets.lock().expect("offset log poisoned"));
        taken.into_iter().map(|r| signed_rep(r, n)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn engine(n: usize) -> Engine {
        Engine::new(EngineParams::new(n)).unwrap()
    }

    #[test]
    fn encrypt_pads_and_sets_level() {
        let e = engine(4);
        let ct = e.encrypt(&[1.0, 2.0]).unwrap();
        assert_eq!(e.decrypt(&ct), vec![1.0, 2.0, 0.0, 0.0]);
        assert_eq!(ct.level(), 25);
        let empty = e.encrypt(&[]).unwrap();
        assert_eq!(e.decrypt(&empty), vec![0.0; 4]);
        assert!(matches!(
            e.encrypt(&[0.0; 5]),
            Err(Error::LengthExceedsSlots { len: 5, n: 4 })
        ));
    }

    #[test]
    fn rotate_left_and_key_gating() {
        let mut e = engine(4);
        e.register_rotation_keys([1, -1]);
        let ct = e.encrypt(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = e.rotate(&ct, 1).unwrap();
        assert_eq!(e.decrypt(&r), vec![2.0, 3.0, 4.0, 1.0]);
        let before = e.snapshot_counters().rotations;
        let same = e.rotate(&ct, 0).unwrap();
        assert_eq!(e.decrypt(&same), e.decrypt(&ct));
        assert_eq!(e.snapshot_counters().rotations, before);
        // 5 mod 4 == 1 is registered; 2 is not.
        assert!(e.rotate(&ct, 5).is_ok());
        assert!(matches!(e.rotate(&ct, 2), Err(Error::MissingRotationKey(2))));
    }

    #[test]
    fn missing_key_for_five_with_only_unit_keys() {
        let mut e = engine(16);
        e.register_rotation_keys([1, -1]);
        let ct = e.encrypt(&[1.0]).unwrap();
        assert!(matches!(e.rotate(&ct, 5), Err(Error::MissingRotationKey(5))));
    }

    #[test]
    fn mult_plain_levels_and_masking() {
        let e = engine(4);
        let ct = e.encrypt(&[2.0, 3.0]).unwrap();
        let one = PlainVec::constant(4, 1.0);
        let r = e.mult_plain(&ct, &one).unwrap();
        assert_eq!(e.decrypt(&r), vec![2.0, 3.0, 0.0, 0.0]);
        assert_eq!(r.level(), 24);

        let ct = e.encrypt(&[5.0, 6.0, 7.0, 8.0]).unwrap();
        let mask = PlainVec::new(vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(e.decrypt(&e.mult_plain(&ct, &mask).unwrap()), vec![5.0, 6.0, 0.0, 0.0]);

        let dead = e.encrypt_at(&[1.0], 0).unwrap();
        assert!(matches!(
            e.mult_plain(&dead, &one),
            Err(Error::LevelExhausted { .. })
        ));
    }

    #[test]
    fn mult_ct_takes_min_level() {
        let e = engine(4);
        let a = e.encrypt_at(&[2.0, -3.0], 5).unwrap();
        let b = e.encrypt_at(&[2.0, -3.0], 3).unwrap();
        let sq = e.mult_ct(&a, &b).unwrap();
        assert_eq!(e.decrypt(&sq), vec![4.0, 9.0, 0.0, 0.0]);
        assert_eq!(sq.level(), 2);
    }

    #[test]
    fn bootstrap_resets_to_reserve() {
        let e = engine(8);
        let ct = e.encrypt_at(&[1.5, -2.0], 1).unwrap();
        let b = e.bootstrap(&ct).unwrap();
        assert_eq!(b.level(), 15);
        assert_eq!(e.decrypt(&b), e.decrypt(&ct));
        assert_eq!(e.snapshot_counters().bootstraps, 1);
        e.bootstrap(&b).unwrap();
        assert_eq!(e.snapshot_counters().bootstraps, 2);
    }

    #[test]
    fn key_registration_is_idempotent() {
        let mut e = engine(64);
        e.register_rotation_keys([-1, 1, -8, 8]);
        assert_eq!(e.resident_key_count(), 4);
        assert_eq!(e.snapshot_counters().key_loads, 4);
        e.register_rotation_keys([1]);
        assert_eq!(e.resident_key_count(), 4);
        assert_eq!(e.snapshot_counters().key_loads, 4);
        e.unload_rotation_keys([8]);
        let ct = e.encrypt(&[1.0]).unwrap();
        assert!(matches!(e.rotate(&ct, 8), Err(Error::MissingRotationKey(8))));
    }

    #[test]
    fn counters_and_live_tracking() {
        let mut e = engine(8);
        assert_eq!(e.snapshot_counters(), OpCounters::default());
        e.register_rotation_keys([1]);
        let a = e.encrypt(&[1.0, 1.0]).unwrap();
        let b = e.encrypt(&[2.0, 3.0]).unwrap();
        let s = e.add(&a, &b).unwrap();
        assert_eq!(&e.decrypt(&s)[..2], &[3.0, 4.0]);
        let _r = e.rotate(&s, 1).unwrap();
        let c = e.snapshot_counters();
        assert_eq!(c.rotations, 1);
        assert_eq!(c.adds, 1);
        assert_eq!(e.live_ciphertexts(), 4);
        drop(a);
        drop(b);
        assert_eq!(e.live_ciphertexts(), 2);
        assert_eq!(e.snapshot_counters().peak_live_ciphertexts, 4);
    }

    #[test]
    fn context_mismatch_is_rejected() {
        let e1 = engine(4);
        let e2 = engine(4);
        let a = e1.encrypt(&[1.0]).unwrap();
        let b = e2.encrypt(&[1.0]).unwrap();
        assert!(matches!(e1.add(&a, &b), Err(Error::ContextMismatch)));
    }

    #[test]
    fn noise_stays_within_six_sigma() {
        let sigma = 1e-9;
        let e = Engine::new(EngineParams::new(1024).with_noise(sigma)).unwrap();
        let values: Vec<f64> = (0..1024).map(|i| i as f64 * 0.25).collect();
        let ct = e.encrypt(&values).unwrap();
        let r = e.mult_plain(&ct, &PlainVec::constant(1024, 1.0)).unwrap();
        let out = e.decrypt(&r);
        let max_dev = out
            .iter()
            .zip(&values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_dev <= 6.0 * sigma, "deviation {max_dev}");
        assert!(max_dev > 0.0);
    }

    #[test]
    fn rejects_bad_params() {
        assert!(Engine::new(EngineParams::new(12)).is_err());
        let mut p = EngineParams::new(16);
        p.bootstrap_reserve = 25;
        assert!(Engine::new(p).is_err());
    }
}
