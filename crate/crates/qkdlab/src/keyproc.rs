//! Classical post-processing: sifting, burst filtering, decoy-state bounds,
//! syndrome reconciliation, privacy amplification, and key-length accounting.
//!
//! The stages compose into a pipeline that only ever shortens the key:
//! slot-matched detections become raw bits, basis comparison sifts them,
//! reconciliation repairs the receiver's copy while counting every disclosed
//! bit, and a seeded Toeplitz hash compresses the result to its secure
//! length. Bits are carried as `Vec<u8>` of 0/1 values throughout.

mod ldpc;

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::Rng;
use thiserror::Error;

use crate::qkdsim::{channel_basis, channel_bit, ChopperFate, IntensityClass, PulseRecord};
use crate::rng::stage_rng;
use crate::timesync::SlotAssignment;

#[derive(Debug, Error)]
pub enum KeyProcError {
    #[error("binary entropy argument {0} outside [0, 1]")]
    EntropyDomain(f64),
    #[error("invalid decoy inputs: {0}")]
    InvalidDecoyInputs(String),
    #[error("single-photon yield bound {0:.3e} is not positive")]
    NoSinglePhotonBound(f64),
    #[error("invalid reconciliation parameters: {0}")]
    InvalidReconciliation(String),
    #[error("reconciliation did not converge within {iterations} iterations")]
    ReconciliationFailed { iterations: usize },
    #[error("verification hash mismatch after decoding")]
    VerificationFailed,
    #[error("requested {want} output bits from {have} input bits")]
    KeyTooLong { want: usize, have: usize },
    #[error("length mismatch: got {0}, expected {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid rate summary: {0}")]
    InvalidRates(String),
}

// ---------------------------------------------------------------------------
// Entropy
// ---------------------------------------------------------------------------

/// Shannon entropy of a biased coin, in bits.
pub fn binary_entropy(x: f64) -> Result<f64, KeyProcError> {
    if !(0.0..=1.0).contains(&x) {
        return Err(KeyProcError::EntropyDomain(x));
    }
    Ok(h2(x))
}

fn h2(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    -x * x.log2() - (1.0 - x) * (1.0 - x).log2()
}

// ---------------------------------------------------------------------------
// Sifting
// ---------------------------------------------------------------------------

/// Bit streams surviving slot matching, with per-bit provenance.
///
/// `tx_bits`, `rx_bits`, `classes`, and `seconds` run in parallel over the
/// sifted (basis-matched) bits. `raw_bits`/`raw_seconds` cover every resolved
/// open-slot detection before basis comparison, so `raw_bits.len()` is the
/// raw key length and is never smaller than the sifted length.
#[derive(Debug, Clone, Default)]
pub struct SiftedBlock {
    pub tx_bits: Vec<u8>,
    pub rx_bits: Vec<u8>,
    pub classes: Vec<IntensityClass>,
    pub seconds: Vec<u32>,
    pub raw_bits: Vec<u8>,
    pub raw_seconds: Vec<u32>,
}

impl SiftedBlock {
    pub fn len(&self) -> usize {
        self.tx_bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tx_bits.is_empty()
    }

    pub fn count_class(&self, class: IntensityClass) -> usize {
        self.classes.iter().filter(|c| **c == class).count()
    }

    /// Observed error fraction among sifted bits of one class, or `None`
    /// when the class contributed no bits.
    pub fn qber(&self, class: IntensityClass) -> Option<f64> {
        let mut total = 0u64;
        let mut errors = 0u64;
        for i in 0..self.len() {
            if self.classes[i] == class {
                total += 1;
                errors += u64::from(self.tx_bits[i] != self.rx_bits[i]);
            }
        }
        (total > 0).then(|| errors as f64 / total as f64)
    }

    /// Sifted detections per second index, for burst filtering.
    pub fn counts_by_second(&self) -> BTreeMap<u32, u64> {
        let mut counts = BTreeMap::new();
        for s in &self.seconds {
            *counts.entry(*s).or_insert(0u64) += 1;
        }
        counts
    }

    /// Copy of the block restricted to the listed second indices.
    pub fn retain_seconds(&self, keep: &[usize]) -> SiftedBlock {
        let keep: HashSet<u32> = keep.iter().map(|s| *s as u32).collect();
        let mut out = SiftedBlock::default();
        for i in 0..self.len() {
            if keep.contains(&self.seconds[i]) {
                out.tx_bits.push(self.tx_bits[i]);
                out.rx_bits.push(self.rx_bits[i]);
                out.classes.push(self.classes[i]);
                out.seconds.push(self.seconds[i]);
            }
        }
        for i in 0..self.raw_bits.len() {
            if keep.contains(&self.raw_seconds[i]) {
                out.raw_bits.push(self.raw_bits[i]);
                out.raw_seconds.push(self.raw_seconds[i]);
            }
        }
        out
    }

    /// Transmitter/receiver bit pairs of one class, for reconciliation.
    pub fn class_bits(&self, class: IntensityClass) -> (Vec<u8>, Vec<u8>) {
        let mut tx = Vec::new();
        let mut rx = Vec::new();
        for i in 0..self.len() {
            if self.classes[i] == class {
                tx.push(self.tx_bits[i]);
                rx.push(self.rx_bits[i]);
            }
        }
        (tx, rx)
    }
}

/// Matches accepted slot assignments against the emitted pulses.
///
/// Only open-chopper signal and decoy slots produce bits. A slot with several
/// accepted detections is resolved by a fair seeded draw among them; the
/// surviving detection's basis is then compared with the transmitted one.
/// No matched slots yields an empty block.
pub fn sift(
    truth: &[PulseRecord],
    assignments: &[SlotAssignment],
    slots_per_second: i64,
    seed: u64,
) -> SiftedBlock {
    assert!(slots_per_second > 0);
    let by_slot: HashMap<i64, &PulseRecord> =
        truth.iter().map(|rec| (rec.slot, rec)).collect();

    let mut accepted: Vec<&SlotAssignment> =
        assignments.iter().filter(|a| a.accepted).collect();
    accepted.sort_by_key(|a| a.slot);

    let mut rng = stage_rng(seed, "sift");
    let mut block = SiftedBlock::default();
    let mut i = 0;
    while i < accepted.len() {
        let mut j = i + 1;
        while j < accepted.len() && accepted[j].slot == accepted[i].slot {
            j += 1;
        }
        let pick = if j - i == 1 { i } else { i + rng.gen_range(0..j - i) };
        let event = accepted[pick];
        i = j;

        let Some(rec) = by_slot.get(&event.slot) else { continue };
        if rec.fate != ChopperFate::Open || rec.class == IntensityClass::Vacuum {
            continue;
        }
        let second = rec.slot.div_euclid(slots_per_second) as u32;
        let rx_bit = channel_bit(event.channel);
        block.raw_bits.push(rx_bit);
        block.raw_seconds.push(second);
        if channel_basis(event.channel) == rec.basis {
            block.tx_bits.push(rec.bit);
            block.rx_bits.push(rx_bit);
            block.classes.push(rec.class);
            block.seconds.push(second);
        }
    }
    block
}

/// Indices of seconds whose detection count strictly exceeds `threshold`.
pub fn snr_filter(per_second_counts: &[u64], threshold: u64) -> Vec<usize> {
    per_second_counts
        .iter()
        .enumerate()
        .filter(|(_, c)| **c > threshold)
        .map(|(i, _)| i)
        .collect()
}

// ---------------------------------------------------------------------------
// Decoy-state bounds
// ---------------------------------------------------------------------------

/// Per-class measured rates feeding the single-photon bounds.
///
/// Gains are detections per emitted slot of the class; `background_yield` is
/// the detection probability for vacuum slots.
#[derive(Debug, Clone, Copy)]
pub struct DecoyInputs {
    pub mu: f64,
    pub nu: f64,
    pub gain_signal: f64,
    pub gain_decoy: f64,
    pub qber_signal: f64,
    pub qber_decoy: f64,
    pub background_yield: f64,
}

impl DecoyInputs {
    pub fn validate(&self) -> Result<(), KeyProcError> {
        let bad = |msg: String| Err(KeyProcError::InvalidDecoyInputs(msg));
        if !(self.nu > 0.0 && self.mu > self.nu) {
            return bad(format!(
                "intensities must satisfy 0 < decoy < signal, got {} and {}",
                self.nu, self.mu
            ));
        }
        for (name, v) in [
            ("gain_signal", self.gain_signal),
            ("gain_decoy", self.gain_decoy),
            ("background_yield", self.background_yield),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        for (name, v) in [("qber_signal", self.qber_signal), ("qber_decoy", self.qber_decoy)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Lower bounds on the single-photon yield and gain and an upper bound on the
/// single-photon error rate. `clamped` reports whether any bound had to be
/// pulled back into its physical range.
#[derive(Debug, Clone, Copy)]
pub struct DecoyEstimate {
    pub single_photon_yield: f64,
    pub single_photon_gain: f64,
    pub single_photon_error: f64,
    pub clamped: bool,
}

/// Two-intensity bounds on the single-photon contribution.
///
/// The weaker intensity's gain pins the yield from below; the error bound
/// charges all decoy errors beyond the background to single photons. A yield
/// bound at or below zero carries no information and is reported as an error.
pub fn decoy_bounds(inputs: &DecoyInputs) -> Result<DecoyEstimate, KeyProcError> {
    inputs.validate()?;
    let DecoyInputs { mu, nu, gain_signal, gain_decoy, qber_decoy, background_yield, .. } =
        *inputs;

    let yield_raw = mu / (mu * nu - nu * nu)
        * (gain_decoy * nu.exp()
            - gain_signal * mu.exp() * nu * nu / (mu * mu)
            - (mu * mu - nu * nu) / (mu * mu) * background_yield);
    if yield_raw <= 0.0 {
        return Err(KeyProcError::NoSinglePhotonBound(yield_raw));
    }

    let mut clamped = false;
    let mut clamp = |v: f64, lo: f64, hi: f64| {
        if v < lo || v > hi {
            clamped = true;
        }
        v.clamp(lo, hi)
    };
    let single_photon_yield = clamp(yield_raw, 0.0, 1.0);
    let gain_raw = single_photon_yield * mu * (-mu).exp();
    let single_photon_gain = clamp(gain_raw, 0.0, gain_signal);
    let error_raw =
        (qber_decoy * gain_decoy * nu.exp() - 0.5 * background_yield) / (single_photon_yield * nu);
    let single_photon_error = clamp(error_raw, 0.0, 0.5);
    Ok(DecoyEstimate { single_photon_yield, single_photon_gain, single_photon_error, clamped })
}

// ---------------------------------------------------------------------------
// Reconciliation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct ReconciliationConfig {
    /// Syndrome overhead target relative to the Shannon limit for the
    /// estimated error rate; the syndrome gets `ceil(efficiency * H2(q) * n)`
    /// bits.
    pub efficiency: f64,
    /// Disclosure ceiling that sizes the rescue budget: whatever headroom it
    /// leaves above the syndrome and hash may be spent revealing the
    /// least-reliable positions of a block that failed to converge, which
    /// recovers most of them.
    pub max_efficiency: f64,
    pub max_iterations: usize,
    /// Width of the verification hash, charged to leakage alongside the
    /// syndrome.
    pub hash_bits: usize,
    pub seed: u64,
}

impl Default for ReconciliationConfig {
    fn default() -> Self {
        ReconciliationConfig {
            efficiency: 1.15,
            max_efficiency: 1.20,
            max_iterations: 150,
            hash_bits: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReconciliationOutcome {
    /// The receiver's block after correction; equals the transmitter's block
    /// whenever verification passed, up to the hash collision probability.
    pub corrected: Vec<u8>,
    /// Syndrome plus verification bits disclosed for this block.
    pub leaked_bits: usize,
    /// Realized leakage relative to the Shannon limit at the estimated error
    /// rate; zero when no syndrome was needed.
    pub efficiency: f64,
    pub iterations: usize,
}

/// Repairs the receiver's copy of a block from the transmitter's syndrome.
///
/// The transmitter discloses a sparse-parity syndrome sized for
/// `qber_estimate` plus a short polynomial verification hash; the receiver
/// runs belief propagation toward that syndrome. Failure to converge or a
/// hash mismatch discards the block (the caller counts it); success means the
/// two copies agree except with probability around `2^-hash_bits`.
pub fn error_correct(
    tx_bits: &[u8],
    rx_bits: &[u8],
    qber_estimate: f64,
    cfg: &ReconciliationConfig,
) -> Result<ReconciliationOutcome, KeyProcError> {
    if tx_bits.len() != rx_bits.len() {
        return Err(KeyProcError::LengthMismatch(rx_bits.len(), tx_bits.len()));
    }
    let n = tx_bits.len();
    if n == 0 {
        return Err(KeyProcError::InvalidReconciliation("empty block".into()));
    }
    if !(1.0..10.0).contains(&cfg.efficiency) {
        return Err(KeyProcError::InvalidReconciliation(format!(
            "efficiency {} outside [1, 10)",
            cfg.efficiency
        )));
    }
    if cfg.max_efficiency < cfg.efficiency {
        return Err(KeyProcError::InvalidReconciliation(format!(
            "efficiency ceiling {} below target {}",
            cfg.max_efficiency, cfg.efficiency
        )));
    }
    if cfg.hash_bits == 0 || cfg.hash_bits > 61 {
        return Err(KeyProcError::InvalidReconciliation(format!(
            "hash width {} outside 1..=61",
            cfg.hash_bits
        )));
    }
    if !(0.0..=0.5).contains(&qber_estimate) {
        return Err(KeyProcError::InvalidReconciliation(format!(
            "error estimate {qber_estimate} outside [0, 0.5]"
        )));
    }

    let entropy = h2(qber_estimate);
    let m = (cfg.efficiency * entropy * n as f64).ceil() as usize;
    if m >= n {
        return Err(KeyProcError::InvalidReconciliation(format!(
            "error rate {qber_estimate} needs a syndrome as long as the block"
        )));
    }

    let (corrected, iterations, revealed) = if m == 0 {
        (rx_bits.to_vec(), 0, 0)
    } else {
        let budget = ((cfg.max_efficiency * entropy * n as f64).floor() as usize)
            .saturating_sub(m + cfg.hash_bits);
        let code = ldpc::code_for(n, m);
        let target = code.syndrome(tx_bits);
        let (word, iters, disclosed) = code
            .decode_assisted(rx_bits, &target, qber_estimate, cfg.max_iterations, budget, |i| {
                tx_bits[i]
            })
            .ok_or(KeyProcError::ReconciliationFailed { iterations: cfg.max_iterations })?;
        (word, iters, disclosed.len())
    };

    let key = hash_key(cfg.seed);
    if poly_hash(&corrected, key, cfg.hash_bits) != poly_hash(tx_bits, key, cfg.hash_bits) {
        return Err(KeyProcError::VerificationFailed);
    }
    let leaked_bits = m + revealed + cfg.hash_bits;
    let efficiency = if m == 0 { 0.0 } else { leaked_bits as f64 / (entropy * n as f64) };
    Ok(ReconciliationOutcome { corrected, leaked_bits, efficiency, iterations })
}

fn hash_key(seed: u64) -> u64 {
    const P: u64 = (1 << 61) - 1;
    let mut rng = stage_rng(seed, "verify-key");
    2 + rng.gen::<u64>() % (P - 2)
}

/// Polynomial hash over the Mersenne prime 2^61 - 1, truncated to
/// `bits_out` low bits.
fn poly_hash(bits: &[u8], key: u64, bits_out: usize) -> u64 {
    const P: u128 = (1 << 61) - 1;
    let mut h: u128 = 0;
    for b in bits {
        h = (h * key as u128 + *b as u128) % P;
    }
    (h as u64) & ((1u64 << bits_out) - 1)
}

// ---------------------------------------------------------------------------
// Privacy amplification
// ---------------------------------------------------------------------------

/// Applies an explicit Toeplitz matrix given by its defining bits.
///
/// `diagonal` holds the reversed first row followed by the rest of the first
/// column, `bits.len() + final_length - 1` entries in total; entry `(j, i)` of
/// the matrix is `diagonal[n - 1 + j - i]`. Mostly a test hook: a diagonal
/// with only `diagonal[n - 1]` set yields an identity passthrough.
pub fn toeplitz_hash(
    bits: &[u8],
    final_length: usize,
    diagonal: &[u8],
) -> Result<Vec<u8>, KeyProcError> {
    let n = bits.len();
    let m = final_length;
    if m > n {
        return Err(KeyProcError::KeyTooLong { want: m, have: n });
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    if diagonal.len() != n + m - 1 {
        return Err(KeyProcError::LengthMismatch(diagonal.len(), n + m - 1));
    }

    // Row j of the matrix reads diagonal[j..j + n] against the reversed
    // input, so pack both as bitsets and slide a word-aligned window.
    let n_words = n.div_ceil(64);
    let mut x = vec![0u64; n_words];
    for (i, b) in bits.iter().rev().enumerate() {
        x[i / 64] |= u64::from(b & 1) << (i % 64);
    }
    let mut w = vec![0u64; (n + m - 1).div_ceil(64) + 1];
    for (i, b) in diagonal.iter().enumerate() {
        w[i / 64] |= u64::from(b & 1) << (i % 64);
    }

    let mut out = Vec::with_capacity(m);
    for j in 0..m {
        let base = j / 64;
        let shift = (j % 64) as u32;
        let mut acc = 0u64;
        for (k, xw) in x.iter().enumerate() {
            let mut window = w[base + k] >> shift;
            if shift > 0 {
                window |= w[base + k + 1] << (64 - shift);
            }
            acc ^= xw & window;
        }
        out.push((acc.count_ones() & 1) as u8);
    }
    Ok(out)
}

/// Compresses a reconciled key with a Toeplitz matrix drawn from `seed`.
///
/// The family is XOR-universal, so for any two distinct inputs the outputs
/// collide with probability exactly `2^-final_length` over the seed choice.
pub fn privacy_amplify(
    bits: &[u8],
    final_length: usize,
    seed: u64,
) -> Result<Vec<u8>, KeyProcError> {
    if final_length > bits.len() {
        return Err(KeyProcError::KeyTooLong { want: final_length, have: bits.len() });
    }
    if final_length == 0 {
        return Ok(Vec::new());
    }
    let len = bits.len() + final_length - 1;
    let mut rng = stage_rng(seed, "toeplitz");
    let mut bytes = vec![0u8; len.div_ceil(8)];
    rand::RngCore::fill_bytes(&mut rng, &mut bytes);
    let diagonal: Vec<u8> =
        (0..len).map(|i| (bytes[i / 8] >> (i % 8)) & 1).collect();
    toeplitz_hash(bits, final_length, &diagonal)
}

// ---------------------------------------------------------------------------
// Key length
// ---------------------------------------------------------------------------

/// Distillable bits from `n_sifted` sifted signal detections, in the
/// long-duration limit: the single-photon fraction earns its phase-error
/// entropy margin, and reconciliation at `ec_efficiency` spends the full
/// observed-error entropy. Floors at zero when leakage wins.
pub fn asymptotic_key_length(
    n_sifted: u64,
    gain_signal: f64,
    qber_signal: f64,
    estimate: &DecoyEstimate,
    ec_efficiency: f64,
) -> u64 {
    let single_fraction = estimate.single_photon_gain / gain_signal;
    let rate = single_fraction * (1.0 - h2(estimate.single_photon_error))
        - ec_efficiency * h2(qber_signal.clamp(0.0, 1.0));
    let bits = (n_sifted as f64 * rate).floor();
    if bits > 0.0 {
        bits as u64
    } else {
        0
    }
}

// ---------------------------------------------------------------------------
// Finite-size duration
// ---------------------------------------------------------------------------

/// Steady per-second rates summarizing a run, for extrapolating how long the
/// link must hold before estimation error stops eating the key.
#[derive(Debug, Clone, Copy)]
pub struct ObservedRates {
    pub mu: f64,
    pub nu: f64,
    pub signal_slots_per_s: f64,
    pub decoy_slots_per_s: f64,
    pub vacuum_slots_per_s: f64,
    pub gain_signal: f64,
    pub gain_decoy: f64,
    pub background_yield: f64,
    pub qber_signal: f64,
    pub qber_decoy: f64,
    pub ec_efficiency: f64,
}

impl ObservedRates {
    fn validate(&self) -> Result<(), KeyProcError> {
        let bad = |msg: String| Err(KeyProcError::InvalidRates(msg));
        for (name, v) in [
            ("signal_slots_per_s", self.signal_slots_per_s),
            ("decoy_slots_per_s", self.decoy_slots_per_s),
            ("vacuum_slots_per_s", self.vacuum_slots_per_s),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} = {v} must be positive"));
            }
        }
        if !(self.ec_efficiency >= 1.0) {
            return bad(format!("ec_efficiency = {} below 1", self.ec_efficiency));
        }
        self.decoy_inputs().validate()
    }

    fn decoy_inputs(&self) -> DecoyInputs {
        DecoyInputs {
            mu: self.mu,
            nu: self.nu,
            gain_signal: self.gain_signal,
            gain_decoy: self.gain_decoy,
            qber_signal: self.qber_signal,
            qber_decoy: self.qber_decoy,
            background_yield: self.background_yield,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FiniteSizeResult {
    /// Smallest whole-second duration with a positive worst-case key, or
    /// `None` when no duration achieves one.
    pub duration_s: Option<u64>,
    /// Worst-case key rate in bits per second at that duration (zero when
    /// `duration_s` is `None`).
    pub worst_key_rate: f64,
}

/// How long the observed rates must persist before the key survives
/// statistical estimation error.
///
/// Each of the five measured parameters carries a binomial standard error
/// shrinking as `1/sqrt(T)`; the key is evaluated with every combination of
/// `sigmas`-standard-error shifts and the worst combination must stay
/// positive. With `sigmas = 0` this reduces to the first second at which the
/// long-run rate is positive.
pub fn finite_size_duration(
    rates: &ObservedRates,
    sigmas: f64,
) -> Result<FiniteSizeResult, KeyProcError> {
    rates.validate()?;
    const T_CAP: u64 = 100_000_000;

    let worst_key = |t: u64| -> f64 {
        let t = t as f64;
        let n_signal = rates.signal_slots_per_s * t;
        let n_decoy = rates.decoy_slots_per_s * t;
        let n_vacuum = rates.vacuum_slots_per_s * t;
        let stderr = |p: f64, trials: f64| (p * (1.0 - p) / trials.max(1.0)).sqrt();
        let mut worst = f64::INFINITY;
        for corner in 0u32..32 {
            let sign = |bit: u32| if corner >> bit & 1 == 1 { sigmas } else { -sigmas };
            let gain_signal = (rates.gain_signal
                + sign(0) * stderr(rates.gain_signal, n_signal))
            .clamp(1e-12, 1.0);
            let gain_decoy = (rates.gain_decoy + sign(1) * stderr(rates.gain_decoy, n_decoy))
                .clamp(1e-12, 1.0);
            let background_yield = (rates.background_yield
                + sign(2) * stderr(rates.background_yield, n_vacuum))
            .clamp(0.0, 1.0);
            let qber_signal = (rates.qber_signal
                + sign(3) * stderr(rates.qber_signal, gain_signal * n_signal / 2.0))
            .clamp(0.0, 0.5);
            let qber_decoy = (rates.qber_decoy
                + sign(4) * stderr(rates.qber_decoy, gain_decoy * n_decoy / 2.0))
            .clamp(0.0, 0.5);
            let inputs = DecoyInputs {
                mu: rates.mu,
                nu: rates.nu,
                gain_signal,
                gain_decoy,
                qber_signal,
                qber_decoy,
                background_yield,
            };
            let bits = match decoy_bounds(&inputs) {
                Ok(est) => {
                    let n_sifted = (gain_signal * n_signal / 2.0).floor() as u64;
                    asymptotic_key_length(
                        n_sifted,
                        gain_signal,
                        qber_signal,
                        &est,
                        rates.ec_efficiency,
                    ) as f64
                }
                Err(_) => 0.0,
            };
            worst = worst.min(bits);
        }
        worst
    };

    if worst_key(T_CAP) <= 0.0 {
        return Ok(FiniteSizeResult { duration_s: None, worst_key_rate: 0.0 });
    }
    let mut lo = 1u64;
    let mut hi = T_CAP;
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if worst_key(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(FiniteSizeResult { duration_s: Some(lo), worst_key_rate: worst_key(lo) / lo as f64 })
}

// ---------------------------------------------------------------------------
// Key material
// ---------------------------------------------------------------------------

/// Every intermediate form of one distilled key, plus the disclosure tally.
#[derive(Debug, Clone, Default)]
pub struct KeyMaterial {
    pub raw: Vec<u8>,
    pub sifted: Vec<u8>,
    pub corrected: Vec<u8>,
    pub final_key: Vec<u8>,
    pub leaked_bits: usize,
}

impl KeyMaterial {
    /// Checks that each stage only ever shortened the key and that all bits
    /// are 0/1.
    pub fn validate(&self) -> Result<(), KeyProcError> {
        let lengths =
            [self.raw.len(), self.sifted.len(), self.corrected.len(), self.final_key.len()];
        for pair in lengths.windows(2) {
            if pair[1] > pair[0] {
                return Err(KeyProcError::KeyTooLong { want: pair[1], have: pair[0] });
            }
        }
        for stage in [&self.raw, &self.sifted, &self.corrected, &self.final_key] {
            if stage.iter().any(|b| *b > 1) {
                return Err(KeyProcError::InvalidRates("bits must be 0 or 1".into()));
            }
        }
        Ok(())
    }

    pub fn final_hex(&self) -> String {
        bits_to_hex(&self.final_key)
    }

    pub fn final_bit_string(&self) -> String {
        bits_to_bit_string(&self.final_key)
    }
}

/// Lowercase hex, first bit highest within each nibble; a trailing partial
/// nibble is padded with zeros on the right.
pub fn bits_to_hex(bits: &[u8]) -> String {
    bits.chunks(4)
        .map(|nib| {
            let mut v = 0u8;
            for (i, b) in nib.iter().enumerate() {
                v |= (b & 1) << (3 - i);
            }
            char::from_digit(v as u32, 16).unwrap()
        })
        .collect()
}

pub fn bits_to_bit_string(bits: &[u8]) -> String {
    bits.iter().map(|b| if b & 1 == 1 { '1' } else { '0' }).collect()
}

// ---------------------------------------------------------------------------
