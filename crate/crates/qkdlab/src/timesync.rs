//! Slot recovery from receiver time tags.
//!
//! The receiver only has a list of click timestamps on its own clock. Getting
//! back to transmitter slot indices takes three steps: subtract the modeled
//! time of flight (which drifts by ~15 ns/s while the receiver moves, enough
//! to smear the 12.5 ns pulse comb within a second), recover the comb phase
//! from a folded histogram, and keep only clicks inside a narrow coincidence
//! window around that phase. Everything here works on integer picoseconds —
//! a 0.16 ns window leaves no room for float drift.

use std::io::{Read, Write};

use nalgebra::Vector3;
use serde::Deserialize;
use thiserror::Error;

use crate::linkgeom::{interpolate_position, time_of_flight, LinkGeomError, Trajectory};
use crate::qkdsim::DetectionEvent;

/// Minimum number of events the phase search needs.
pub const MIN_PHASE_EVENTS: usize = 100;

#[derive(Debug, Error)]
pub enum TimeSyncError {
    #[error("invalid timing configuration: {0}")]
    InvalidConfig(String),
    #[error("phase search needs at least {need} events, got {got}")]
    InsufficientEvents { got: usize, need: usize },
    #[error("no pulse-phase lock: histogram contrast {contrast:.2} below threshold")]
    NoLock { contrast: f64 },
    #[error(transparent)]
    Geometry(#[from] LinkGeomError),
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Pulse-comb timing parameters, all in integer picoseconds.
#[derive(Debug, Clone, Copy)]
pub struct TimingConfig {
    pub pulse_period_ps: i64,
    pub coincidence_window_ps: i64,
    pub histogram_bins: usize,
    /// Phase lock is rejected below this peak-to-median histogram ratio.
    pub min_contrast: f64,
    /// Receiver clock rate error in seconds per second, measured from the
    /// receiver's t = 0; subtracted alongside the time of flight.
    pub clock_skew: f64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            pulse_period_ps: 12_500,
            coincidence_window_ps: 160,
            histogram_bins: 250,
            min_contrast: 3.0,
            clock_skew: 0.0,
        }
    }
}

impl TimingConfig {
    pub fn validate(&self) -> Result<(), TimeSyncError> {
        if self.pulse_period_ps <= 0 {
            return Err(TimeSyncError::InvalidConfig(format!(
                "pulse period {} ps must be positive",
                self.pulse_period_ps
            )));
        }
        if !(1..=self.pulse_period_ps).contains(&self.coincidence_window_ps) {
            return Err(TimeSyncError::InvalidConfig(format!(
                "window {} ps must lie in 1..={} ps",
                self.coincidence_window_ps, self.pulse_period_ps
            )));
        }
        if self.histogram_bins < 64 {
            return Err(TimeSyncError::InvalidConfig(format!(
                "{} histogram bins, need at least 64",
                self.histogram_bins
            )));
        }
        if !(self.min_contrast >= 1.0) {
            return Err(TimeSyncError::InvalidConfig("contrast threshold must be >= 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Time-of-flight correction
// ---------------------------------------------------------------------------

/// Events with propagation delay removed, plus the number dropped because
/// they precede the trajectory.
#[derive(Debug, Clone)]
pub struct CorrectedEvents {
    pub events: Vec<DetectionEvent>,
    pub rejected: usize,
}

/// Subtracts the modeled time of flight (and any configured clock skew) from
/// every event. The receiver position comes from the trajectory's first-order
/// hold, so within each trajectory second the removed delay varies linearly —
/// events past the last sample extrapolate on its velocity, events before the
/// first sample are rejected and counted.
pub fn correct_tof(
    events: &[DetectionEvent],
    traj: &Trajectory,
    tx: Vector3<f64>,
    cfg: &TimingConfig,
) -> Result<CorrectedEvents, TimeSyncError> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(events.len());
    let mut rejected = 0usize;
    for e in events {
        let t_s = e.timestamp_ps as f64 * 1e-12;
        let rx = match interpolate_position(traj, t_s) {
            Ok(p) => p,
            Err(LinkGeomError::BeforeTrajectory { .. }) => {
                rejected += 1;
                continue;
            }
            Err(other) => return Err(other.into()),
        };
        let tof_ps = (time_of_flight(tx, rx) * 1e12).round() as i64;
        let skew_ps = (cfg.clock_skew * e.timestamp_ps as f64).round() as i64;
        out.push(DetectionEvent {
            timestamp_ps: e.timestamp_ps - tof_ps - skew_ps,
            channel: e.channel,
        });
    }
    Ok(CorrectedEvents { events: out, rejected })
}

// ---------------------------------------------------------------------------
// Phase recovery
// ---------------------------------------------------------------------------

/// Recovered pulse-comb phase and the histogram contrast backing it.
#[derive(Debug, Clone, Copy)]
pub struct PhaseLock {
    /// Comb offset in `[0, period)` picoseconds.
    pub phase_ps: f64,
    /// Peak histogram bin over the median bin.
    pub contrast: f64,
}

/// Folds corrected timestamps modulo the pulse period, finds the peak bin and
/// returns the circular mean of the events in its ±2-bin neighborhood.
/// Fails with [`TimeSyncError::NoLock`] when the peak does not stand out of
/// the background (contrast below `min_contrast`).
pub fn find_phase(events: &[DetectionEvent], cfg: &TimingConfig) -> Result<PhaseLock, TimeSyncError> {
    cfg.validate()?;
    if events.len() < MIN_PHASE_EVENTS {
        return Err(TimeSyncError::InsufficientEvents {
            got: events.len(),
            need: MIN_PHASE_EVENTS,
        });
    }
    let period = cfg.pulse_period_ps;
    let bins = cfg.histogram_bins;
    let bin_of = |ts: i64| -> usize {
        let r = ts.rem_euclid(period);
        ((r as i128 * bins as i128 / period as i128) as usize).min(bins - 1)
    };

    let mut counts = vec![0u64; bins];
    for e in events {
        counts[bin_of(e.timestamp_ps)] += 1;
    }
    let peak = counts
        .iter()
        .enumerate()
        .max_by_key(|(_, c)| **c)
        .map(|(i, _)| i)
        .unwrap();
    let mut sorted = counts.clone();
    sorted.sort_unstable();
    let median = sorted[bins / 2] as f64;
    let contrast = if median > 0.0 { counts[peak] as f64 / median } else { f64::INFINITY };
    if contrast < cfg.min_contrast {
        return Err(TimeSyncError::NoLock { contrast });
    }

    // Circular mean over the peak neighborhood; the unit-vector form handles
    // a peak sitting on the fold seam.
    let tau = std::f64::consts::TAU;
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for e in events {
        let b = bin_of(e.timestamp_ps);
        let dist = (b as i64 - peak as i64).rem_euclid(bins as i64).min(
            (peak as i64 - b as i64).rem_euclid(bins as i64),
        );
        if dist <= 2 {
            let theta = e.timestamp_ps.rem_euclid(period) as f64 / period as f64 * tau;
            s += theta.sin();
            c += theta.cos();
        }
    }
    let phase_ps = (s.atan2(c) / tau * period as f64).rem_euclid(period as f64);
    Ok(PhaseLock { phase_ps, contrast })
}

// ---------------------------------------------------------------------------
// Coincidence window
// ---------------------------------------------------------------------------

/// One event mapped onto the slot grid. `residual_ps` is the circular
/// distance from the recovered phase, in `[-period/2, period/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotAssignment {
    pub slot: i64,
    pub channel: u8,
    pub accepted: bool,
    pub residual_ps: i64,
}

/// Assigns each corrected event to its nearest slot and flags whether it
/// falls inside the coincidence window. The window is closed: a residual of
/// exactly half the window is accepted, so runs reproduce bit-exactly.
pub fn apply_window(
    events: &[DetectionEvent],
    phase_ps: f64,
    cfg: &TimingConfig,
) -> Result<Vec<SlotAssignment>, TimeSyncError> {
    cfg.validate()?;
    let period = cfg.pulse_period_ps;
    let window = cfg.coincidence_window_ps;
    let phase = phase_ps.round() as i64;
    Ok(events
        .iter()
        .map(|e| {
            let shifted = e.timestamp_ps - phase;
            let slot = (shifted + period / 2).div_euclid(period);
            let residual = shifted - slot * period;
            SlotAssignment {
                slot,
                channel: e.channel,
                accepted: 2 * residual.abs() <= window,
                residual_ps: residual,
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

pub fn write_assignment_csv<W: Write>(
    writer: W,
    rows: &[SlotAssignment],
) -> Result<(), TimeSyncError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["slot", "channel", "accepted", "residual_ps"])
        .map_err(|e| TimeSyncError::Format { line: 0, msg: e.to_string() })?;
    for r in rows {
        w.write_record(&[
            r.slot.to_string(),
            r.channel.to_string(),
            r.accepted.to_string(),
            r.residual_ps.to_string(),
        ])
        .map_err(|e| TimeSyncError::Format { line: 0, msg: e.to_string() })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_assignment_csv<R: Read>(reader: R) -> Result<Vec<SlotAssignment>, TimeSyncError> {
    #[derive(Deserialize)]
    struct Raw {
        slot: i64,
        channel: u8,
        accepted: bool,
        residual_ps: i64,
    }
    let mut rdr = csv::Reader::from_reader(reader);
    let mut rows = Vec::new();
    for (i, record) in rdr.deserialize::<Raw>().enumerate() {
        let line = i + 2;
        let raw = record.map_err(|e| TimeSyncError::Format { line, msg: e.to_string() })?;
        if raw.channel > 3 {
            return Err(TimeSyncError::Format {
                line,
                msg: format!("channel {} outside 0..=3", raw.channel),
            });
        }
        rows.push(SlotAssignment {
            slot: raw.slot,
            channel: raw.channel,
            accepted: raw.accepted,
            residual_ps: raw.residual_ps,
        });
    }
    Ok(rows)
}
