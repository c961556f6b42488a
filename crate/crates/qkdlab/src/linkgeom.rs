//! Link geometry and radiometry.
//!
//! Positions are meters in a fixed local ground frame, times are seconds,
//! angles cross the API in degrees, and losses are decibels. A receiver
//! trajectory is a sequence of GPS-style samples (position + velocity at
//! typically 1 Hz); between samples the receiver is propagated with a
//! first-order hold, i.e. linear extrapolation from the most recent sample.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// Speed of light in vacuum, m/s (exact).
pub const SPEED_OF_LIGHT_M_S: f64 = 299_792_458.0;

/// Geocentric gravitational constant, m^3/s^2.
pub const EARTH_GM_M3_S2: f64 = 3.986_004_418e14;

/// Mean Earth radius, m.
pub const EARTH_RADIUS_M: f64 = 6.371e6;

#[derive(Debug, Error)]
pub enum LinkGeomError {
    #[error("trajectory has no samples")]
    EmptyTrajectory,
    #[error("trajectory timestamps are not strictly increasing at index {0}")]
    NonMonotonicTimes(usize),
    #[error("time {t} s precedes the first trajectory sample at {first} s")]
    BeforeTrajectory { t: f64, first: f64 },
    #[error("zero range between observer and target")]
    ZeroRange,
    #[error("orbit altitude must be positive, got {0} m")]
    NonPositiveAltitude(f64),
    #[error("invalid trajectory file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Trajectory
// ---------------------------------------------------------------------------

/// One GPS sample: position and velocity at a given time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t_s: f64,
    pub x_m: f64,
    pub y_m: f64,
    pub z_m: f64,
    pub vx_mps: f64,
    pub vy_mps: f64,
    pub vz_mps: f64,
}

impl TrajectorySample {
    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.x_m, self.y_m, self.z_m)
    }

    pub fn velocity(&self) -> Vector3<f64> {
        Vector3::new(self.vx_mps, self.vy_mps, self.vz_mps)
    }
}

/// Time-ordered receiver trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    samples: Vec<TrajectorySample>,
}

impl Trajectory {
    /// Builds a trajectory, requiring at least one sample and strictly
    /// increasing timestamps.
    pub fn new(samples: Vec<TrajectorySample>) -> Result<Self, LinkGeomError> {
        if samples.is_empty() {
            return Err(LinkGeomError::EmptyTrajectory);
        }
        for i in 1..samples.len() {
            if samples[i].t_s <= samples[i - 1].t_s {
                return Err(LinkGeomError::NonMonotonicTimes(i));
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[TrajectorySample] {
        &self.samples
    }

    pub fn start_time(&self) -> f64 {
        self.samples[0].t_s
    }

    pub fn end_time(&self) -> f64 {
        self.samples[self.samples.len() - 1].t_s
    }

    /// Sample spacing of the tail segment, used to bound extrapolation when a
    /// caller needs a notion of "covered" time span.
    pub fn tail_cadence(&self) -> f64 {
        match self.samples.len() {
            1 => 1.0,
            n => self.samples[n - 1].t_s - self.samples[n - 2].t_s,
        }
    }

    /// Index of the most recent sample at or before `t`.
    fn segment_index(&self, t: f64) -> Result<usize, LinkGeomError> {
        if t < self.start_time() {
            return Err(LinkGeomError::BeforeTrajectory {
                t,
                first: self.start_time(),
            });
        }
        let idx = self
            .samples
            .partition_point(|s| s.t_s <= t)
            .saturating_sub(1);
        Ok(idx)
    }

    /// Reads the `t_s,x_m,y_m,z_m,vx_mps,vy_mps,vz_mps` CSV schema.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self, LinkGeomError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut samples = Vec::new();
        for record in rdr.deserialize::<TrajectorySample>() {
            samples.push(record.map_err(|e| LinkGeomError::Format(e.to_string()))?);
        }
        Self::new(samples)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self, LinkGeomError> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn to_csv_writer<W: Write>(&self, writer: W) -> Result<(), LinkGeomError> {
        let mut wtr = csv::Writer::from_writer(writer);
        for s in &self.samples {
            wtr.serialize(s)
                .map_err(|e| LinkGeomError::Format(e.to_string()))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// First-order-hold position at time `t`: linear extrapolation from the most
/// recent sample at or before `t`. Times before the first sample are an error;
/// times past the last sample extrapolate from it.
pub fn interpolate_position(traj: &Trajectory, t: f64) -> Result<Vector3<f64>, LinkGeomError> {
    let i = traj.segment_index(t)?;
    let s = &traj.samples()[i];
    Ok(s.position() + s.velocity() * (t - s.t_s))
}

/// First-order-hold velocity at time `t` (the velocity of the governing sample).
pub fn interpolate_velocity(traj: &Trajectory, t: f64) -> Result<Vector3<f64>, LinkGeomError> {
    let i = traj.segment_index(t)?;
    Ok(traj.samples()[i].velocity())
}

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

/// One-way propagation delay between two points, seconds.
pub fn time_of_flight(tx: Vector3<f64>, rx: Vector3<f64>) -> f64 {
    (rx - tx).norm() / SPEED_OF_LIGHT_M_S
}

/// Apparent angular rate of the trajectory seen from `observer` at time `t`,
/// degrees per second: transverse speed divided by range.
pub fn angular_rate(
    traj: &Trajectory,
    observer: Vector3<f64>,
    t: f64,
) -> Result<f64, LinkGeomError> {
    let rel = interpolate_position(traj, t)? - observer;
    let range = rel.norm();
    if range == 0.0 {
        return Err(LinkGeomError::ZeroRange);
    }
    let v = interpolate_velocity(traj, t)?;
    let radial = rel.normalize() * v.dot(&rel.normalize());
    let transverse = v - radial;
    Ok((transverse.norm() / range).to_degrees())
}

/// Upper bound on the apparent angular rate of a circular-orbit satellite at
/// altitude `h` meters, degrees per second: orbital speed over zenith range.
pub fn leo_max_angular_rate(altitude_m: f64) -> Result<f64, LinkGeomError> {
    if altitude_m <= 0.0 {
        return Err(LinkGeomError::NonPositiveAltitude(altitude_m));
    }
    let v = (EARTH_GM_M3_S2 / (EARTH_RADIUS_M + altitude_m)).sqrt();
    Ok((v / altitude_m).to_degrees())
}

// ---------------------------------------------------------------------------
// Beam propagation and losses
// ---------------------------------------------------------------------------

/// Quasi-Gaussian beam described by its waist, wavelength and quality factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamModel {
    /// 1/e^2 intensity radius at the waist, meters.
    pub waist_radius_m: f64,
    /// Vacuum wavelength, meters.
    pub wavelength_m: f64,
    /// Beam quality factor (1 for an ideal Gaussian).
    pub m_squared: f64,
    /// Receiving aperture radius, meters.
    pub aperture_radius_m: f64,
}

impl BeamModel {
    /// 1/e^2 beam radius after propagating distance `z`:
    /// `w0 * sqrt(1 + (z * M^2 * lambda / (pi * w0^2))^2)`.
    pub fn beam_radius_at(&self, z_m: f64) -> f64 {
        let w0 = self.waist_radius_m;
        let q = z_m * self.m_squared * self.wavelength_m / (std::f64::consts::PI * w0 * w0);
        w0 * (1.0 + q * q).sqrt()
    }

    /// Geometric collection loss at distance `z` into the configured aperture.
    pub fn collection_loss_db(&self, z_m: f64) -> f64 {
        aperture_coupling_loss_db(self.beam_radius_at(z_m), self.aperture_radius_m)
    }
}

/// Beam quality factor that makes the modeled spot match a measured radius at
/// distance `z` (inverse of [`BeamModel::beam_radius_at`] in `M^2`).
pub fn m_squared_for_spot(
    waist_radius_m: f64,
    wavelength_m: f64,
    z_m: f64,
    spot_radius_m: f64,
) -> f64 {
    let ratio = spot_radius_m / waist_radius_m;
    let geom = (ratio * ratio - 1.0).max(0.0).sqrt();
    geom * std::f64::consts::PI * waist_radius_m * waist_radius_m / (z_m * wavelength_m)
}

/// Loss from truncating a Gaussian spot of radius `w` by a circular aperture
/// of radius `a`: `-10 log10(1 - exp(-2 (a/w)^2))` dB.
pub fn aperture_coupling_loss_db(spot_radius_m: f64, aperture_radius_m: f64) -> f64 {
    let r = aperture_radius_m / spot_radius_m;
    let collected = 1.0 - (-2.0 * r * r).exp();
    -10.0 * collected.log10()
}

/// Additive link-budget components, decibels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBudget {
    /// Diffraction / beam spill over the receiving aperture.
    pub diffraction_db: f64,
    /// Transmitter pointing jitter and turbulence-induced spread.
    pub tx_pointing_db: f64,
    /// Receiver pointing against its field of view.
    pub rx_pointing_db: f64,
    /// Everything static: optics transmission, filters, detector efficiency.
    pub fixed_db: f64,
}

impl LossBudget {
    pub fn total_db(&self) -> f64 {
        self.diffraction_db + self.tx_pointing_db + self.rx_pointing_db + self.fixed_db
    }
}
