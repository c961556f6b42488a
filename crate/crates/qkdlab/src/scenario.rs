//! Scenario files and the end-to-end drive-by session pipeline.
//!
//! A scenario gathers every knob of one session — source, detector, timing,
//! tracking, beam geometry, trajectory, loss model, polarization drift and
//! the burst filter — in a single TOML file. [`simulate`] runs the whole
//! chain and leaves behind the records a real session would produce:
//! detection events, the transmitter's pulse log, trajectory, loss and
//! deviation series, tomography counts. The analysis half ([`analyze`])
//! reads those files back like any recorded session; `simulate` finishes by
//! calling it on its own output, so a run and its re-analysis produce
//! byte-identical reports by construction.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Display;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keyproc::{
    asymptotic_key_length, bits_to_hex, decoy_bounds, error_correct, privacy_amplify, sift,
    snr_filter, DecoyInputs, ReconciliationConfig,
};
use crate::linkgeom::{interpolate_position, time_of_flight, BeamModel, Trajectory, TrajectorySample};
use crate::polcomp::{
    calibrated_states, measure_channel, optimize_compensation, predicted_qber, read_counts_csv,
    stokes_from_counts, write_counts_csv, CountsRow, OptimizerOptions, PolarizationTransform,
    ProjectorCounts, StokesState, WaveplateStack,
};
use crate::qkdsim::{
    read_event_meta, read_truth_csv, transmit_threaded, write_event_csv, write_event_meta,
    write_truth_csv, ChopperFate, DetectionEvent, DetectorConfig, EventLogMeta, IntensityClass,
    LossProfile, PulseRecord, PulseSource, SourceConfig,
};
use crate::rng::derive_seed;
use crate::timesync::{
    apply_window, correct_tof, find_phase, PhaseLock, SlotAssignment, TimeSyncError, TimingConfig,
};
use crate::tracksim::{
    pointing_loss, simulate_tracking, write_deviation_csv, ControllerParams, TargetPath,
    TrackingSample, VibrationModel,
};

/// Straight drive-by trajectory: the receiver moves along the x axis at
/// constant speed, `standoff_m` away from the transmitter at the origin,
/// entering the `road_length_m` segment at `t = 0`. GPS samples at 1 Hz.
pub fn straight_pass_trajectory(
    standoff_m: f64,
    road_length_m: f64,
    speed_mps: f64,
    n_samples: usize,
) -> Trajectory {
    let samples = (0..n_samples)
        .map(|i| {
            let t = i as f64;
            TrajectorySample {
                t_s: t,
                x_m: -road_length_m / 2.0 + speed_mps * t,
                y_m: standoff_m,
                z_m: 0.0,
                vx_mps: speed_mps,
                vy_mps: 0.0,
                vz_mps: 0.0,
            }
        })
        .collect();
    Trajectory::new(samples).expect("strictly increasing sample times")
}

// ---------------------------------------------------------------------------
// Run directory layout
// ---------------------------------------------------------------------------

pub const SCENARIO_FILE: &str = "scenario.toml";
pub const TRAJECTORY_FILE: &str = "traj.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const META_FILE: &str = "events.meta.json";
pub const TRUTH_FILE: &str = "truth.csv";
pub const LOSS_FILE: &str = "loss.csv";
pub const DEVIATION_FILE: &str = "deviation.csv";
pub const TOMOGRAPHY_FILE: &str = "tomo.csv";
pub const REPORT_FILE: &str = "report.json";
pub const COUNTS_SERIES_FILE: &str = "counts.csv";
pub const TOF_SERIES_FILE: &str = "tof.csv";
pub const COMPENSATION_SERIES_FILE: &str = "compensation.csv";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("no pulse lock: {0}")]
    NoLock(String),
    #[error("{stage}: {cause}")]
    Stage { stage: &'static str, cause: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn config<E: Display>(e: E) -> PipelineError {
    PipelineError::Config(e.to_string())
}

fn stage<E: Display>(name: &'static str) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::Stage { stage: name, cause: e.to_string() }
}

/// The transmitter terminal sits at the origin of the trajectory frame.
fn transmitter_position() -> Vector3<f64> {
    Vector3::zeros()
}

// ---------------------------------------------------------------------------
// Scenario schema
// ---------------------------------------------------------------------------

/// One session, as read from a scenario TOML file. Optional sections fall
/// back to the corresponding module defaults; only the trajectory and the
/// loss model must be spelled out.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_name")]
    pub name: String,
    pub duration_s: f64,
    /// Master seed; every stage derives its own stream from it. Required
    /// before simulation, either here or on the command line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub source: SourceSpec,
    #[serde(default)]
    pub detector: DetectorSpec,
    #[serde(default)]
    pub timing: TimingSpec,
    #[serde(default)]
    pub controller: ControllerSpec,
    #[serde(default)]
    pub vibration: VibrationSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beam: Option<BeamSpec>,
    pub trajectory: TrajectorySpec,
    pub loss: LossSpec,
    #[serde(default)]
    pub drift: DriftSpec,
    #[serde(default)]
    pub filter: FilterSpec,
}

fn default_name() -> String {
    "unnamed".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceSpec {
    pub pulse_rate_hz: f64,
    pub mu_signal: f64,
    pub mu_decoy: f64,
    pub p_signal: f64,
    pub p_decoy: f64,
    pub p_vacuum: f64,
    pub duty_open: f64,
    pub duty_polarized: f64,
    pub duty_blocked: f64,
    pub states: StatesSpec,
}

impl Default for SourceSpec {
    fn default() -> Self {
        let c = SourceConfig::default();
        Self {
            pulse_rate_hz: c.pulse_rate_hz,
            mu_signal: c.mu_signal,
            mu_decoy: c.mu_decoy,
            p_signal: c.p_signal,
            p_decoy: c.p_decoy,
            p_vacuum: c.p_vacuum,
            duty_open: c.duty_open,
            duty_polarized: c.duty_polarized,
            duty_blocked: c.duty_blocked,
            states: StatesSpec::Ideal,
        }
    }
}

/// Emitted polarization states: textbook ones, or a depolarized/misaligned
/// set matching a measured source purity and fidelity.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StatesSpec {
    Ideal,
    Calibrated { purity: f64, fidelity: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSpec {
    pub efficiency: f64,
    pub background_rate_hz: f64,
    pub jitter_sigma_s: f64,
    pub dead_time_s: f64,
}

impl Default for DetectorSpec {
    fn default() -> Self {
        let c = DetectorConfig::default();
        Self {
            efficiency: c.efficiency,
            background_rate_hz: c.background_rate_hz,
            jitter_sigma_s: c.jitter_sigma_s,
            dead_time_s: c.dead_time_s,
        }
    }
}

/// Timing recovery knobs. The pulse period is not a free parameter here: it
/// follows from the source rate, which removes a whole class of mismatched
/// configurations.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingSpec {
    pub coincidence_window_ps: i64,
    pub histogram_bins: usize,
    pub min_contrast: f64,
    pub clock_skew: f64,
}

impl Default for TimingSpec {
    fn default() -> Self {
        let c = TimingConfig::default();
        Self {
            coincidence_window_ps: c.coincidence_window_ps,
            histogram_bins: c.histogram_bins,
            min_contrast: c.min_contrast,
            clock_skew: c.clock_skew,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerSpec {
    pub loop_rate_hz: f64,
    pub ewma_decay: f64,
    pub proportional_gain: f64,
    pub motor_rate_limit_dps: f64,
    pub acquire_delay_s: f64,
    pub history_len: usize,
}

impl Default for ControllerSpec {
    fn default() -> Self {
        let c = ControllerParams::default();
        Self {
            loop_rate_hz: c.loop_rate_hz,
            ewma_decay: c.ewma_decay,
            proportional_gain: c.proportional_gain,
            motor_rate_limit_dps: c.motor_rate_limit_dps,
            acquire_delay_s: c.acquire_delay_s,
            history_len: c.history_len,
        }
    }
}

/// Platform disturbance: a named preset or explicit model parameters, not
/// both. Leaving the section out means a perfectly quiet platform.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VibrationSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub white_noise_rms_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sway_amplitude_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sway_period_s: Option<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamSpec {
    pub waist_radius_m: f64,
    pub wavelength_m: f64,
    #[serde(default = "default_m_squared")]
    pub m_squared: f64,
    pub aperture_radius_m: f64,
}

fn default_m_squared() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TrajectorySpec {
    StraightPass { standoff_m: f64, road_length_m: f64, speed_mps: f64, samples: usize },
    File { path: String },
}

/// Channel attenuation: a flat figure, or a per-second budget rebuilt from
/// the beam geometry (diffraction over the slant range), the tracking
/// residuals against the receiver's field of view, and a fixed remainder for
/// everything static.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LossSpec {
    Constant { constant_db: f64 },
    Tracking { fixed_db: f64, receiver_fov_deg: f64 },
}

/// Slow unitary drift of the emitted states, modeling the transport fiber
/// between source and telescope: a rotation about one Poincaré axis whose
/// angle grows linearly through the session.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriftSpec {
    pub rotation_rate_dps: f64,
    pub axis: DriftAxis,
}

impl Default for DriftSpec {
    fn default() -> Self {
        Self { rotation_rate_dps: 0.0, axis: DriftAxis::S3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftAxis {
    S1,
    S2,
    S3,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSpec {
    /// Seconds whose accepted-count stays at or below this are dropped.
    pub min_counts_per_s: u64,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self { min_counts_per_s: 1000 }
    }
}

// ---------------------------------------------------------------------------
// Scenario resolution
// ---------------------------------------------------------------------------

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(format!("scenario: {e}")))
    }

    /// Loads a scenario file; a relative trajectory path is anchored at the
    /// scenario's own directory.
    pub fn from_path(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("scenario {}: {e}", path.display())))?;
        let mut sc = Self::from_toml_str(&text)?;
        if let TrajectorySpec::File { path: traj } = &mut sc.trajectory {
            let p = Path::new(traj);
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *traj = dir.join(p).to_string_lossy().into_owned();
                }
            }
        }
        Ok(sc)
    }

    /// The bundled drive-by session: a truck passing a rooftop terminal at
    /// 650 m, tracking-derived loss around 30 dB, ten seconds of data.
    pub fn drive_by() -> Self {
        Self::from_toml_str(include_str!("../scenarios/drive_by.toml"))
            .expect("bundled scenario parses")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(PipelineError::Config(format!(
                "duration {} s must be positive",
                self.duration_s
            )));
        }
        let src = self.source_config()?;
        if src.slots_for(self.duration_s) < 1 {
            return Err(PipelineError::Config(format!(
                "duration {} s is shorter than one pulse slot",
            self.duration_s
            )));
        }
        self.detector_config().validate().map_err(config)?;
        self.timing_config().validate().map_err(config)?;
        self.controller_params().validate().map_err(config)?;
        self.vibration_model()?;
        match &self.loss {
            LossSpec::Constant { constant_db } => {
                if !(constant_db.is_finite() && *constant_db >= 0.0) {
                    return Err(PipelineError::Config(format!(
                        "constant loss {constant_db} dB must be finite and non-negative"
                    )));
                }
            }
            LossSpec::Tracking { fixed_db, receiver_fov_deg } => {
                if !(fixed_db.is_finite() && *fixed_db >= 0.0) {
                    return Err(PipelineError::Config(format!(
                        "fixed loss {fixed_db} dB must be finite and non-negative"
                    )));
                }
                if !(receiver_fov_deg.is_finite() && *receiver_fov_deg > 0.0) {
                    return Err(PipelineError::Config(format!(
                        "receiver field of view {receiver_fov_deg} deg must be positive"
                    )));
                }
                let beam = self.beam.ok_or_else(|| {
                    PipelineError::Config(
                        "tracking-derived loss needs a [beam] section".into(),
                    )
                })?;
                if !(beam.waist_radius_m > 0.0
                    && beam.wavelength_m > 0.0
                    && beam.m_squared >= 1.0
                    && beam.aperture_radius_m > 0.0)
                {
                    return Err(PipelineError::Config(
                        "beam parameters must be positive (and M^2 at least 1)".into(),
                    ));
                }
            }
        }
        if !self.drift.rotation_rate_dps.is_finite() {
            return Err(PipelineError::Config(format!(
                "drift rate {} deg/s must be finite",
                self.drift.rotation_rate_dps
            )));
        }
        match &self.trajectory {
            TrajectorySpec::StraightPass { standoff_m, road_length_m, speed_mps, samples } => {
                if !(standoff_m.is_finite() && *standoff_m > 0.0)
                    || !(road_length_m.is_finite() && *road_length_m >= 0.0)
                    || !(speed_mps.is_finite() && *speed_mps >= 0.0)
                {
                    return Err(PipelineError::Config(
                        "straight-pass geometry must be finite, with a positive standoff".into(),
                    ));
                }
                if *samples < 2 {
                    return Err(PipelineError::Config(format!(
                        "straight-pass needs at least 2 samples, got {samples}"
                    )));
                }
            }
            TrajectorySpec::File { .. } => {}
        }
        Ok(())
    }

    pub fn source_config(&self) -> Result<SourceConfig, PipelineError> {
        let s = &self.source;
        let states = match &s.states {
            StatesSpec::Ideal => StokesState::bb84(),
            StatesSpec::Calibrated { purity, fidelity } => {
                calibrated_states(*purity, *fidelity).map_err(config)?
            }
        };
        let cfg = SourceConfig {
            pulse_rate_hz: s.pulse_rate_hz,
            mu_signal: s.mu_signal,
            mu_decoy: s.mu_decoy,
            p_signal: s.p_signal,
            p_decoy: s.p_decoy,
            p_vacuum: s.p_vacuum,
            duty_open: s.duty_open,
            duty_polarized: s.duty_polarized,
            duty_blocked: s.duty_blocked,
            states,
        };
        cfg.validate().map_err(config)?;
        Ok(cfg)
    }

    pub fn detector_config(&self) -> DetectorConfig {
        let d = &self.detector;
        DetectorConfig {
            efficiency: d.efficiency,
            background_rate_hz: d.background_rate_hz,
            jitter_sigma_s: d.jitter_sigma_s,
            dead_time_s: d.dead_time_s,
        }
    }

    pub fn timing_config(&self) -> TimingConfig {
        let t = &self.timing;
        TimingConfig {
            pulse_period_ps: 1_000_000_000_000i64 / self.source.pulse_rate_hz as i64,
            coincidence_window_ps: t.coincidence_window_ps,
            histogram_bins: t.histogram_bins,
            min_contrast: t.min_contrast,
            clock_skew: t.clock_skew,
        }
    }

    pub fn controller_params(&self) -> ControllerParams {
        let c = &self.controller;
        ControllerParams {
            loop_rate_hz: c.loop_rate_hz,
            ewma_decay: c.ewma_decay,
            proportional_gain: c.proportional_gain,
            motor_rate_limit_dps: c.motor_rate_limit_dps,
            acquire_delay_s: c.acquire_delay_s,
            history_len: c.history_len,
        }
    }

    pub fn vibration_model(&self) -> Result<VibrationModel, PipelineError> {
        let v = &self.vibration;
        let explicit = v.white_noise_rms_deg.is_some()
            || v.sway_amplitude_deg.is_some()
            || v.sway_period_s.is_some();
        if let Some(name) = &v.preset {
            if explicit {
                return Err(PipelineError::Config(
                    "vibration takes a preset or explicit parameters, not both".into(),
                ));
            }
            return match name.as_str() {
                "none" => Ok(VibrationModel::none()),
                "stationary-mount" => Ok(VibrationModel::stationary_mount()),
                "moving-vehicle" => Ok(VibrationModel::moving_vehicle()),
                other => Err(PipelineError::Config(format!(
                    "unknown vibration preset {other:?} (none, stationary-mount, moving-vehicle)"
                ))),
            };
        }
        let model = VibrationModel {
            white_noise_rms_deg: v.white_noise_rms_deg.unwrap_or(0.0),
            sway_amplitude_deg: v.sway_amplitude_deg.unwrap_or(0.0),
            sway_period_s: v.sway_period_s.unwrap_or(1.0),
        };
        if !(model.white_noise_rms_deg >= 0.0
            && model.sway_amplitude_deg >= 0.0
            && model.sway_period_s > 0.0)
        {
            return Err(PipelineError::Config(
                "vibration parameters must be non-negative (period positive)".into(),
            ));
        }
        Ok(model)
    }

    pub fn resolve_trajectory(&self) -> Result<Trajectory, PipelineError> {
        match &self.trajectory {
            TrajectorySpec::StraightPass { standoff_m, road_length_m, speed_mps, samples } => Ok(
                straight_pass_trajectory(*standoff_m, *road_length_m, *speed_mps, *samples),
            ),
            TrajectorySpec::File { path } => Trajectory::from_csv_path(Path::new(path))
                .map_err(|e| PipelineError::Config(format!("trajectory {path}: {e}"))),
        }
    }

    fn slots_total(&self) -> i64 {
        (self.duration_s * self.source.pulse_rate_hz).round() as i64
    }

    fn n_seconds(&self) -> usize {
        let sps = self.source.pulse_rate_hz as i64;
        ((self.slots_total() + sps - 1) / sps).max(1) as usize
    }

    /// Attenuation per whole second of the session.
    fn loss_series(
        &self,
        traj: &Trajectory,
        samples: &[TrackingSample],
    ) -> Result<Vec<f64>, PipelineError> {
        let n = self.n_seconds();
        match &self.loss {
            LossSpec::Constant { constant_db } => Ok(vec![*constant_db; n]),
            LossSpec::Tracking { fixed_db, receiver_fov_deg } => {
                let b = self.beam.expect("validated");
                let beam = BeamModel {
                    waist_radius_m: b.waist_radius_m,
                    wavelength_m: b.wavelength_m,
                    m_squared: b.m_squared,
                    aperture_radius_m: b.aperture_radius_m,
                };
                let tx = transmitter_position();
                let mut series = Vec::with_capacity(n);
                for s in 0..n {
                    let mid = ((s as f64 + 0.5).min(self.duration_s)).max(traj.start_time());
                    let range = (interpolate_position(traj, mid).map_err(stage("loss"))? - tx)
                        .norm();
                    let window: Vec<TrackingSample> = samples
                        .iter()
                        .filter(|p| p.t_s >= s as f64 && p.t_s < (s + 1) as f64)
                        .copied()
                        .collect();
                    let pointing = if window.is_empty() {
                        0.0
                    } else {
                        pointing_loss(&window, *receiver_fov_deg, 0.0).map_err(stage("loss"))?
                    };
                    series.push(beam.collection_loss_db(range) + pointing + fixed_db);
                }
                Ok(series)
            }
        }
    }

    /// Per-second polarization transforms, or `None` when drift is off.
    fn drift_series(&self, n_seconds: usize) -> Option<Vec<PolarizationTransform>> {
        if self.drift.rotation_rate_dps == 0.0 {
            return None;
        }
        Some(
            (0..n_seconds)
                .map(|s| {
                    poincare_rotation(self.drift.axis, self.drift.rotation_rate_dps * s as f64)
                })
                .collect(),
        )
    }
}

/// Mueller rotation about one Poincaré axis by `angle_deg`.
fn poincare_rotation(axis: DriftAxis, angle_deg: f64) -> PolarizationTransform {
    let (s, c) = angle_deg.to_radians().sin_cos();
    #[rustfmt::skip]
    let m = match axis {
        DriftAxis::S1 => Matrix4::new(
            1.0, 0.0, 0.0, 0.0,
            0.0, 1.0, 0.0, 0.0,
            0.0, 0.0,   c,  -s,
            0.0, 0.0,   s,   c,
        ),
        DriftAxis::S2 => Matrix4::new(
            1.0, 0.0, 0.0, 0.0,
            0.0,   c, 0.0,   s,
            0.0, 0.0, 1.0, 0.0,
            0.0,  -s, 0.0,   c,
        ),
        DriftAxis::S3 => Matrix4::new(
            1.0, 0.0, 0.0, 0.0,
            0.0,   c,  -s, 0.0,
            0.0,   s,   c, 0.0,
            0.0, 0.0, 0.0, 1.0,
        ),
    };
    PolarizationTransform(m)
}

/// Worker threads for the transmission stage; the result does not depend on
/// it. Defaults to 1, raised through `QKDLAB_THREADS`.
fn thread_cap() -> usize {
    parse_thread_cap(std::env::var("QKDLAB_THREADS").ok().as_deref())
}

fn parse_thread_cap(v: Option<&str>) -> usize {
    v.and_then(|s| s.trim().parse::<usize>().ok()).filter(|n| *n >= 1).unwrap_or(1)
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

/// Everything a session produced, written as `report.json` next to one CSV
/// sidecar per series (the `series` block names them).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub duration_s: f64,
    pub seconds_total: u32,
    pub retained_seconds: Vec<u32>,
    pub phase_ps: f64,
    pub phase_contrast: f64,
    pub rejected_events: u64,
    pub loss_db: f64,
    pub mu_signal: f64,
    pub mu_decoy: f64,
    pub gain_signal: f64,
    pub gain_decoy: f64,
    pub qber_signal: f64,
    pub qber_decoy: f64,
    pub background_yield: f64,
    pub q1_lower: f64,
    pub e1_upper: f64,
    pub qber_pre_compensation: f64,
    pub qber_post_compensation: f64,
    pub raw_bits: u64,
    pub sifted_bits: u64,
    pub leaked_bits: u64,
    pub ec_efficiency: f64,
    pub secure_bits: u64,
    pub key_rate_bps: f64,
    pub secure_key_hex: String,
    pub warnings: Vec<String>,
    pub series: SeriesIndex,
}

/// File names of the per-second series, relative to the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesIndex {
    pub counts: String,
    pub tof: String,
    pub compensation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deviation: Option<String>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::Config(format!("report: {e}")))
    }
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

/// Runs the full chain — tracking, loss budget, pulse transmission — writes
/// the session records into `out_dir` and analyzes them in place.
///
/// Everything that can fail on configuration fails before the first file is
/// created. The master seed must be set in the scenario.
pub fn simulate(scenario: &Scenario, out_dir: &Path) -> Result<RunReport, PipelineError> {
    let seed = scenario.seed.ok_or_else(|| {
        PipelineError::Config("simulation needs a master seed: set `seed` or pass --seed".into())
    })?;
    scenario.validate()?;
    let traj = scenario.resolve_trajectory()?;
    if traj.start_time() > 0.0 {
        return Err(PipelineError::Config(format!(
            "trajectory starts at {} s, after the session begins",
            traj.start_time()
        )));
    }

    let target = TargetPath::Trajectory { traj: traj.clone(), observer: transmitter_position() };
    let deviations = simulate_tracking(
        &target,
        &scenario.vibration_model()?,
        &scenario.controller_params(),
        scenario.duration_s,
        derive_seed(seed, "track"),
    )
    .map_err(stage("tracking"))?;

    let loss_series = scenario.loss_series(&traj, &deviations)?;
    let n_seconds = scenario.n_seconds();
    let drift = scenario.drift_series(n_seconds);

    let source_cfg = scenario.source_config()?;
    let source =
        PulseSource::new(&source_cfg, derive_seed(seed, "source")).map_err(stage("transmit"))?;
    let det = scenario.detector_config();
    let tx = transmitter_position();
    let tof = |t: f64| {
        let pos = interpolate_position(&traj, t.max(traj.start_time()))
            .expect("trajectory covers the session");
        time_of_flight(tx, pos)
    };
    let out = transmit_threaded(
        &source,
        0..scenario.slots_total(),
        &LossProfile::PerSecond(loss_series.clone()),
        &det,
        tof,
        drift.as_deref(),
        derive_seed(seed, "detect"),
        thread_cap(),
    )
    .map_err(stage("transmit"))?;

    // The receiver-side slot assignment, ahead of writing anything: it tells
    // which slots the transmitter must disclose, and surfaces a lock failure
    // before the directory is touched.
    let timing = scenario.timing_config();
    let (assignments, _, _) = slot_assignments(&out.events, &traj, &timing)?;
    let slots_total = scenario.slots_total();
    let mut disclosed: Vec<i64> = assignments
        .iter()
        .map(|a| a.slot)
        .filter(|s| (0..slots_total).contains(s))
        .collect();
    disclosed.sort_unstable();
    disclosed.dedup();
    let truth: Vec<PulseRecord> = disclosed.iter().map(|s| source.pulse_at(*s)).collect();

    let mut resolved = scenario.clone();
    resolved.seed = Some(seed);

    fs::create_dir_all(out_dir)?;
    fs::write(
        out_dir.join(SCENARIO_FILE),
        toml::to_string_pretty(&resolved).map_err(config)?,
    )?;
    traj.to_csv_writer(buf_writer(&out_dir.join(TRAJECTORY_FILE))?)
        .map_err(stage("write"))?;
    write_loss_csv(buf_writer(&out_dir.join(LOSS_FILE))?, &loss_series)?;
    write_deviation_csv(buf_writer(&out_dir.join(DEVIATION_FILE))?, &deviations)
        .map_err(stage("write"))?;
    write_event_csv(buf_writer(&out_dir.join(EVENTS_FILE))?, &out.events)
        .map_err(stage("write"))?;
    write_event_meta(
        buf_writer(&out_dir.join(META_FILE))?,
        &EventLogMeta { pulse_rate_hz: source_cfg.pulse_rate_hz, t0_ps: 0, seed },
    )
    .map_err(stage("write"))?;
    write_truth_csv(buf_writer(&out_dir.join(TRUTH_FILE))?, &truth).map_err(stage("write"))?;
    write_counts_csv(
        buf_writer(&out_dir.join(TOMOGRAPHY_FILE))?,
        &tomography_rows(&out.tally.seconds),
    )
    .map_err(stage("write"))?;

    analyze_run(out_dir, out_dir)
}

fn buf_writer(path: &Path) -> Result<BufWriter<File>, PipelineError> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Tomography counts grouped per second, in the six-projector counts format.
fn tomography_rows(seconds: &[crate::qkdsim::SecondTally]) -> Vec<CountsRow> {
    let mut rows = Vec::with_capacity(seconds.len() * 4);
    for (s, tally) in seconds.iter().enumerate() {
        for state in 0..4 {
            let t = &tally.tomography[state];
            rows.push(CountsRow {
                t_s: s as f64,
                state,
                counts: ProjectorCounts {
                    n_h: t[0] as f64,
                    n_v: t[1] as f64,
                    n_d: t[2] as f64,
                    n_a: t[3] as f64,
                    n_r: t[4] as f64,
                    n_l: t[5] as f64,
                },
            });
        }
    }
    rows
}

/// Time-of-flight removal, pulse lock and slot assignment in one step, with
/// lock failures mapped onto their own error so callers can exit distinctly.
fn slot_assignments(
    events: &[DetectionEvent],
    traj: &Trajectory,
    timing: &TimingConfig,
) -> Result<(Vec<SlotAssignment>, PhaseLock, usize), PipelineError> {
    let corrected =
        correct_tof(events, traj, transmitter_position(), timing).map_err(stage("timesync"))?;
    let lock = match find_phase(&corrected.events, timing) {
        Ok(lock) => lock,
        Err(e @ (TimeSyncError::NoLock { .. } | TimeSyncError::InsufficientEvents { .. })) => {
            return Err(PipelineError::NoLock(e.to_string()))
        }
        Err(e) => return Err(stage("timesync")(e)),
    };
    // The lock is only defined modulo one period. Emission t0 is shared
    // between the terminals and the flight-time model absorbs the rest, so
    // the representative nearest zero is the one that keeps receiver slot
    // numbers on the transmitter's grid.
    let phase = canonical_phase(lock.phase_ps, timing.pulse_period_ps);
    let assignments = apply_window(&corrected.events, phase, timing).map_err(stage("timesync"))?;
    Ok((assignments, PhaseLock { phase_ps: phase, contrast: lock.contrast }, corrected.rejected))
}

/// Maps a phase from `[0, period)` to the representative in
/// `(-period/2, period/2]`.
fn canonical_phase(phase_ps: f64, period_ps: i64) -> f64 {
    let period = period_ps as f64;
    if phase_ps > period / 2.0 {
        phase_ps - period
    } else {
        phase_ps
    }
}

// ---------------------------------------------------------------------------
// Analysis
// ---------------------------------------------------------------------------

/// Analyzes a run directory produced by [`simulate`] (or laid out the same
/// way), writing the report and series into `out_dir`.
pub fn analyze_run(run_dir: &Path, out_dir: &Path) -> Result<RunReport, PipelineError> {
    analyze(&run_dir.join(EVENTS_FILE), None, out_dir)
}

/// Analyzes a recorded event log. The log's directory must also hold the
/// scenario copy, the event metadata and the transmitter's pulse log;
/// `traj_override` replaces the recorded trajectory when given.
pub fn analyze(
    events_path: &Path,
    traj_override: Option<&Path>,
    out_dir: &Path,
) -> Result<RunReport, PipelineError> {
    let run_dir = events_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut warnings = Vec::new();

    let scenario = Scenario::from_path(&run_dir.join(SCENARIO_FILE)).map_err(|e| {
        PipelineError::Config(format!("analysis needs the recorded scenario next to the log: {e}"))
    })?;
    scenario.validate()?;
    let meta: EventLogMeta = read_event_meta(buf_reader(&run_dir.join(META_FILE))?)
        .map_err(|e| PipelineError::Config(format!("event metadata: {e}")))?;
    if meta.pulse_rate_hz != scenario.source.pulse_rate_hz {
        return Err(PipelineError::Config(format!(
            "event log was taken at {} Hz but the scenario says {} Hz",
            meta.pulse_rate_hz, scenario.source.pulse_rate_hz
        )));
    }
    let (events, truncated) = read_events_lenient(events_path)?;
    if let Some(w) = truncated {
        warnings.push(w);
    }
    let traj = match traj_override {
        Some(p) => Trajectory::from_csv_path(p)
            .map_err(|e| PipelineError::Config(format!("trajectory {}: {e}", p.display())))?,
        None => Trajectory::from_csv_path(&run_dir.join(TRAJECTORY_FILE))
            .map_err(|e| PipelineError::Config(format!("recorded trajectory: {e}")))?,
    };
    let truth = read_truth_csv(buf_reader(&run_dir.join(TRUTH_FILE))?)
        .map_err(|e| PipelineError::Config(format!("pulse log: {e}")))?;
    let loss_series = match File::open(run_dir.join(LOSS_FILE)) {
        Ok(f) => Some(read_loss_csv(BufReader::new(f))?),
        Err(_) => None,
    };
    let tomo = match File::open(run_dir.join(TOMOGRAPHY_FILE)) {
        Ok(f) => read_counts_csv(BufReader::new(f))
            .map_err(|e| PipelineError::Config(format!("tomography counts: {e}")))?,
        Err(_) => {
            warnings.push("no tomography counts recorded; compensation series is empty".into());
            Vec::new()
        }
    };

    let timing = scenario.timing_config();
    let (assignments, lock, rejected) = slot_assignments(&events, &traj, &timing)?;

    let sps = scenario.source.pulse_rate_hz as i64;
    let n_seconds = scenario.n_seconds();
    let slots_total = scenario.slots_total();

    // Burst filter on everything the coincidence window accepted.
    let mut accepted_per_second = vec![0u64; n_seconds];
    for a in assignments.iter().filter(|a| a.accepted) {
        if (0..slots_total).contains(&a.slot) {
            accepted_per_second[(a.slot / sps) as usize] += 1;
        }
    }
    let retained = snr_filter(&accepted_per_second, scenario.filter.min_counts_per_s);
    if retained.is_empty() {
        return Err(PipelineError::Stage {
            stage: "filter",
            cause: format!(
                "no second exceeded {} accepted counts",
                scenario.filter.min_counts_per_s
            ),
        });
    }
    let retained_set: HashSet<usize> = retained.iter().copied().collect();

    let full_block = sift(&truth, &assignments, sps, meta.seed);
    let block = full_block.retain_seconds(&retained);

    // Clicked-slot tallies for the decoy estimate: one count per distinct
    // open slot with an accepted detection, classed by the pulse log.
    let truth_by_slot: HashMap<i64, &PulseRecord> =
        truth.iter().map(|r| (r.slot, r)).collect();
    let mut clicked_slots: Vec<i64> =
        assignments.iter().filter(|a| a.accepted).map(|a| a.slot).collect();
    clicked_slots.sort_unstable();
    clicked_slots.dedup();
    let mut open_clicks = [0u64; 3];
    for slot in &clicked_slots {
        let Some(rec) = truth_by_slot.get(slot) else { continue };
        if rec.fate != ChopperFate::Open {
            continue;
        }
        if retained_set.contains(&((slot / sps) as usize)) {
            open_clicks[rec.class.index()] += 1;
        }
    }
    let retained_span = retained.len() as f64;
    let per_emitted = |clicks: u64, p_class: f64| {
        if p_class > 0.0 {
            clicks as f64 / (sps as f64 * p_class * retained_span)
        } else {
            0.0
        }
    };
    let gain_signal =
        per_emitted(open_clicks[IntensityClass::Signal.index()], scenario.source.p_signal);
    let gain_decoy =
        per_emitted(open_clicks[IntensityClass::Decoy.index()], scenario.source.p_decoy);
    let background_yield =
        per_emitted(open_clicks[IntensityClass::Vacuum.index()], scenario.source.p_vacuum);
    if scenario.source.p_vacuum == 0.0 {
        warnings.push("no vacuum class; background yield taken as zero".into());
    }

    let qber_signal = block.qber(IntensityClass::Signal).ok_or(PipelineError::Stage {
        stage: "sift",
        cause: "no signal-class bits in the retained span".into(),
    })?;
    let qber_decoy = block.qber(IntensityClass::Decoy).ok_or(PipelineError::Stage {
        stage: "decoy",
        cause: "no decoy-class bits in the retained span".into(),
    })?;

    let estimate = decoy_bounds(&DecoyInputs {
        mu: scenario.source.mu_signal,
        nu: scenario.source.mu_decoy,
        gain_signal,
        gain_decoy,
        qber_signal,
        qber_decoy,
        background_yield,
    })
    .map_err(stage("decoy"))?;
    if estimate.clamped {
        warnings.push("single-photon error bound was clamped to 1/2".into());
    }

    let mismatches =
        block.tx_bits.iter().zip(&block.rx_bits).filter(|(a, b)| a != b).count();
    let block_qber = mismatches as f64 / block.len().max(1) as f64;
    let rec_cfg = ReconciliationConfig { seed: meta.seed, ..ReconciliationConfig::default() };
    let outcome = error_correct(&block.tx_bits, &block.rx_bits, block_qber, &rec_cfg)
        .map_err(stage("reconcile"))?;

    let secure_bits = asymptotic_key_length(
        block.len() as u64,
        gain_signal,
        qber_signal,
        &estimate,
        outcome.efficiency,
    )
    .min(outcome.corrected.len() as u64);
    let key = privacy_amplify(&outcome.corrected, secure_bits as usize, meta.seed)
        .map_err(stage("privacy"))?;
    if secure_bits == 0 {
        warnings.push("no positive key length at the asymptotic rate".into());
    }

    let loss_db = match &loss_series {
        Some(series) => {
            let vals: Vec<f64> = retained
                .iter()
                .filter_map(|s| series.get(*s))
                .copied()
                .filter(|v| v.is_finite())
                .collect();
            vals.iter().sum::<f64>() / vals.len().max(1) as f64
        }
        None => {
            warnings.push(
                "no loss record; attenuation estimated from in-window counts only".into(),
            );
            estimate_loss_db(
                gain_signal,
                scenario.source.duty_open,
                scenario.source.mu_signal,
            )
        }
    };

    let compensation = compensation_series(&tomo);
    if compensation.is_empty() && !tomo.is_empty() {
        warnings.push("no tomography second measured all four states".into());
    }
    let comp_mean = |f: fn(&(u32, f64, f64)) -> f64| {
        if compensation.is_empty() {
            0.0
        } else {
            compensation.iter().map(f).sum::<f64>() / compensation.len() as f64
        }
    };

    fs::create_dir_all(out_dir)?;
    write_counts_series(
        buf_writer(&out_dir.join(COUNTS_SERIES_FILE))?,
        &accepted_per_second,
        &full_block,
        &retained_set,
    )?;
    write_tof_series(buf_writer(&out_dir.join(TOF_SERIES_FILE))?, &traj, scenario.duration_s)?;
    write_compensation_series(
        buf_writer(&out_dir.join(COMPENSATION_SERIES_FILE))?,
        &compensation,
    )?;
    let deviation = if run_dir.join(DEVIATION_FILE).exists() {
        if out_dir != run_dir {
            fs::copy(run_dir.join(DEVIATION_FILE), out_dir.join(DEVIATION_FILE))?;
        }
        Some(DEVIATION_FILE.to_string())
    } else {
        None
    };

    let report = RunReport {
        scenario: scenario.name.clone(),
        duration_s: scenario.duration_s,
        seconds_total: n_seconds as u32,
        retained_seconds: retained.iter().map(|s| *s as u32).collect(),
        phase_ps: lock.phase_ps,
        // A background-free histogram has infinite peak-to-median contrast;
        // JSON cannot carry that, so the report caps it.
        phase_contrast: lock.contrast.min(1e6),
        rejected_events: rejected as u64,
        loss_db,
        mu_signal: scenario.source.mu_signal,
        mu_decoy: scenario.source.mu_decoy,
        gain_signal,
        gain_decoy,
        qber_signal,
        qber_decoy,
        background_yield,
        q1_lower: estimate.single_photon_gain,
        e1_upper: estimate.single_photon_error,
        qber_pre_compensation: comp_mean(|r| r.1),
        qber_post_compensation: comp_mean(|r| r.2),
        raw_bits: block.raw_bits.len() as u64,
        sifted_bits: block.len() as u64,
        leaked_bits: outcome.leaked_bits as u64,
        ec_efficiency: outcome.efficiency,
        secure_bits,
        key_rate_bps: secure_bits as f64 / retained_span,
        secure_key_hex: bits_to_hex(&key),
        warnings,
        series: SeriesIndex {
            counts: COUNTS_SERIES_FILE.into(),
            tof: TOF_SERIES_FILE.into(),
            compensation: COMPENSATION_SERIES_FILE.into(),
            deviation,
        },
    };
    fs::write(out_dir.join(REPORT_FILE), report.to_json())?;
    Ok(report)
}

fn buf_reader(path: &Path) -> Result<BufReader<File>, PipelineError> {
    Ok(BufReader::new(File::open(path).map_err(|e| {
        PipelineError::Config(format!("{}: {e}", path.display()))
    })?))
}

/// Event log reader that treats a malformed tail as truncation: everything
/// before the first bad record is analyzed, with a warning instead of an
/// error.
fn read_events_lenient(
    path: &Path,
) -> Result<(Vec<DetectionEvent>, Option<String>), PipelineError> {
    let mut rdr = csv::Reader::from_reader(buf_reader(path)?);
    let mut events = Vec::new();
    let mut truncated = None;
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let ok = record.ok().and_then(|r| {
            let ts: i64 = r.get(0)?.parse().ok()?;
            let ch: u8 = r.get(1)?.parse().ok()?;
            (ch <= 3).then_some(DetectionEvent { timestamp_ps: ts, channel: ch })
        });
        match ok {
            Some(e) => events.push(e),
            None => {
                truncated = Some(format!(
                    "event log ends mid-record at line {line}; analysis covers the preceding span"
                ));
                break;
            }
        }
    }
    Ok((events, truncated))
}

/// Crude attenuation estimate when no loss record is available: inverts the
/// open-slot gain, so the jitter-window acceptance stays folded in and the
/// figure reads high.
fn estimate_loss_db(gain_signal: f64, duty_open: f64, mu: f64) -> f64 {
    let q = gain_signal / duty_open.max(1e-12);
    if q <= 0.0 || q >= 1.0 {
        return 0.0;
    }
    let eta = -(1.0 - q).ln() / mu;
    -10.0 * eta.log10()
}

/// Per-second tomography reconstruction and compensation: `(second, before,
/// after)` predicted error rates. Seconds missing a state or a projector
/// pair are skipped.
fn compensation_series(rows: &[CountsRow]) -> Vec<(u32, f64, f64)> {
    let mut by_second: BTreeMap<u32, [Option<StokesState>; 4]> = BTreeMap::new();
    for row in rows {
        if row.t_s < 0.0 {
            continue;
        }
        if let Ok(rec) = stokes_from_counts(&row.counts) {
            by_second.entry(row.t_s as u32).or_default()[row.state] = Some(rec.state);
        }
    }
    by_second
        .into_iter()
        .filter_map(|(s, st)| {
            let [h, v, d, a] = st;
            let states = [h?, v?, d?, a?];
            let pre = predicted_qber(&states, None);
            let post =
                optimize_compensation(&states, &OptimizerOptions::default()).predicted_qber;
            Some((s, pre, post))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Series files
// ---------------------------------------------------------------------------

fn csv_io(e: csv::Error) -> PipelineError {
    PipelineError::Stage { stage: "write", cause: e.to_string() }
}

fn write_loss_csv<W: Write>(writer: W, series: &[f64]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["second", "loss_db"]).map_err(csv_io)?;
    for (s, db) in series.iter().enumerate() {
        w.write_record(&[s.to_string(), db.to_string()]).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn read_loss_csv<R: Read>(reader: R) -> Result<Vec<f64>, PipelineError> {
    #[derive(Deserialize)]
    struct Raw {
        second: usize,
        loss_db: f64,
    }
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for record in rdr.deserialize::<Raw>() {
        let raw = record.map_err(|e| PipelineError::Config(format!("loss record: {e}")))?;
        if raw.second != out.len() {
            return Err(PipelineError::Config(format!(
                "loss record out of order at second {}",
                raw.second
            )));
        }
        out.push(raw.loss_db);
    }
    Ok(out)
}

/// Per-second counts and error rates; empty cells where a class contributed
/// nothing that second.
fn write_counts_series<W: Write>(
    writer: W,
    accepted: &[u64],
    block: &crate::keyproc::SiftedBlock,
    retained: &HashSet<usize>,
) -> Result<(), PipelineError> {
    let n = accepted.len();
    let mut raw = vec![0u64; n];
    for s in &block.raw_seconds {
        raw[*s as usize] += 1;
    }
    let mut sifted = vec![0u64; n];
    let mut errs = vec![[0u64; 2]; n];
    let mut tots = vec![[0u64; 2]; n];
    for i in 0..block.len() {
        let s = block.seconds[i] as usize;
        sifted[s] += 1;
        let c = match block.classes[i] {
            IntensityClass::Signal => 0,
            IntensityClass::Decoy => 1,
            IntensityClass::Vacuum => continue,
        };
        tots[s][c] += 1;
        errs[s][c] += u64::from(block.tx_bits[i] != block.rx_bits[i]);
    }

    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["second", "accepted", "raw", "sifted", "qber_signal", "qber_decoy", "retained"])
        .map_err(csv_io)?;
    for s in 0..n {
        let qber = |c: usize| {
            if tots[s][c] > 0 {
                (errs[s][c] as f64 / tots[s][c] as f64).to_string()
            } else {
                String::new()
            }
        };
        w.write_record(&[
            s.to_string(),
            accepted[s].to_string(),
            raw[s].to_string(),
            sifted[s].to_string(),
            qber(0),
            qber(1),
            u8::from(retained.contains(&s)).to_string(),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

/// Modeled one-way delay at 10 Hz across the session.
fn write_tof_series<W: Write>(
    writer: W,
    traj: &Trajectory,
    duration_s: f64,
) -> Result<(), PipelineError> {
    let tx = transmitter_position();
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t_s", "tof_ns"]).map_err(csv_io)?;
    let steps = (duration_s * 10.0).floor() as i64;
    for i in 0..=steps {
        let t = (i as f64 * 0.1).max(traj.start_time());
        let Ok(pos) = interpolate_position(traj, t) else { continue };
        let tof_ns = time_of_flight(tx, pos) * 1e9;
        w.write_record(&[t.to_string(), tof_ns.to_string()]).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn write_compensation_series<W: Write>(
    writer: W,
    rows: &[(u32, f64, f64)],
) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["second", "pre_qber", "post_qber"]).map_err(csv_io)?;
    for (s, pre, post) in rows {
        w.write_record(&[s.to_string(), pre.to_string(), post.to_string()]).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Standalone compensation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CompensationSummary {
    pub angles: WaveplateStack,
    pub pre_qber: f64,
    pub post_qber: f64,
}

/// Reconstructs the channel from a tomography counts file, fits the
/// waveplate stack against the latest complete second and writes the
/// single-row result file.
pub fn compensate(counts_path: &Path, out_path: &Path) -> Result<CompensationSummary, PipelineError> {
    let rows = read_counts_csv(buf_reader(counts_path)?)
        .map_err(|e| PipelineError::Config(format!("tomography counts: {e}")))?;
    let seconds = measure_channel(&rows).map_err(stage("tomography"))?;
    let (_, states) = seconds.last().expect("measure_channel returns at least one second");
    let pre_qber = predicted_qber(states, None);
    let fit = optimize_compensation(states, &OptimizerOptions::default());

    let mut w = csv::Writer::from_writer(buf_writer(out_path)?);
    w.write_record(["theta1_deg", "theta2_deg", "theta3_deg", "pre_qber", "post_qber"])
        .map_err(csv_io)?;
    w.write_record(&[
        fit.stack.theta1_deg.to_string(),
        fit.stack.theta2_deg.to_string(),
        fit.stack.theta3_deg.to_string(),
        pre_qber.to_string(),
        fit.predicted_qber.to_string(),
    ])
    .map_err(csv_io)?;
    w.flush()?;

    Ok(CompensationSummary { angles: fit.stack, pre_qber, post_qber: fit.predicted_qber })
}

// ---------------------------------------------------------------------------
