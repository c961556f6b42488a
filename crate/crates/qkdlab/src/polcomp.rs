//! Polarization measurement and compensation.
//!
//! A transmitted state is tracked on the Poincaré sphere as a Stokes
//! 4-vector; optical elements act as 4x4 Mueller matrices. Transmission
//! through a drifting channel is measured with six-projector tomography
//! (H/V, D/A, R/L count pairs), the drift is fitted as the least-squares
//! Poincaré rotation, and a motorized quarter-half-quarter waveplate stack is
//! tuned so the four signal states land back on their targets.
//!
//! Conventions: right-circular light has `S3 > 0`; waveplate fast-axis angles
//! are degrees from horizontal and act modulo 180°.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolCompError {
    #[error("projector pair {0} has zero total counts")]
    EmptyProjectorPair(&'static str),
    #[error("channel rotation is unidentifiable from the measured states")]
    Unidentifiable,
    #[error("requested fidelity {fidelity} exceeds the ceiling {max} set by purity {purity}")]
    InfeasibleCalibration { purity: f64, fidelity: f64, max: f64 },
    #[error("invalid counts file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// States
// ---------------------------------------------------------------------------

/// Stokes 4-vector `(S0, S1, S2, S3)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StokesState(pub [f64; 4]);

impl StokesState {
    pub fn new(s0: f64, s1: f64, s2: f64, s3: f64) -> Self {
        Self([s0, s1, s2, s3])
    }

    /// Unit-intensity state from a Poincaré 3-vector (length = degree of
    /// polarization).
    pub fn from_poincare(p: Vector3<f64>) -> Self {
        Self([1.0, p.x, p.y, p.z])
    }

    pub fn h() -> Self {
        Self([1.0, 1.0, 0.0, 0.0])
    }
    pub fn v() -> Self {
        Self([1.0, -1.0, 0.0, 0.0])
    }
    pub fn d() -> Self {
        Self([1.0, 0.0, 1.0, 0.0])
    }
    pub fn antidiagonal() -> Self {
        Self([1.0, 0.0, -1.0, 0.0])
    }
    pub fn r() -> Self {
        Self([1.0, 0.0, 0.0, 1.0])
    }
    pub fn l() -> Self {
        Self([1.0, 0.0, 0.0, -1.0])
    }

    /// The four BB84 signal states in transmission order H, V, D, A.
    pub fn bb84() -> [Self; 4] {
        [Self::h(), Self::v(), Self::d(), Self::antidiagonal()]
    }

    pub fn s0(&self) -> f64 {
        self.0[0]
    }

    /// Poincaré vector normalized by intensity; its length is the degree of
    /// polarization.
    pub fn poincare(&self) -> Vector3<f64> {
        Vector3::new(self.0[1], self.0[2], self.0[3]) / self.0[0]
    }

    pub fn degree_of_polarization(&self) -> f64 {
        self.poincare().norm()
    }

    fn as_vector4(&self) -> Vector4<f64> {
        Vector4::new(self.0[0], self.0[1], self.0[2], self.0[3])
    }
}

/// Single-state purity `(1 + DOP^2) / 2`.
pub fn purity(state: &StokesState) -> f64 {
    let p = state.degree_of_polarization();
    0.5 * (1.0 + p * p)
}

/// Fidelity of a state against a pure target: `(1 + s . t) / 2`, with `s` the
/// DOP-weighted Poincaré vector and `t` the unit target vector.
pub fn fidelity(state: &StokesState, target: &StokesState) -> f64 {
    0.5 * (1.0 + state.poincare().dot(&target.poincare().normalize()))
}

// ---------------------------------------------------------------------------
// Mueller matrices
// ---------------------------------------------------------------------------

/// A polarization transform in Mueller form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarizationTransform(pub Matrix4<f64>);

impl PolarizationTransform {
    pub fn identity() -> Self {
        Self(Matrix4::identity())
    }

    /// Physical rotation of the polarization plane by `angle_deg` (Poincaré
    /// rotation about S3 by twice the angle).
    pub fn rotator(angle_deg: f64) -> Self {
        let phi = 2.0 * angle_deg.to_radians();
        let (s, c) = phi.sin_cos();
        #[rustfmt::skip]
        let m = Matrix4::new(
            1.0, 0.0, 0.0, 0.0,
            0.0, c,   -s,  0.0,
            0.0, s,   c,   0.0,
            0.0, 0.0, 0.0, 1.0,
        );
        Self(m)
    }

    /// Linear retarder with retardance `delta_deg` and fast axis at
    /// `theta_deg` from horizontal.
    pub fn retarder(delta_deg: f64, theta_deg: f64) -> Self {
        let d = delta_deg.to_radians();
        let (sd, cd) = d.sin_cos();
        let two_theta = 2.0 * theta_deg.to_radians();
        let (s, c) = two_theta.sin_cos();
        #[rustfmt::skip]
        let m = Matrix4::new(
            1.0, 0.0,                    0.0,                    0.0,
            0.0, c * c + s * s * cd,     c * s * (1.0 - cd),     -s * sd,
            0.0, c * s * (1.0 - cd),     s * s + c * c * cd,     c * sd,
            0.0, s * sd,                 -c * sd,                cd,
        );
        Self(m)
    }

    pub fn quarter_wave(theta_deg: f64) -> Self {
        Self::retarder(90.0, theta_deg)
    }

    pub fn half_wave(theta_deg: f64) -> Self {
        Self::retarder(180.0, theta_deg)
    }

    /// Poincaré rotation by `angle_deg` about an arbitrary sphere axis.
    pub fn poincare_rotation(axis: Vector3<f64>, angle_deg: f64) -> Self {
        let r = nalgebra::Rotation3::from_axis_angle(
            &nalgebra::Unit::new_normalize(axis),
            angle_deg.to_radians(),
        );
        Self::from_rotation(r.matrix())
    }

    /// Embeds a 3x3 Poincaré rotation as a Mueller matrix.
    pub fn from_rotation(r: &Matrix3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(1, 1).copy_from(r);
        Self(m)
    }

    /// The Poincaré 3x3 block.
    pub fn rotation_block(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(1, 1).into_owned()
    }

    /// `self` applied after `other`.
    pub fn compose(&self, other: &Self) -> Self {
        Self(self.0 * other.0)
    }
}

/// Applies a Mueller transform to a state.
pub fn apply_transform(m: &PolarizationTransform, state: &StokesState) -> StokesState {
    let v = m.0 * state.as_vector4();
    StokesState([v.x, v.y, v.z, v.w])
}

/// Motorized quarter-half-quarter compensation stack; light traverses the
/// plates in field order `theta1 -> theta2 -> theta3`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveplateStack {
    pub theta1_deg: f64,
    pub theta2_deg: f64,
    pub theta3_deg: f64,
}

impl WaveplateStack {
    pub fn new(theta1_deg: f64, theta2_deg: f64, theta3_deg: f64) -> Self {
        Self {
            theta1_deg,
            theta2_deg,
            theta3_deg,
        }
    }

    /// Equivalent stack with all angles folded into `[0, 180)`.
    pub fn normalized(&self) -> Self {
        Self {
            theta1_deg: self.theta1_deg.rem_euclid(180.0),
            theta2_deg: self.theta2_deg.rem_euclid(180.0),
            theta3_deg: self.theta3_deg.rem_euclid(180.0),
        }
    }
}

/// Mueller matrix of the full stack.
pub fn waveplate_transform(stack: &WaveplateStack) -> PolarizationTransform {
    let q1 = PolarizationTransform::quarter_wave(stack.theta1_deg);
    let h2 = PolarizationTransform::half_wave(stack.theta2_deg);
    let q3 = PolarizationTransform::quarter_wave(stack.theta3_deg);
    q3.compose(&h2).compose(&q1)
}

// ---------------------------------------------------------------------------
// Tomography
// ---------------------------------------------------------------------------

/// Photon counts behind the six polarization projectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectorCounts {
    pub n_h: f64,
    pub n_v: f64,
    pub n_d: f64,
    pub n_a: f64,
    pub n_r: f64,
    pub n_l: f64,
}

/// Result of reconstructing a state from counts. When raw counts imply a
/// degree of polarization above 1 the Poincaré vector is scaled back onto the
/// physical ball and the applied scale factor is recorded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StokesReconstruction {
    pub state: StokesState,
    pub clip_factor: Option<f64>,
}

/// Reconstructs a Stokes state from six-projector counts. Each Stokes
/// component is the normalized difference of its projector pair; intensity is
/// taken from the H/V pair.
pub fn stokes_from_counts(counts: &ProjectorCounts) -> Result<StokesReconstruction, PolCompError> {
    let pairs = [
        (counts.n_h, counts.n_v, "H/V"),
        (counts.n_d, counts.n_a, "D/A"),
        (counts.n_r, counts.n_l, "R/L"),
    ];
    let mut s = [0.0f64; 3];
    for (i, (p, q, name)) in pairs.iter().enumerate() {
        let total = p + q;
        if total <= 0.0 {
            return Err(PolCompError::EmptyProjectorPair(name));
        }
        s[i] = (p - q) / total;
    }
    let mut p = Vector3::new(s[0], s[1], s[2]);
    let dop = p.norm();
    let clip_factor = if dop > 1.0 {
        p /= dop;
        Some(1.0 / dop)
    } else {
        None
    };
    Ok(StokesReconstruction {
        state: StokesState([1.0, p.x, p.y, p.z]),
        clip_factor,
    })
}

/// Expected projector counts for a state, `n_per_pair` photons per projector
/// pair. Oracle for tomography tests and fixture generation.
pub fn expected_counts(state: &StokesState, n_per_pair: f64) -> ProjectorCounts {
    let p = state.poincare();
    let half = n_per_pair / 2.0;
    ProjectorCounts {
        n_h: half * (1.0 + p.x),
        n_v: half * (1.0 - p.x),
        n_d: half * (1.0 + p.y),
        n_a: half * (1.0 - p.y),
        n_r: half * (1.0 + p.z),
        n_l: half * (1.0 - p.z),
    }
}

// ---------------------------------------------------------------------------
// Channel fit and QBER prediction
// ---------------------------------------------------------------------------

/// Least-squares Poincaré rotation mapping the ideal H, V, D, A states onto
/// the four measured states, with the sum-of-squares residual.
///
/// Depolarization shortens the measured vectors but does not bias the fitted
/// rotation; it shows up in the residual instead. Fails as unidentifiable
/// when the measurements do not span two independent directions.
pub fn fit_channel(
    measured: &[StokesState; 4],
) -> Result<(PolarizationTransform, f64), PolCompError> {
    let targets = StokesState::bb84();
    let mut cross = Matrix3::zeros();
    for (m, t) in measured.iter().zip(targets.iter()) {
        cross += m.poincare() * t.poincare().transpose();
    }
    let svd = cross.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    if svd.singular_values[1] < 1e-9 * svd.singular_values[0].max(1e-300) {
        return Err(PolCompError::Unidentifiable);
    }
    let det = (u * v_t).determinant();
    let rotation = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det.signum())) * v_t;
    let mut residual = 0.0;
    for (m, t) in measured.iter().zip(targets.iter()) {
        residual += (m.poincare() - rotation * t.poincare()).norm_squared();
    }
    Ok((PolarizationTransform::from_rotation(&rotation), residual))
}

/// Mean error probability of the four states, each measured in its own basis,
/// optionally after passing a compensation stack: `mean of (1 - s . t) / 2`.
pub fn predicted_qber(states: &[StokesState; 4], stack: Option<&WaveplateStack>) -> f64 {
    let m = stack.map(waveplate_transform);
    let targets = StokesState::bb84();
    let mut total = 0.0;
    for (s, t) in states.iter().zip(targets.iter()) {
        let out = match &m {
            Some(m) => apply_transform(m, s),
            None => *s,
        };
        total += 0.5 * (1.0 - out.poincare().dot(&t.poincare()));
    }
    total / 4.0
}

// ---------------------------------------------------------------------------
// Compensation search
// ---------------------------------------------------------------------------

/// Knobs for [`optimize_compensation`]. The defaults satisfy the calibration
/// targets; they are deterministic for a given input.
#[derive(Debug, Clone, Copy)]
pub struct OptimizerOptions {
    /// Number of independent local searches (at least 8).
    pub starts: usize,
    /// Angle convergence tolerance, degrees.
    pub tol_deg: f64,
    /// Evaluation budget per start.
    pub max_evals: usize,
    /// Seed for the deterministic start-point sequence.
    pub seed: u64,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            starts: 12,
            tol_deg: 1e-4,
            max_evals: 2000,
            seed: 0x9b1f_c4d7,
        }
    }
}

/// Stack angles chosen by the search plus the QBER they achieve.
#[derive(Debug, Clone, Copy)]
pub struct CompensationResult {
    pub stack: WaveplateStack,
    pub predicted_qber: f64,
}

/// Finds waveplate-stack angles minimizing the predicted QBER of the four
/// measured states via multi-start Nelder-Mead on the angle torus.
pub fn optimize_compensation(
    measured: &[StokesState; 4],
    options: &OptimizerOptions,
) -> CompensationResult {
    let objective =
        |angles: &[f64; 3]| predicted_qber(measured, Some(&WaveplateStack::new(angles[0], angles[1], angles[2])));

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut best: Option<([f64; 3], f64)> = None;
    for start_idx in 0..options.starts.max(8) {
        let x0 = if start_idx == 0 {
            [0.0, 0.0, 0.0]
        } else {
            [
                rng.gen_range(0.0..180.0),
                rng.gen_range(0.0..180.0),
                rng.gen_range(0.0..180.0),
            ]
        };
        let coarse = nelder_mead(&objective, x0, 40.0, options.tol_deg, options.max_evals);
        // Polish from the coarse optimum with a tight simplex.
        let (x, f) = nelder_mead(&objective, coarse.0, 2.0, options.tol_deg / 10.0, options.max_evals);
        if best.map_or(true, |(_, fb)| f < fb) {
            best = Some((x, f));
        }
    }
    let (x, f) = best.expect("at least one start");
    CompensationResult {
        stack: WaveplateStack::new(x[0], x[1], x[2]).normalized(),
        predicted_qber: f,
    }
}

/// Plain Nelder-Mead over R^3 (wrap-around is handled by the periodicity of
/// the objective itself).
fn nelder_mead(
    f: &dyn Fn(&[f64; 3]) -> f64,
    x0: [f64; 3],
    scale: f64,
    tol: f64,
    max_evals: usize,
) -> ([f64; 3], f64) {
    const ALPHA: f64 = 1.0;
    const GAMMA: f64 = 2.0;
    const RHO: f64 = 0.5;
    const SIGMA: f64 = 0.5;

    let mut simplex: Vec<([f64; 3], f64)> = Vec::with_capacity(4);
    simplex.push((x0, f(&x0)));
    for i in 0..3 {
        let mut x = x0;
        x[i] += scale;
        simplex.push((x, f(&x)));
    }
    let mut evals = 4;

    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let spread = (0..3)
            .map(|i| {
                simplex
                    .iter()
                    .map(|(x, _)| x[i])
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                        (lo.min(v), hi.max(v))
                    })
            })
            .map(|(lo, hi)| hi - lo)
            .fold(0.0f64, f64::max);
        if spread < tol {
            break;
        }

        let centroid = {
            let mut c = [0.0; 3];
            for (x, _) in &simplex[..3] {
                for i in 0..3 {
                    c[i] += x[i] / 3.0;
                }
            }
            c
        };
        let worst = simplex[3];
        let reflect = point_along(&centroid, &worst.0, -ALPHA);
        let fr = f(&reflect);
        evals += 1;

        if fr < simplex[0].1 {
            let expand = point_along(&centroid, &worst.0, -GAMMA);
            let fe = f(&expand);
            evals += 1;
            simplex[3] = if fe < fr { (expand, fe) } else { (reflect, fr) };
        } else if fr < simplex[2].1 {
            simplex[3] = (reflect, fr);
        } else {
            let contract = if fr < worst.1 {
                point_along(&centroid, &worst.0, -RHO)
            } else {
                point_along(&centroid, &worst.0, RHO)
            };
            let fc = f(&contract);
            evals += 1;
            if fc < worst.1.min(fr) {
                simplex[3] = (contract, fc);
            } else {
                let best = simplex[0].0;
                for entry in simplex.iter_mut().skip(1) {
                    for i in 0..3 {
                        entry.0[i] = best[i] + SIGMA * (entry.0[i] - best[i]);
                    }
                    entry.1 = f(&entry.0);
                    evals += 1;
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex[0]
}

fn point_along(centroid: &[f64; 3], from: &[f64; 3], coeff: f64) -> [f64; 3] {
    let mut x = [0.0; 3];
    for i in 0..3 {
        x[i] = centroid[i] + coeff * (from[i] - centroid[i]);
    }
    x
}

// ---------------------------------------------------------------------------
// Calibrated state fixtures
// ---------------------------------------------------------------------------

/// Four partially depolarized, individually misaligned signal states with the
/// requested single-state purity and fidelity to their targets.
///
/// The misalignments are chosen so that no common rotation can remove them:
/// H and V tilt toward +S2 while D and A tilt toward +S3. The best achievable
/// compensated QBER is therefore exactly `1 - fidelity`.
pub fn calibrated_states(purity_target: f64, fidelity_target: f64) -> Result<[StokesState; 4], PolCompError> {
    let dop = (2.0 * purity_target - 1.0).max(0.0).sqrt();
    let align = 2.0 * fidelity_target - 1.0;
    if align > dop {
        return Err(PolCompError::InfeasibleCalibration {
            purity: purity_target,
            fidelity: fidelity_target,
            max: 0.5 * (1.0 + dop),
        });
    }
    let cos_a = align / dop;
    let sin_a = (1.0 - cos_a * cos_a).max(0.0).sqrt();
    Ok([
        StokesState::from_poincare(dop * Vector3::new(cos_a, sin_a, 0.0)),
        StokesState::from_poincare(dop * Vector3::new(-cos_a, sin_a, 0.0)),
        StokesState::from_poincare(dop * Vector3::new(0.0, cos_a, sin_a)),
        StokesState::from_poincare(dop * Vector3::new(0.0, -cos_a, sin_a)),
    ])
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

/// One tomography record: counts for a given transmitted state at a given
/// time, CSV schema `t_s,state,nH,nV,nD,nA,nR,nL`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CountsRow {
    pub t_s: f64,
    pub state: usize,
    pub counts: ProjectorCounts,
}

const STATE_LABELS: [&str; 4] = ["H", "V", "D", "A"];

pub fn read_counts_csv<R: Read>(reader: R) -> Result<Vec<CountsRow>, PolCompError> {
    #[derive(Deserialize)]
    struct Raw {
        t_s: f64,
        state: String,
        #[serde(rename = "nH")]
        n_h: f64,
        #[serde(rename = "nV")]
        n_v: f64,
        #[serde(rename = "nD")]
        n_d: f64,
        #[serde(rename = "nA")]
        n_a: f64,
        #[serde(rename = "nR")]
        n_r: f64,
        #[serde(rename = "nL")]
        n_l: f64,
    }
    let mut rdr = csv::Reader::from_reader(reader);
    let mut rows = Vec::new();
    for record in rdr.deserialize::<Raw>() {
        let raw = record.map_err(|e| PolCompError::Format(e.to_string()))?;
        let state = STATE_LABELS
            .iter()
            .position(|l| *l == raw.state)
            .ok_or_else(|| PolCompError::Format(format!("unknown state label {:?}", raw.state)))?;
        rows.push(CountsRow {
            t_s: raw.t_s,
            state,
            counts: ProjectorCounts {
                n_h: raw.n_h,
                n_v: raw.n_v,
                n_d: raw.n_d,
                n_a: raw.n_a,
                n_r: raw.n_r,
                n_l: raw.n_l,
            },
        });
    }
    Ok(rows)
}

pub fn write_counts_csv<W: Write>(writer: W, rows: &[CountsRow]) -> Result<(), PolCompError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t_s", "state", "nH", "nV", "nD", "nA", "nR", "nL"])
        .map_err(|e| PolCompError::Format(e.to_string()))?;
    for row in rows {
        let c = row.counts;
        w.write_record(&[
            row.t_s.to_string(),
            STATE_LABELS[row.state].to_string(),
            c.n_h.to_string(),
            c.n_v.to_string(),
            c.n_d.to_string(),
            c.n_a.to_string(),
            c.n_r.to_string(),
            c.n_l.to_string(),
        ])
        .map_err(|e| PolCompError::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Per-second tomography: groups counts rows by timestamp and reconstructs
/// the four signal states for every second that measured all of them.
pub fn measure_channel(
    rows: &[CountsRow],
) -> Result<Vec<(f64, [StokesState; 4])>, PolCompError> {
    let mut out: Vec<(f64, [Option<StokesState>; 4])> = Vec::new();
    for row in rows {
        let slot = match out.last_mut() {
            Some((t, states)) if *t == row.t_s => states,
            _ => {
                out.push((row.t_s, [None; 4]));
                &mut out.last_mut().unwrap().1
            }
        };
        slot[row.state] = Some(stokes_from_counts(&row.counts)?.state);
    }
    let complete: Vec<(f64, [StokesState; 4])> = out
        .into_iter()
        .filter_map(|(t, states)| {
            let [h, v, d, a] = states;
            Some((t, [h?, v?, d?, a?]))
        })
        .collect();
    if complete.is_empty() {
        return Err(PolCompError::Format(
            "no second contains counts for all four states".into(),
        ));
    }
    Ok(complete)
}

/// Writes the single-line compensation result file
/// `theta1_deg,theta2_deg,theta3_deg,predicted_qber`.
pub fn write_compensation_csv<W: Write>(
    writer: W,
    result: &CompensationResult,
) -> Result<(), PolCompError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["theta1_deg", "theta2_deg", "theta3_deg", "predicted_qber"])
        .map_err(|e| PolCompError::Format(e.to_string()))?;
    w.write_record(&[
        result.stack.theta1_deg.to_string(),
        result.stack.theta2_deg.to_string(),
        result.stack.theta3_deg.to_string(),
        result.predicted_qber.to_string(),
    ])
    .map_err(|e| PolCompError::Format(e.to_string()))?;
    w.flush()?;
    Ok(())
}
