//! Simulation and analysis toolkit for free-space quantum key distribution
//! between moving terminals.
//!
//! The crate models the full signal chain of a decoy-state BB84 link whose
//! receiver travels past the transmitter: link geometry and radiometry
//! ([`linkgeom`]), closed-loop beacon tracking ([`tracksim`]), polarization
//! drift measurement and compensation ([`polcomp`]), photon-level Monte-Carlo
//! detection ([`qkdsim`]), timestamp recovery and coincidence filtering
//! ([`timesync`]), and classical post-processing down to the secret key
//! ([`keyproc`]). The [`scenario`] module ties the stages into a reproducible
//! pipeline driven by TOML scenario files; the `qkdlab` binary exposes it on
//! the command line.
//!
//! All randomized stages are seeded explicitly and are deterministic for a
//! fixed seed: running the same scenario twice yields byte-identical event
//! logs and reports.

pub mod keyproc;
pub mod linkgeom;
pub mod polcomp;
pub mod qkdsim;
pub mod rng;
pub mod scenario;
pub mod timesync;
pub mod tracksim;

pub use linkgeom::Trajectory;
pub use scenario::{RunReport, Scenario};
