//! Simulation and analysis of a polarisation-entangled photon link observed
//! through two independently clocked time-tagging stations.
//!
//! The pipeline runs in two halves joined by tag files:
//!
//! * [`link`] generates the Malta and Sicily tag streams from a source,
//!   fibre, detector and clock model.
//! * [`correlation`] recovers the link delay and pairs up coincidences,
//!   and [`analysis`] turns coincidence counts into visibilities, CHSH
//!   values, QBER and key rates.
//!
//! [`state`] holds the exact two-photon polarisation algebra used both to
//! drive the simulation and as the reference for the analysis.

pub mod state;
pub mod link;
pub mod tags;
pub mod correlation;
pub mod analysis;
pub mod experiment;
pub mod cli;
