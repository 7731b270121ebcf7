//! Simulation of a polarization-entangled photon-pair source built around a
//! Sagnac interferometer: state preparation, detection with Poisson noise and
//! accidental coincidences, fringe fitting and CHSH analysis.

pub mod analysis;
pub mod cli;
pub mod commands;
pub mod config;
pub mod detection;
pub mod polarization;
pub mod source;
pub mod table;
