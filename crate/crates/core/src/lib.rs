//! Simulation and analysis of spatial-polarization hyperentangled photon
//! pairs recorded by a time-stamping single-photon camera.
//!
//! The crate is organized along the data flow:
//!
//! - [`polcore`]: two-qubit polarization algebra (analyzer projectors, Born
//!   probabilities, concurrence, entanglement of formation, biphoton phase).
//! - [`source`]: parametric model of the biphoton state.
//! - [`synth`]: raw camera event synthesis.
//! - [`pipeline`]: clustering, centroiding and coincidence finding.
//! - [`spatial`]: superpixel correlation matrices, width fits, EPR products.
//! - [`certify`]: entanglement-dimensionality certification.
//! - [`tomo`]: spatially resolved polarization tomography.
//! - [`config`] and [`io`]: run configuration and file formats.
//! - [`analysis`]: the end-to-end chain from raw events to a summary report.

pub mod analysis;
pub mod certify;
pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod polcore;
pub mod source;
pub mod spatial;
pub mod synth;
pub mod tomo;

pub use error::{Error, Result};
