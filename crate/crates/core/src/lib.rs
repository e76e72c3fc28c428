//! Linear eigenvalue statistics (LES) of sliding-window random matrices for
//! distribution-grid telemetry.
//!
//! The crate turns `N × T` blocks of standardized measurements into sample
//! covariance spectra, compares them against Marchenko-Pastur and single-ring
//! predictions, and tracks the LES `τ_φ = Σ φ(λ_i)` over time against its
//! central-limit band. Spikes in the traces of concatenated voltage/power
//! matrices localize change points; change points that no routine load
//! pattern explains become step-shaped unknown patterns that are fed back into
//! a least-squares disaggregation.
//!
//! Module map:
//!
//! * [`ingest`] - CSV loading, row standardization, sliding windows.
//! * [`concat`] - factor duplication with noise and matrix stacking.
//! * [`spectral`] - covariance spectra, M-P law, ring transform, KS distance.
//! * [`les`] - test functions, LES mean and CLT variance.
//! * [`detect`] - traces, hypothesis test, change-point localization, attribution.
//! * [`estimate`] - least-squares coefficient recovery.
//! * [`simulate`] - radial feeder, load synthesis, events, builtin scenarios.
//! * [`cli`] - the `simulate | detect | estimate | rmt-check` pipeline.
//!
//! Runnable walkthroughs live in `examples/`.

pub mod cli;
pub mod concat;
pub mod detect;
pub mod error;
pub mod estimate;
pub mod ingest;
pub mod les;
pub mod manifest;
pub mod quadrature;
pub mod rng;
pub mod simulate;
pub mod spectral;

pub use error::{Error, Result};
