//! Cone-beam CT simulation and sparse-view reconstruction.
//!
//! The crate covers the full path from a synthetic phantom to a
//! reconstructed volume: circular-orbit cone-beam geometry, a ray-marched
//! forward projector with its exact adjoint, a trainable Gaussian-kernel
//! scene representation with analytic gradients, classical iterative
//! solvers (SART, ASD-POCS), and a gradient-based reconstruction loop that
//! can splice a pluggable slice-denoising model into the optimization as a
//! moving regularization target.
//!
//! Entry points:
//! - [`geometry::ConeBeamGeometry`] describes the scanner.
//! - [`projector`] renders and backprojects dense volumes.
//! - [`representations`] holds the trainable volume parameterizations.
//! - [`solvers`] has the classical baselines.
//! - [`diffnr`] runs the fixer-augmented reconstruction.
//! - [`formats`] reads and writes the on-disk containers.
//!
//! The `examples/` directory shows one runnable pipeline per capability.

pub mod curation;
pub mod diffnr;
pub mod error;
pub mod fixer;
pub mod formats;
pub mod geometry;
pub mod objectives;
pub mod phantom;
pub mod projector;
pub mod solvers;
pub mod representations;
pub mod volume;

pub use error::{Error, Result};
