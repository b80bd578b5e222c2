//! Electron-photon coincidence ghost imaging and the position-momentum
//! entanglement witness.
//!
//! The pipeline runs from time-stamped detector events through coincidence
//! matching, ghost-image formation and geometric mask modelling to PSF fits
//! and the witness verdict. A seeded simulator provides ground truth.

// `!(x > 0.0)` style guards reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calib;
pub mod coincidence;
pub mod error;
pub mod events;
pub mod filters;
pub mod fit;
pub mod image;
pub mod optics;
pub mod pipeline;
pub mod sim;
pub mod simplex;
pub mod witness;

/// Detector edge length in pixels.
pub const GRID: usize = events::DEFAULT_GRID as usize;

pub use coincidence::{CoincidencePair, G2Histogram, MatchConfig};
pub use error::{Error, GeometryError, Result};
pub use events::{ClockSync, ElectronEvent, EventPackage, PhotonEvent};
pub use fit::{FitConfig, FitMode, FitParams, FitResult, Psf};
pub use image::{Basis, Calibration, CoincidenceImage, FlatField};
pub use optics::{EffectiveMask, MaskSpec, OpticsConfig};
pub use witness::{ErrorBudget, WitnessVerdict};
