//! Stream-to-image chain: drift correction, coincidence matching, false
//! coincidence estimate and image accumulation.

use crate::coincidence::{correct_stream, false_coincidence_rate, match_pairs, CoincidencePair, FalseRate, MatchConfig};
use crate::error::Result;
use crate::events::{ElectronEvent, PhotonEvent};
use crate::image::{accumulate, Calibration, CoincidenceImage};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub matching: MatchConfig,
    pub calibration: Calibration,
    /// Events per drift-correction package; `None` skips drift correction.
    pub package_size: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { matching: MatchConfig::default(), calibration: Calibration::default(), package_size: Some(crate::events::DEFAULT_PACKAGE_SIZE) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub pairs: Vec<CoincidencePair>,
    pub image: CoincidenceImage,
    pub false_rate: FalseRate,
    /// Electrons dropped off the grid by drift correction.
    pub dropped: usize,
}

/// Runs the chain on time-sorted streams in the basis of `cfg.matching`.
pub fn stream_to_image(electrons: &[ElectronEvent], photons: &[PhotonEvent], cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let basis = cfg.matching.basis;
    let (corrected, dropped) = match cfg.package_size {
        Some(n) if !electrons.is_empty() => correct_stream(electrons, basis, n, crate::GRID)?,
        _ => (electrons.to_vec(), 0),
    };
    let pairs = match_pairs(&corrected, photons, &cfg.matching)?;
    let false_rate = false_coincidence_rate(&corrected, photons, &cfg.matching)?;
    let image = accumulate(&pairs, basis, &cfg.calibration);
    Ok(PipelineOutput { pairs, image, false_rate, dropped })
}
