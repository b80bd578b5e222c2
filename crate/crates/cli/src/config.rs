//! Run configuration: a TOML file with one table per stage. Every physical
//! key carries its unit in the name; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use epghost_core::fit::FitConfig;
use epghost_core::image::FlatFieldParams;
use epghost_core::pipeline::PipelineConfig;
use epghost_core::sim::{BeamProfile, SimBasis, SimConfig};
use epghost_core::simplex::NelderMeadOptions;
use epghost_core::witness::{ErrorBudget, SubsampleConfig};
use epghost_core::{Basis, Calibration, ClockSync, FitMode, MaskSpec, MatchConfig, OpticsConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub optics: OpticsSection,
    pub mask: MaskSection,
    pub calibration: CalibrationSection,
    #[serde(rename = "match")]
    pub matching: MatchSection,
    pub sim: SimSection,
    pub flatfield: FlatFieldSection,
    pub fit: FitSection,
    pub witness: WitnessSection,
    pub calibrate: CalibrateSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpticsSection {
    pub f_mirror_um: f64,
    pub f_lens_mm: f64,
    pub d_focus_mm: f64,
    pub beam_pos_x_um: f64,
    pub beam_pos_y_um: f64,
    pub beam_pos_z_um: f64,
    pub phi_x_deg: f64,
    pub phi_k_deg: f64,
    pub magnification_nominal: f64,
    pub aperture_radius_mm: f64,
    pub image_distance_mm: f64,
    pub fourier_offset_mm: f64,
    pub wavelength_um: f64,
}

impl Default for OpticsSection {
    fn default() -> Self {
        let o = OpticsConfig::default();
        Self {
            f_mirror_um: o.f_mirror_um,
            f_lens_mm: o.f_lens_mm,
            d_focus_mm: o.d_focus_mm,
            beam_pos_x_um: o.beam_pos_um[0],
            beam_pos_y_um: o.beam_pos_um[1],
            beam_pos_z_um: o.beam_pos_um[2],
            phi_x_deg: o.phi_x_deg,
            phi_k_deg: o.phi_k_deg,
            magnification_nominal: o.magnification_nominal,
            aperture_radius_mm: o.aperture_radius_mm,
            image_distance_mm: o.image_distance_mm,
            fourier_offset_mm: o.fourier_offset_mm,
            wavelength_um: o.wavelength_um,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSection {
    pub period_x_um: f64,
    pub offset_x_um: f64,
    pub period_k_um: f64,
    pub offset_k_um: f64,
}

impl Default for MaskSection {
    fn default() -> Self {
        let (x, k) = (MaskSpec::position(), MaskSpec::momentum());
        Self { period_x_um: x.period_um, offset_x_um: x.offset_um, period_k_um: k.period_um, offset_k_um: k.offset_um }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub pos_scale_um_per_px: f64,
    pub pos_scale_err_um_per_px: f64,
    pub mom_scale_per_um_per_px: f64,
    pub mom_scale_err_per_um_per_px: f64,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        let c = Calibration::default();
        Self {
            pos_scale_um_per_px: c.pos_scale,
            pos_scale_err_um_per_px: c.pos_scale_err,
            mom_scale_per_um_per_px: c.mom_scale,
            mom_scale_err_per_um_per_px: c.mom_scale_err,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchSection {
    pub expected_delay_ns: i64,
    pub window_halfwidth_ns: i64,
    pub false_window_center_ns: i64,
    pub clock_offset_ns: i64,
    /// Zero disables drift correction.
    pub package_size_events: usize,
    pub g2_bin_ns: f64,
    pub g2_range_ns: f64,
}

impl Default for MatchSection {
    fn default() -> Self {
        let m = MatchConfig::default();
        Self {
            expected_delay_ns: m.expected_delay_ns,
            window_halfwidth_ns: m.window_halfwidth_ns,
            false_window_center_ns: m.false_window_center_ns,
            clock_offset_ns: 0,
            package_size_events: epghost_core::events::DEFAULT_PACKAGE_SIZE,
            g2_bin_ns: 10.0,
            g2_range_ns: 500.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub basis: String,
    pub mask_inserted: bool,
    pub n_electrons: usize,
    pub pair_probability: f64,
    pub dx_minus_um: f64,
    pub dk_plus_per_um: f64,
    pub beam_diameter_um: f64,
    pub beam_divergence_per_um: f64,
    /// Zero gives a uniform disc; otherwise a Gaussian of this width cut to the disc.
    pub beam_sigma_um: f64,
    pub delay_ns: i64,
    pub jitter_sigma_ns: f64,
    pub background_photon_rate_hz: f64,
    pub stray_electron_rate_hz: f64,
    pub electron_rate_hz: f64,
    pub glass_transmissivity: f64,
    pub drift_x_px_per_package: f64,
    pub drift_y_px_per_package: f64,
    pub package_size_events: usize,
    pub seed: u64,
}

impl Default for SimSection {
    fn default() -> Self {
        let s = SimConfig::default();
        Self {
            basis: "position".into(),
            mask_inserted: s.mask_inserted,
            n_electrons: s.n_electrons,
            pair_probability: s.pair_probability,
            dx_minus_um: s.dx_minus_um,
            dk_plus_per_um: s.dk_plus_inv_um,
            beam_diameter_um: s.beam_diameter_um,
            beam_divergence_per_um: s.beam_divergence_k,
            beam_sigma_um: 0.0,
            delay_ns: s.delay_ns,
            jitter_sigma_ns: s.jitter_sigma_ns,
            background_photon_rate_hz: s.background_photon_rate_hz,
            stray_electron_rate_hz: s.stray_electron_rate_hz,
            electron_rate_hz: s.electron_rate_hz,
            glass_transmissivity: s.glass_transmissivity,
            drift_x_px_per_package: s.drift_px_per_package[0],
            drift_y_px_per_package: s.drift_px_per_package[1],
            package_size_events: s.package_size,
            seed: s.rng_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlatFieldSection {
    pub threshold_fraction: f64,
    pub iterations: usize,
    /// Zero picks the basis default.
    pub sigma_px: f64,
}

impl Default for FlatFieldSection {
    fn default() -> Self {
        let p = FlatFieldParams::default();
        Self { threshold_fraction: p.threshold_fraction, iterations: p.iterations, sigma_px: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub mode: String,
    pub tol_rel: f64,
    pub max_iter: usize,
    pub restarts: usize,
    pub phase_scan_steps: usize,
}

impl Default for FitSection {
    fn default() -> Self {
        let f = FitConfig::default();
        Self {
            mode: f.mode.to_string(),
            tol_rel: f.nelder_mead.tol_rel,
            max_iter: f.nelder_mead.max_iter,
            restarts: f.restarts,
            phase_scan_steps: f.phase_scan_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WitnessSection {
    pub n_batches: usize,
    pub batch_size_pairs: usize,
    pub cal_x_um: f64,
    pub cal_k_per_um: f64,
    pub seed: u64,
}

impl Default for WitnessSection {
    fn default() -> Self {
        let s = SubsampleConfig::default();
        Self { n_batches: s.n_batches, batch_size_pairs: s.batch_size, cal_x_um: ErrorBudget::DEFAULT_CAL_X, cal_k_per_um: ErrorBudget::DEFAULT_CAL_K, seed: s.seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateSection {
    pub known_spacing_per_um: f64,
    pub known_spacing_nm: f64,
    pub min_separation_px: f64,
    pub threshold_counts: f64,
    pub window_half_px: usize,
}

impl Default for CalibrateSection {
    fn default() -> Self {
        Self { known_spacing_per_um: 13.57, known_spacing_nm: 462.9, min_separation_px: 20.0, threshold_counts: 50.0, window_half_px: 6 }
    }
}

/// Every key with its unit and meaning, in file order.
pub const KEYS: &[(&str, &str, &str, &str)] = &[
    ("optics", "f_mirror_um", "um", "focal length of the parabolic mirror"),
    ("optics", "f_lens_mm", "mm", "focal length of the imaging lens"),
    ("optics", "d_focus_mm", "mm", "mirror focus to lens distance"),
    ("optics", "beam_pos_x_um", "um", "beam position relative to the mirror focus, x"),
    ("optics", "beam_pos_y_um", "um", "beam position relative to the mirror focus, y"),
    ("optics", "beam_pos_z_um", "um", "beam position relative to the mirror focus, z"),
    ("optics", "phi_x_deg", "deg", "detector rotation in position mode"),
    ("optics", "phi_k_deg", "deg", "detector rotation in diffraction mode"),
    ("optics", "magnification_nominal", "1", "quoted position magnification, reported only"),
    ("optics", "aperture_radius_mm", "mm", "aperture radius behind the mirror"),
    ("optics", "image_distance_mm", "mm", "lens to position-mask plane"),
    ("optics", "fourier_offset_mm", "mm", "position-mask plane to momentum-mask plane"),
    ("optics", "wavelength_um", "um", "photon wavelength"),
    ("mask", "period_x_um", "um", "position grating period"),
    ("mask", "offset_x_um", "um", "position grating offset"),
    ("mask", "period_k_um", "um", "momentum grating period"),
    ("mask", "offset_k_um", "um", "momentum grating offset"),
    ("calibration", "pos_scale_um_per_px", "um/px", "image-mode pixel scale"),
    ("calibration", "pos_scale_err_um_per_px", "um/px", "uncertainty of the image-mode scale"),
    ("calibration", "mom_scale_per_um_per_px", "1/um/px", "diffraction-mode pixel scale"),
    ("calibration", "mom_scale_err_per_um_per_px", "1/um/px", "uncertainty of the diffraction-mode scale"),
    ("match", "expected_delay_ns", "ns", "photon minus electron arrival of true pairs"),
    ("match", "window_halfwidth_ns", "ns", "coincidence window half-width"),
    ("match", "false_window_center_ns", "ns", "centre of the accidental-coincidence window"),
    ("match", "clock_offset_ns", "ns", "added to every photon timestamp"),
    ("match", "package_size_events", "events", "drift-correction package size, 0 disables"),
    ("match", "g2_bin_ns", "ns", "g2 histogram bin width"),
    ("match", "g2_range_ns", "ns", "g2 histogram half range"),
    ("sim", "basis", "position|momentum", "measurement basis"),
    ("sim", "mask_inserted", "bool", "grating in the photon path"),
    ("sim", "n_electrons", "events", "beam electrons to simulate"),
    ("sim", "pair_probability", "1", "photon pair emission probability per electron"),
    ("sim", "dx_minus_um", "um", "position correlation width"),
    ("sim", "dk_plus_per_um", "1/um", "momentum correlation width"),
    ("sim", "beam_diameter_um", "um", "electron beam diameter"),
    ("sim", "beam_divergence_per_um", "1/um", "electron wavevector spread"),
    ("sim", "beam_sigma_um", "um", "Gaussian spot width cut to the beam disc, 0 for a uniform disc"),
    ("sim", "delay_ns", "ns", "true photon delay"),
    ("sim", "jitter_sigma_ns", "ns", "photon timing jitter"),
    ("sim", "background_photon_rate_hz", "Hz", "uncorrelated photon rate"),
    ("sim", "stray_electron_rate_hz", "Hz", "uncorrelated electron rate"),
    ("sim", "electron_rate_hz", "Hz", "beam electron rate"),
    ("sim", "glass_transmissivity", "1", "mask substrate transmission"),
    ("sim", "drift_x_px_per_package", "px", "beam drift per package along x"),
    ("sim", "drift_y_px_per_package", "px", "beam drift per package along y"),
    ("sim", "package_size_events", "events", "events per detector package"),
    ("sim", "seed", "1", "random seed, overridden by --seed"),
    ("flatfield", "threshold_fraction", "1", "beam threshold as a fraction of the median-filtered maximum"),
    ("flatfield", "iterations", "count", "masked smoothing passes"),
    ("flatfield", "sigma_px", "px", "smoothing width, 0 for the basis default"),
    ("fit", "mode", "standard|extended|psf-only", "fitted parameter set"),
    ("fit", "tol_rel", "1", "relative simplex spread at convergence"),
    ("fit", "max_iter", "count", "simplex iteration limit"),
    ("fit", "restarts", "count", "simplex restarts from the best point"),
    ("fit", "phase_scan_steps", "count", "grating offset scan before the simplex"),
    ("witness", "n_batches", "count", "subsampling batches"),
    ("witness", "batch_size_pairs", "pairs", "coincidences per batch"),
    ("witness", "cal_x_um", "um", "calibration error of the position width"),
    ("witness", "cal_k_per_um", "1/um", "calibration error of the momentum width"),
    ("witness", "seed", "1", "subsampling seed, overridden by --seed"),
    ("calibrate", "known_spacing_per_um", "1/um", "diffraction spot spacing"),
    ("calibrate", "known_spacing_nm", "nm", "grating period for the Fourier method"),
    ("calibrate", "min_separation_px", "px", "minimum distance between detected spots"),
    ("calibrate", "threshold_counts", "counts", "minimum spot peak value"),
    ("calibrate", "window_half_px", "px", "half-width of the spot fit window"),
];

/// Help text listing every configuration key.
pub fn keys_help() -> String {
    let mut s = String::from("Configuration keys (TOML, one table per section):\n");
    let mut section = "";
    for (sec, key, unit, what) in KEYS {
        if *sec != section {
            s.push_str(&format!("  [{sec}]\n"));
            section = sec;
        }
        s.push_str(&format!("    {key:<30} [{unit}] {what}\n"));
    }
    s
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let cfg = match path {
            None => Self::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.display().to_string(), source })?;
                toml::from_str(&text).map_err(|e| ConfigError::Parse { path: p.display().to_string(), message: e.to_string() })?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: epghost_core::Error| ConfigError::Invalid(e.to_string());
        self.optics().validate().map_err(inv)?;
        self.calibration().validate().map_err(inv)?;
        self.sim_config().and_then(|s| s.validate().map_err(inv))?;
        self.fit_mode()?;
        for (name, v) in [("mask.period_x_um", self.mask.period_x_um), ("mask.period_k_um", self.mask.period_k_um)] {
            if !(v > 0.0) {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        if self.matching.window_halfwidth_ns < 0 {
            return Err(ConfigError::Invalid("match.window_halfwidth_ns must be non-negative".into()));
        }
        if !(self.matching.g2_bin_ns > 0.0 && self.matching.g2_range_ns > 0.0) {
            return Err(ConfigError::Invalid("match.g2_bin_ns and match.g2_range_ns must be positive".into()));
        }
        if self.witness.n_batches < 2 || self.witness.batch_size_pairs == 0 {
            return Err(ConfigError::Invalid("witness needs at least two non-empty batches".into()));
        }
        if !(self.witness.cal_x_um >= 0.0 && self.witness.cal_k_per_um >= 0.0) {
            return Err(ConfigError::Invalid("witness calibration errors must be non-negative".into()));
        }
        if !(self.fit.tol_rel >= 0.0) || self.fit.max_iter == 0 {
            return Err(ConfigError::Invalid("fit.tol_rel must be non-negative and fit.max_iter positive".into()));
        }
        if !(0.0..1.0).contains(&self.flatfield.threshold_fraction) || self.flatfield.sigma_px < 0.0 {
            return Err(ConfigError::Invalid("flatfield.threshold_fraction must lie in [0, 1), sigma_px non-negative".into()));
        }
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.sim.seed = seed;
        self.witness.seed = seed;
    }

    pub fn optics(&self) -> OpticsConfig {
        let o = &self.optics;
        OpticsConfig {
            f_mirror_um: o.f_mirror_um,
            f_lens_mm: o.f_lens_mm,
            d_focus_mm: o.d_focus_mm,
            beam_pos_um: [o.beam_pos_x_um, o.beam_pos_y_um, o.beam_pos_z_um],
            phi_x_deg: o.phi_x_deg,
            phi_k_deg: o.phi_k_deg,
            magnification_nominal: o.magnification_nominal,
            aperture_radius_mm: o.aperture_radius_mm,
            image_distance_mm: o.image_distance_mm,
            fourier_offset_mm: o.fourier_offset_mm,
            wavelength_um: o.wavelength_um,
        }
    }

    pub fn mask(&self, basis: Basis) -> MaskSpec {
        match basis {
            Basis::Position => MaskSpec { period_um: self.mask.period_x_um, offset_um: self.mask.offset_x_um, ..MaskSpec::position() },
            Basis::Momentum => MaskSpec { period_um: self.mask.period_k_um, offset_um: self.mask.offset_k_um, ..MaskSpec::momentum() },
        }
    }

    pub fn calibration(&self) -> Calibration {
        let c = &self.calibration;
        Calibration {
            pos_scale: c.pos_scale_um_per_px,
            mom_scale: c.mom_scale_per_um_per_px,
            pos_scale_err: c.pos_scale_err_um_per_px,
            mom_scale_err: c.mom_scale_err_per_um_per_px,
        }
    }

    pub fn match_config(&self, basis: Basis) -> MatchConfig {
        let m = &self.matching;
        MatchConfig {
            expected_delay_ns: m.expected_delay_ns,
            window_halfwidth_ns: m.window_halfwidth_ns,
            false_window_center_ns: m.false_window_center_ns,
            basis,
        }
    }

    pub fn clock_sync(&self) -> ClockSync {
        ClockSync { offset_ns: self.matching.clock_offset_ns, expected_delay_ns: self.matching.expected_delay_ns }
    }

    pub fn pipeline(&self, basis: Basis) -> PipelineConfig {
        PipelineConfig {
            matching: self.match_config(basis),
            calibration: self.calibration(),
            package_size: (self.matching.package_size_events > 0).then_some(self.matching.package_size_events),
        }
    }

    pub fn sim_basis(&self) -> Result<Basis, ConfigError> {
        self.sim.basis.parse().map_err(|e: epghost_core::Error| ConfigError::Invalid(format!("sim.basis: {e}")))
    }

    pub fn sim_config(&self) -> Result<SimConfig, ConfigError> {
        let s = &self.sim;
        let basis = match self.sim_basis()? {
            Basis::Position => SimBasis::Position,
            Basis::Momentum => SimBasis::Momentum,
        };
        let profile = if s.beam_sigma_um > 0.0 && basis == SimBasis::Position {
            BeamProfile::TruncatedGaussian { sigma_um: s.beam_sigma_um }
        } else {
            BeamProfile::Default
        };
        Ok(SimConfig {
            basis,
            n_electrons: s.n_electrons,
            pair_probability: s.pair_probability,
            dx_minus_um: s.dx_minus_um,
            dk_plus_inv_um: s.dk_plus_per_um,
            beam_diameter_um: s.beam_diameter_um,
            beam_divergence_k: s.beam_divergence_per_um,
            profile,
            delay_ns: s.delay_ns,
            jitter_sigma_ns: s.jitter_sigma_ns,
            background_photon_rate_hz: s.background_photon_rate_hz,
            stray_electron_rate_hz: s.stray_electron_rate_hz,
            electron_rate_hz: s.electron_rate_hz,
            glass_transmissivity: s.glass_transmissivity,
            drift_px_per_package: [s.drift_x_px_per_package, s.drift_y_px_per_package],
            package_size: s.package_size_events,
            mask_inserted: s.mask_inserted,
            rng_seed: s.seed,
        })
    }

    pub fn flatfield_params(&self) -> FlatFieldParams {
        let f = &self.flatfield;
        FlatFieldParams {
            threshold_fraction: f.threshold_fraction,
            iterations: f.iterations,
            sigma_px: (f.sigma_px > 0.0).then_some(f.sigma_px),
        }
    }

    pub fn fit_mode(&self) -> Result<FitMode, ConfigError> {
        self.fit.mode.parse().map_err(|e: epghost_core::Error| ConfigError::Invalid(format!("fit.mode: {e}")))
    }

    pub fn fit_config(&self) -> Result<FitConfig, ConfigError> {
        let base = FitConfig::default();
        Ok(FitConfig {
            optics: self.optics(),
            calibration: self.calibration(),
            mask_x: self.mask(Basis::Position),
            mask_k: self.mask(Basis::Momentum),
            mode: self.fit_mode()?,
            nelder_mead: NelderMeadOptions { tol_rel: self.fit.tol_rel, max_iter: self.fit.max_iter, ..base.nelder_mead },
            restarts: self.fit.restarts,
            phase_scan_steps: self.fit.phase_scan_steps,
            ..base
        })
    }

    pub fn subsample(&self) -> SubsampleConfig {
        SubsampleConfig { n_batches: self.witness.n_batches, batch_size: self.witness.batch_size_pairs, seed: self.witness.seed }
    }

    pub fn error_budget(&self, stat_x: f64, stat_k: f64) -> ErrorBudget {
        ErrorBudget { stat_x, stat_k, cal_x: self.witness.cal_x_um, cal_k: self.witness.cal_k_per_um }
    }
}
