//! Seeded Monte Carlo source of correlated electron-photon event streams.
//!
//! Each run measures one basis on its own ensemble of pairs, as each
//! experimental dataset does. The photon of a pair is drawn around its
//! electron (position) or around the reflected electron wavevector
//! (momentum) with Gaussian spreads `dx_minus` and `dk_plus`. This is a
//! classical sampler of the measured marginals, not a model of an entangled
//! state: no single run constrains both bases at once.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector2;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson, Uniform};

use crate::error::{Error, Result};
use crate::events::{write_electron_file_with_grid, write_photon_file, ElectronEvent, PhotonEvent};
use crate::image::{detector_center, Basis, Calibration};
use crate::optics::{mask_value, rotate, MaskSpec, OpticsChain, OpticsConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimBasis {
    Position,
    Momentum,
    /// Electron recorded in `electron` basis, grating in the conjugate one,
    /// photon drawn independently of the recorded electron.
    Mixed { electron: Basis },
}

impl SimBasis {
    pub fn electron_basis(self) -> Basis {
        match self {
            SimBasis::Position => Basis::Position,
            SimBasis::Momentum => Basis::Momentum,
            SimBasis::Mixed { electron } => electron,
        }
    }

    pub fn photon_basis(self) -> Basis {
        match self {
            SimBasis::Position => Basis::Position,
            SimBasis::Momentum => Basis::Momentum,
            SimBasis::Mixed { electron: Basis::Position } => Basis::Momentum,
            SimBasis::Mixed { electron: Basis::Momentum } => Basis::Position,
        }
    }
}

/// Electron intensity profile in the sample plane (position) or the
/// diffraction plane (momentum).
#[derive(Debug, Clone, PartialEq)]
pub enum BeamProfile {
    /// Uniform disc of `beam_diameter_um` in position, isotropic Gaussian of
    /// width `beam_divergence_k` in momentum.
    Default,
    /// Gaussian of the given width truncated to the beam disc (position only).
    TruncatedGaussian { sigma_um: f64 },
    /// Relative intensity per detector pixel.
    Template(Array2<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub basis: SimBasis,
    pub n_electrons: usize,
    pub pair_probability: f64,
    pub dx_minus_um: f64,
    pub dk_plus_inv_um: f64,
    pub beam_diameter_um: f64,
    /// Width of the electron wavevector distribution, µm⁻¹.
    pub beam_divergence_k: f64,
    pub profile: BeamProfile,
    pub delay_ns: i64,
    pub jitter_sigma_ns: f64,
    pub background_photon_rate_hz: f64,
    pub stray_electron_rate_hz: f64,
    pub electron_rate_hz: f64,
    pub glass_transmissivity: f64,
    /// Beam drift in pixels per package, along detector x and y.
    pub drift_px_per_package: [f64; 2],
    pub package_size: usize,
    /// Grating in the photon path; `false` gives a flat-field run.
    pub mask_inserted: bool,
    pub rng_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            basis: SimBasis::Position,
            n_electrons: 100_000,
            pair_probability: 7.8e-4,
            dx_minus_um: 1.45,
            dk_plus_inv_um: 0.49,
            beam_diameter_um: 23.0,
            beam_divergence_k: 1.2,
            profile: BeamProfile::Default,
            delay_ns: -40,
            jitter_sigma_ns: 20.0,
            background_photon_rate_hz: 0.0,
            stray_electron_rate_hz: 0.0,
            // With the default pair probability and a half-open grating this
            // gives about 7 coincidences per second.
            electron_rate_hz: 2.0e4,
            glass_transmissivity: 0.9,
            drift_px_per_package: [0.0, 0.0],
            package_size: crate::events::DEFAULT_PACKAGE_SIZE,
            mask_inserted: true,
            rng_seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(0.0..=1.0).contains(&self.pair_probability) {
            return bad("pair_probability must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.glass_transmissivity) {
            return bad("glass_transmissivity must lie in [0, 1]");
        }
        for (name, v) in [
            ("dx_minus_um", self.dx_minus_um),
            ("dk_plus_inv_um", self.dk_plus_inv_um),
            ("beam_diameter_um", self.beam_diameter_um),
            ("beam_divergence_k", self.beam_divergence_k),
            ("electron_rate_hz", self.electron_rate_hz),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.jitter_sigma_ns < 0.0 || self.background_photon_rate_hz < 0.0 || self.stray_electron_rate_hz < 0.0 {
            return bad("jitter and background rates must be non-negative");
        }
        if self.package_size == 0 {
            return bad("package_size must be at least 1");
        }
        if let BeamProfile::TruncatedGaussian { sigma_um } = self.profile {
            if !(sigma_um > 0.0) {
                return bad("profile sigma must be positive");
            }
        }
        if let BeamProfile::Template(t) = &self.profile {
            if t.iter().any(|&v| v < 0.0 || !v.is_finite()) || t.sum() <= 0.0 {
                return bad("beam template must be non-negative with a positive sum");
            }
        }
        Ok(())
    }
}

/// Streaming mean and variance.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    pub n: u64,
    pub mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub config: SimConfig,
    pub beam_electrons: usize,
    pub recorded_electrons: usize,
    pub pairs: usize,
    pub transmitted_pairs: usize,
    /// Pair photons lost outside the optics acceptance.
    pub aperture_lost: usize,
    pub background_photons: usize,
    pub stray_electrons: usize,
    pub dropped_off_grid: usize,
    pub duration_ns: i64,
    /// `x_e - x_γ` (position) or `k_e + k_γ` (momentum) per axis, over all pairs.
    pub offset_stats: [RunningStats; 2],
}

impl GroundTruth {
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(s, "basis: {:?}", c.basis);
        let _ = writeln!(s, "seed: {}", c.rng_seed);
        let _ = writeln!(s, "dx_minus_um: {}", c.dx_minus_um);
        let _ = writeln!(s, "dk_plus_inv_um: {}", c.dk_plus_inv_um);
        let _ = writeln!(s, "pair_probability: {}", c.pair_probability);
        let _ = writeln!(s, "mask_inserted: {}", c.mask_inserted);
        let _ = writeln!(s, "beam_electrons: {}", self.beam_electrons);
        let _ = writeln!(s, "recorded_electrons: {}", self.recorded_electrons);
        let _ = writeln!(s, "pairs: {}", self.pairs);
        let _ = writeln!(s, "transmitted_pairs: {}", self.transmitted_pairs);
        let _ = writeln!(s, "aperture_lost: {}", self.aperture_lost);
        let _ = writeln!(s, "background_photons: {}", self.background_photons);
        let _ = writeln!(s, "stray_electrons: {}", self.stray_electrons);
        let _ = writeln!(s, "dropped_off_grid: {}", self.dropped_off_grid);
        let _ = writeln!(s, "duration_ns: {}", self.duration_ns);
        let _ = writeln!(s, "offset_std_u: {}", self.offset_stats[0].variance().sqrt());
        let _ = writeln!(s, "offset_std_v: {}", self.offset_stats[1].variance().sqrt());
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub electrons: Vec<ElectronEvent>,
    pub photons: Vec<PhotonEvent>,
    pub truth: GroundTruth,
}

impl SimOutput {
    /// Writes `<stem>.epev`, `<stem>.phev` and `<stem>.truth.txt` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        write_electron_file_with_grid(dir.join(format!("{stem}.epev")), &self.electrons, crate::GRID as u16)?;
        write_photon_file(dir.join(format!("{stem}.phev")), &self.photons)?;
        std::fs::write(dir.join(format!("{stem}.truth.txt")), self.truth.to_text())?;
        Ok(())
    }
}

struct TemplateSampler {
    cumulative: Vec<f64>,
    cols: usize,
}

impl TemplateSampler {
    fn new(t: &Array2<f64>) -> Self {
        let mut acc = 0.0;
        let cumulative = t
            .iter()
            .map(|v| {
                acc += v;
                acc
            })
            .collect();
        Self { cumulative, cols: t.ncols() }
    }

    /// Continuous pixel coordinates (column, row).
    fn sample(&self, rng: &mut ChaCha8Rng) -> (f64, f64) {
        let total = *self.cumulative.last().unwrap();
        let u = rng.random::<f64>() * total;
        let i = self.cumulative.partition_point(|&c| c <= u).min(self.cumulative.len() - 1);
        let (r, c) = (i / self.cols, i % self.cols);
        (c as f64 + rng.random::<f64>() - 0.5, r as f64 + rng.random::<f64>() - 0.5)
    }
}

/// Simulates one run. `mask` is used when `cfg.mask_inserted` is set.
pub fn simulate(
    cfg: &SimConfig,
    optics: &OpticsConfig,
    mask: &MaskSpec,
    cal: &Calibration,
) -> Result<SimOutput> {
    cfg.validate()?;
    cal.validate()?;
    let chain = OpticsChain::new(optics)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let e_basis = cfg.basis.electron_basis();
    let g_basis = cfg.basis.photon_basis();
    let grid = crate::GRID;
    let center = detector_center(grid) as f64;
    let scale = cal.scale(e_basis);
    let phi = optics.phi_deg(e_basis);
    let template = match &cfg.profile {
        BeamProfile::Template(t) => Some(TemplateSampler::new(t)),
        _ => None,
    };

    let gap = Exp::new(cfg.electron_rate_hz * 1e-9).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let jitter = Normal::new(0.0, cfg.jitter_sigma_ns).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let spread = match g_basis {
        Basis::Position => cfg.dx_minus_um,
        Basis::Momentum => cfg.dk_plus_inv_um,
    };
    let spread = Normal::new(0.0, spread).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let draw_coordinate = |rng: &mut ChaCha8Rng, basis: Basis| -> Vector2<f64> {
        if let Some(t) = &template {
            let (c, r) = t.sample(rng);
            let s = cal.scale(basis);
            return rotate(Vector2::new((c - center) * s, (r - center) * s), optics.phi_deg(basis));
        }
        match basis {
            Basis::Position => {
                let radius = 0.5 * cfg.beam_diameter_um;
                loop {
                    let p = match cfg.profile {
                        BeamProfile::TruncatedGaussian { sigma_um } => {
                            let n = Normal::new(0.0, sigma_um).unwrap();
                            Vector2::new(n.sample(rng), n.sample(rng))
                        }
                        _ => {
                            let u = Uniform::new(-radius, radius).unwrap();
                            Vector2::new(u.sample(rng), u.sample(rng))
                        }
                    };
                    if p.norm() <= radius {
                        return p;
                    }
                }
            }
            Basis::Momentum => {
                let n = Normal::new(0.0, cfg.beam_divergence_k).unwrap();
                Vector2::new(n.sample(rng), n.sample(rng))
            }
        }
    };

    let mut electrons = Vec::with_capacity(cfg.n_electrons);
    let mut photons = Vec::new();
    let mut truth = GroundTruth {
        config: cfg.clone(),
        beam_electrons: cfg.n_electrons,
        recorded_electrons: 0,
        pairs: 0,
        transmitted_pairs: 0,
        aperture_lost: 0,
        background_photons: 0,
        stray_electrons: 0,
        dropped_off_grid: 0,
        duration_ns: 0,
        offset_stats: [RunningStats::default(); 2],
    };

    let mut t = 0.0f64;
    for i in 0..cfg.n_electrons {
        t += gap.sample(&mut rng);
        let toa = t.round() as i64;
        let c_e = draw_coordinate(&mut rng, e_basis);

        let package = (i / cfg.package_size) as f64;
        let det = rotate(c_e, -phi) / scale;
        let px = (center + det.x + (package * cfg.drift_px_per_package[0]).round()).round();
        let py = (center + det.y + (package * cfg.drift_px_per_package[1]).round()).round();
        if (0.0..grid as f64).contains(&px) && (0.0..grid as f64).contains(&py) {
            electrons.push(ElectronEvent::new(px as u16, py as u16, toa, rng.random_range(1..100)));
        } else {
            truth.dropped_off_grid += 1;
        }

        if rng.random::<f64>() >= cfg.pair_probability {
            continue;
        }
        truth.pairs += 1;
        let source = match cfg.basis {
            SimBasis::Mixed { .. } => draw_coordinate(&mut rng, g_basis),
            _ => c_e,
        };
        let noise = Vector2::new(spread.sample(&mut rng), spread.sample(&mut rng));
        let (c_g, mapped) = match g_basis {
            Basis::Position => {
                let c_g = source + noise;
                (c_g, chain.position_to_mask(c_g))
            }
            Basis::Momentum => {
                let c_g = -source + noise;
                (c_g, chain.wavevector_to_mask(c_g))
            }
        };
        if !matches!(cfg.basis, SimBasis::Mixed { .. }) {
            let off = match g_basis {
                Basis::Position => c_e - c_g,
                Basis::Momentum => c_e + c_g,
            };
            truth.offset_stats[0].push(off.x);
            truth.offset_stats[1].push(off.y);
        }
        let m = match mapped {
            Ok(m) => m,
            Err(_) => {
                truth.aperture_lost += 1;
                continue;
            }
        };
        let open = if cfg.mask_inserted { mask_value(m.x, m.y, mask) as f64 } else { 1.0 };
        if rng.random::<f64>() < open * cfg.glass_transmissivity {
            truth.transmitted_pairs += 1;
            let tp = t + cfg.delay_ns as f64 + jitter.sample(&mut rng);
            photons.push(PhotonEvent { t_ns: tp.round() as i64 });
        }
    }
    let duration = t.ceil().max(1.0);
    truth.duration_ns = duration as i64;

    let poisson_count = |rng: &mut ChaCha8Rng, rate_hz: f64| -> usize {
        let mean = rate_hz * duration * 1e-9;
        if mean > 0.0 {
            Poisson::new(mean).map(|p| p.sample(rng) as usize).unwrap_or(0)
        } else {
            0
        }
    };
    let nb = poisson_count(&mut rng, cfg.background_photon_rate_hz);
    for _ in 0..nb {
        photons.push(PhotonEvent { t_ns: (rng.random::<f64>() * duration).round() as i64 });
    }
    truth.background_photons = nb;
    let ns = poisson_count(&mut rng, cfg.stray_electron_rate_hz);
    for _ in 0..ns {
        let x = rng.random_range(0..grid as u16);
        let y = rng.random_range(0..grid as u16);
        let toa = (rng.random::<f64>() * duration).round() as i64;
        electrons.push(ElectronEvent::new(x, y, toa, rng.random_range(1..100)));
    }
    truth.stray_electrons = ns;
    truth.recorded_electrons = electrons.len();

    electrons.sort_by_key(|e| e.toa_ns);
    photons.sort();
    Ok(SimOutput { electrons, photons, truth })
}
