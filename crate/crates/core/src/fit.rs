//! Ghost-image model `I0 · (M_eff ∗ G)` and its joint least-absolute-error
//! fit in the position and momentum bases.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2};

use crate::error::{Error, Result};
use crate::filters::{convolve_fft, convolve_separable, gaussian_kernel, gaussian_kernel_2d};
use crate::image::{Basis, Calibration, CoincidenceImage, FlatField};
use crate::optics::{MaskRaster, MaskSpec, OpticsConfig};
use crate::simplex::{nelder_mead, NelderMeadOptions};

/// Smallest kernel width accepted by [`convolve_psf`], in pixels.
pub const MIN_SIGMA_PX: f64 = 0.1;

/// Gaussian point spread function, physical units. `sigma_u`, `sigma_v` lie
/// along the detector axes for [`convolve_psf`] and along the sample-plane
/// axes (detector axes rotated by φ) for [`convolve_psf_rotated`] and the fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psf {
    pub sigma_u: f64,
    pub sigma_v: f64,
}

/// Convolves a mask with a unit-sum Gaussian; `scale` converts the physical
/// widths to pixels.
pub fn convolve_psf(mask: &Array2<f64>, psf: &Psf, scale: f64) -> Result<Array2<f64>> {
    let su = psf.sigma_u / scale;
    let sv = psf.sigma_v / scale;
    if !(su >= MIN_SIGMA_PX && sv >= MIN_SIGMA_PX) {
        return Err(Error::InvalidArgument(format!(
            "PSF width ({su:.3}, {sv:.3}) px is below {MIN_SIGMA_PX} px"
        )));
    }
    Ok(convolve_separable(mask, &gaussian_kernel(su), &gaussian_kernel(sv)))
}

/// Convolution with the PSF whose axes are rotated by `phi_deg` from the
/// detector axes. Falls back to the separable kernel when the rotation is a
/// multiple of 90° or the PSF is isotropic.
pub fn convolve_psf_rotated(mask: &Array2<f64>, psf: &Psf, scale: f64, phi_deg: f64) -> Result<Array2<f64>> {
    let quarter = phi_deg.rem_euclid(180.0);
    if psf.sigma_u == psf.sigma_v || quarter == 0.0 {
        return convolve_psf(mask, psf, scale);
    }
    if quarter == 90.0 {
        return convolve_psf(mask, &Psf { sigma_u: psf.sigma_v, sigma_v: psf.sigma_u }, scale);
    }
    let su = psf.sigma_u / scale;
    let sv = psf.sigma_v / scale;
    if !(su >= MIN_SIGMA_PX && sv >= MIN_SIGMA_PX) {
        return Err(Error::InvalidArgument(format!(
            "PSF width ({su:.3}, {sv:.3}) px is below {MIN_SIGMA_PX} px"
        )));
    }
    Ok(convolve_fft(mask, &gaussian_kernel_2d(su, sv, phi_deg)))
}

/// `flat · blurred`, rescaled so that its sum over the beam mask equals
/// `data_total`.
pub fn build_model(flat: &FlatField, blurred_mask: &Array2<f64>, data_total: f64) -> Result<Array2<f64>> {
    model_from_parts(&flat.values, &flat.beam_mask, blurred_mask, data_total)
}

fn model_from_parts(
    flat: &Array2<f64>,
    beam_mask: &Array2<bool>,
    blurred: &Array2<f64>,
    data_total: f64,
) -> Result<Array2<f64>> {
    let mut model = flat * blurred;
    let total: f64 = model.iter().zip(beam_mask).filter(|(_, &m)| m).map(|(v, _)| v).sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("model has zero total over the beam mask".into()));
    }
    model *= data_total / total;
    Ok(model)
}

pub fn lae(data: &Array2<f64>, model: &Array2<f64>, beam_mask: &Array2<bool>) -> f64 {
    let mut sum = 0.0;
    ndarray::Zip::from(data).and(model).and(beam_mask).for_each(|&d, &m, &b| {
        if b {
            sum += (d - m).abs();
        }
    });
    sum
}

pub fn r_squared(data: &Array2<f64>, model: &Array2<f64>, beam_mask: &Array2<bool>) -> Result<f64> {
    let mut n = 0.0;
    let mut mean = 0.0;
    for (&d, &b) in data.iter().zip(beam_mask) {
        if b {
            n += 1.0;
            mean += d;
        }
    }
    if n == 0.0 {
        return Err(Error::Empty("beam mask selects no pixels"));
    }
    mean /= n;
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    ndarray::Zip::from(data).and(model).and(beam_mask).for_each(|&d, &m, &b| {
        if b {
            ss_res += (d - m) * (d - m);
            ss_tot += (d - mean) * (d - mean);
        }
    });
    if ss_tot == 0.0 {
        return Err(Error::InvalidArgument("R² undefined for constant data".into()));
    }
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitMode {
    /// PSF widths, beam position and both grating offsets.
    Standard,
    /// Standard plus the detector rotations and the focus-lens distance.
    Extended,
    /// PSF widths and grating offsets only, geometry held fixed.
    PsfOnly,
}

impl FitMode {
    pub fn n_params(self) -> usize {
        match self {
            FitMode::Standard => 9,
            FitMode::Extended => 12,
            FitMode::PsfOnly => 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitParams {
    pub psf_pos: Psf,
    pub psf_mom: Psf,
    pub beam_pos_um: [f64; 3],
    pub ell_x_um: f64,
    pub ell_k_um: f64,
    pub phi_x_deg: f64,
    pub phi_k_deg: f64,
    pub d_focus_mm: f64,
}

impl FitParams {
    pub fn from_optics(optics: &OpticsConfig) -> Self {
        Self {
            psf_pos: Psf { sigma_u: 1.0, sigma_v: 1.0 },
            psf_mom: Psf { sigma_u: 0.5, sigma_v: 0.5 },
            beam_pos_um: optics.beam_pos_um,
            ell_x_um: 0.0,
            ell_k_um: 0.0,
            phi_x_deg: optics.phi_x_deg,
            phi_k_deg: optics.phi_k_deg,
            d_focus_mm: optics.d_focus_mm,
        }
    }

    pub fn optics(&self, base: &OpticsConfig) -> OpticsConfig {
        OpticsConfig {
            beam_pos_um: self.beam_pos_um,
            phi_x_deg: self.phi_x_deg,
            phi_k_deg: self.phi_k_deg,
            d_focus_mm: self.d_focus_mm,
            ..*base
        }
    }

    pub fn psf(&self, basis: Basis) -> Psf {
        match basis {
            Basis::Position => self.psf_pos,
            Basis::Momentum => self.psf_mom,
        }
    }

    pub fn ell(&self, basis: Basis) -> f64 {
        match basis {
            Basis::Position => self.ell_x_um,
            Basis::Momentum => self.ell_k_um,
        }
    }

    fn set_ell(&mut self, basis: Basis, v: f64) {
        match basis {
            Basis::Position => self.ell_x_um = v,
            Basis::Momentum => self.ell_k_um = v,
        }
    }

    fn encode(&self, mode: FitMode) -> Vec<f64> {
        let mut v = vec![
            self.psf_pos.sigma_u,
            self.psf_pos.sigma_v,
            self.psf_mom.sigma_u,
            self.psf_mom.sigma_v,
        ];
        if mode != FitMode::PsfOnly {
            v.extend_from_slice(&self.beam_pos_um);
        }
        v.push(self.ell_x_um);
        v.push(self.ell_k_um);
        if mode == FitMode::Extended {
            v.extend_from_slice(&[self.phi_x_deg, self.phi_k_deg, self.d_focus_mm]);
        }
        v
    }

    /// Inverse of `encode`; widths are folded to positive values of at least
    /// `MIN_SIGMA_PX` and offsets wrapped into one period.
    fn decode(&self, mode: FitMode, p: &[f64], floor: (f64, f64), periods: (f64, f64)) -> Self {
        let mut out = *self;
        let w = |v: f64, fl: f64| v.abs().max(fl);
        out.psf_pos = Psf { sigma_u: w(p[0], floor.0), sigma_v: w(p[1], floor.0) };
        out.psf_mom = Psf { sigma_u: w(p[2], floor.1), sigma_v: w(p[3], floor.1) };
        let mut i = 4;
        if mode != FitMode::PsfOnly {
            out.beam_pos_um = [p[4], p[5], p[6]];
            i = 7;
        }
        out.ell_x_um = p[i].rem_euclid(periods.0);
        out.ell_k_um = p[i + 1].rem_euclid(periods.1);
        if mode == FitMode::Extended {
            out.phi_x_deg = p[i + 2];
            out.phi_k_deg = p[i + 3];
            out.d_focus_mm = p[i + 4];
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub optics: OpticsConfig,
    pub calibration: Calibration,
    pub mask_x: MaskSpec,
    pub mask_k: MaskSpec,
    pub mode: FitMode,
    pub nelder_mead: NelderMeadOptions,
    /// Starting point. `None` starts from the optics configuration with
    /// widths of half a local grating period.
    pub init: Option<FitParams>,
    /// Coarse scan of the grating offsets before the simplex starts.
    pub phase_scan_steps: usize,
    /// Maximum number of simplex restarts from the current best point.
    pub restarts: usize,
    /// A restart is kept going only while it lowers the objective by more
    /// than this fraction.
    pub restart_tol_rel: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            optics: OpticsConfig::default(),
            calibration: Calibration::default(),
            mask_x: MaskSpec::position(),
            mask_k: MaskSpec::momentum(),
            mode: FitMode::Standard,
            nelder_mead: NelderMeadOptions { tol_rel: 1e-5, ..Default::default() },
            init: None,
            phase_scan_steps: 16,
            restarts: 3,
            restart_tol_rel: 1e-4,
        }
    }
}

impl FitConfig {
    pub fn mask(&self, basis: Basis) -> &MaskSpec {
        match basis {
            Basis::Position => &self.mask_x,
            Basis::Momentum => &self.mask_k,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: FitParams,
    pub lae_x: f64,
    pub lae_k: f64,
    pub r2_x: f64,
    pub r2_k: f64,
    pub model_x: Array2<f64>,
    pub model_k: Array2<f64>,
    pub residual_x: Array2<f64>,
    pub residual_k: Array2<f64>,
    pub n_evaluations: usize,
    pub converged: bool,
    pub mode: FitMode,
    /// Best objective after each accepted simplex iteration, over all rounds.
    pub objective_history: Vec<f64>,
}

impl FitResult {
    pub fn objective(&self) -> f64 {
        self.lae_x + self.lae_k
    }

    /// Structured `key: value` report. `optics` supplies the fixed geometry
    /// that is echoed alongside the fitted values.
    pub fn report(&self, optics: &OpticsConfig) -> String {
        let p = &self.params;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(": ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("mode", self.mode.to_string());
        kv("sigma_x_um", format!("{:.6}", p.psf_pos.sigma_u));
        kv("sigma_y_um", format!("{:.6}", p.psf_pos.sigma_v));
        kv("sigma_kx_per_um", format!("{:.6}", p.psf_mom.sigma_u));
        kv("sigma_ky_per_um", format!("{:.6}", p.psf_mom.sigma_v));
        kv("beam_pos_um", format!("{:.6} {:.6} {:.6}", p.beam_pos_um[0], p.beam_pos_um[1], p.beam_pos_um[2]));
        kv("ell_x_um", format!("{:.6}", p.ell_x_um));
        kv("ell_k_um", format!("{:.6}", p.ell_k_um));
        kv("phi_x_deg", format!("{:.6}", p.phi_x_deg));
        kv("phi_k_deg", format!("{:.6}", p.phi_k_deg));
        kv("d_focus_mm", format!("{:.6}", p.d_focus_mm));
        kv("f_mirror_um", format!("{:.6}", optics.f_mirror_um));
        kv("f_lens_mm", format!("{:.6}", optics.f_lens_mm));
        kv("lae_x", format!("{:.6}", self.lae_x));
        kv("lae_k", format!("{:.6}", self.lae_k));
        kv("r2_x", format!("{:.6}", self.r2_x));
        kv("r2_k", format!("{:.6}", self.r2_k));
        kv("n_evaluations", self.n_evaluations.to_string());
        kv("converged", self.converged.to_string());
        s
    }
}

impl fmt::Display for FitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FitMode::Standard => "standard",
            FitMode::Extended => "extended",
            FitMode::PsfOnly => "psf-only",
        })
    }
}

impl FromStr for FitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "standard" => Ok(FitMode::Standard),
            "extended" => Ok(FitMode::Extended),
            "psf-only" | "psf_only" => Ok(FitMode::PsfOnly),
            other => Err(Error::Parse(format!("unknown fit mode {other:?}"))),
        }
    }
}

/// Reads the fitted parameters back from a [`FitResult::report`] text.
pub fn parse_fit_report(text: &str) -> Result<FitParams> {
    let mut map = std::collections::HashMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once(':') {
            map.insert(k.trim(), v.trim());
        }
    }
    let get = |k: &str| -> Result<f64> {
        let v = map.get(k).ok_or_else(|| Error::Parse(format!("fit report lacks {k}")))?;
        v.parse().map_err(|_| Error::Parse(format!("bad value for {k}: {v:?}")))
    };
    let beam = map.get("beam_pos_um").ok_or_else(|| Error::Parse("fit report lacks beam_pos_um".into()))?;
    let b: Vec<f64> = beam
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad beam_pos_um {beam:?}"))))
        .collect::<Result<_>>()?;
    if b.len() != 3 {
        return Err(Error::Parse(format!("beam_pos_um needs three values, got {beam:?}")));
    }
    Ok(FitParams {
        psf_pos: Psf { sigma_u: get("sigma_x_um")?, sigma_v: get("sigma_y_um")? },
        psf_mom: Psf { sigma_u: get("sigma_kx_per_um")?, sigma_v: get("sigma_ky_per_um")? },
        beam_pos_um: [b[0], b[1], b[2]],
        ell_x_um: get("ell_x_um")?,
        ell_k_um: get("ell_k_um")?,
        phi_x_deg: get("phi_x_deg")?,
        phi_k_deg: get("phi_k_deg")?,
        d_focus_mm: get("d_focus_mm")?,
    })
}

/// One basis of the joint problem, cropped to the pixels the model needs.
struct BasisProblem {
    basis: Basis,
    spec: MaskSpec,
    scale: f64,
    rows: (usize, usize),
    cols: (usize, usize),
    grid: usize,
    data: Array2<f64>,
    flat: Array2<f64>,
    beam_mask: Array2<bool>,
    data_total: f64,
    cache: Option<(GeometryKey, MaskRaster)>,
}

type GeometryKey = [u64; 5];

fn geometry_key(p: &FitParams, basis: Basis) -> GeometryKey {
    let phi = match basis {
        Basis::Position => p.phi_x_deg,
        Basis::Momentum => p.phi_k_deg,
    };
    [
        p.beam_pos_um[0].to_bits(),
        p.beam_pos_um[1].to_bits(),
        p.beam_pos_um[2].to_bits(),
        phi.to_bits(),
        p.d_focus_mm.to_bits(),
    ]
}

impl BasisProblem {
    fn new(data: &CoincidenceImage, flat: &FlatField, spec: MaskSpec, margin_px: usize) -> Result<Self> {
        if data.basis != flat.basis {
            return Err(Error::InvalidArgument("data and flat field bases differ".into()));
        }
        if data.counts.dim() != flat.values.dim() {
            return Err(Error::InvalidArgument("data and flat field grids differ".into()));
        }
        let grid = data.grid();
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        for ((r, c), &m) in flat.beam_mask.indexed_iter() {
            if m {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
        if r0 == usize::MAX {
            return Err(Error::Empty("flat field has an empty beam mask"));
        }
        let rows = (r0.saturating_sub(margin_px), (r1 + margin_px + 1).min(grid));
        let cols = (c0.saturating_sub(margin_px), (c1 + margin_px + 1).min(grid));
        let win = s![rows.0..rows.1, cols.0..cols.1];
        let data_c = data.counts.slice(win).to_owned();
        let beam_mask = flat.beam_mask.slice(win).to_owned();
        let data_total = data_c.iter().zip(&beam_mask).filter(|(_, &m)| m).map(|(v, _)| v).sum();
        if !(data_total > 0.0) {
            return Err(Error::Empty("no counts inside the beam mask"));
        }
        Ok(Self {
            basis: data.basis,
            spec,
            scale: data.scale,
            rows,
            cols,
            grid,
            data: data_c,
            flat: flat.values.slice(win).to_owned(),
            beam_mask,
            data_total,
            cache: None,
        })
    }

    fn raster(&mut self, p: &FitParams, base: &OpticsConfig, cal: &Calibration) -> Result<&MaskRaster> {
        let key = geometry_key(p, self.basis);
        if self.cache.as_ref().is_none_or(|(k, _)| *k != key) {
            let optics = p.optics(base);
            let raster = MaskRaster::compute_window(self.basis, &optics, cal, self.rows, self.cols)?;
            self.cache = Some((key, raster));
        }
        Ok(&self.cache.as_ref().unwrap().1)
    }

    fn model(&mut self, p: &FitParams, base: &OpticsConfig, cal: &Calibration) -> Result<Array2<f64>> {
        let spec = MaskSpec { offset_um: p.ell(self.basis), ..self.spec };
        let psf = p.psf(self.basis);
        let scale = self.scale;
        let phi = p.optics(base).phi_deg(self.basis);
        let mask = self.raster(p, base, cal)?.mask(&spec).values;
        let blurred = convolve_psf_rotated(&mask, &psf, scale, phi)?;
        model_from_parts(&self.flat, &self.beam_mask, &blurred, self.data_total)
    }

    fn lae(&mut self, p: &FitParams, base: &OpticsConfig, cal: &Calibration) -> f64 {
        match self.model(p, base, cal) {
            Ok(m) => lae(&self.data, &m, &self.beam_mask),
            // A mask that vanishes on the beam explains nothing.
            Err(_) => 2.0 * self.data_total,
        }
    }

    fn embed(&self, window: &Array2<f64>) -> Array2<f64> {
        let mut full = Array2::zeros((self.grid, self.grid));
        full.slice_mut(s![self.rows.0..self.rows.1, self.cols.0..self.cols.1]).assign(window);
        full
    }

    /// Mask-plane distance per physical unit at the window centre, used for
    /// the default initial widths.
    fn local_period(&mut self, p: &FitParams, base: &OpticsConfig, cal: &Calibration) -> Result<f64> {
        let spec = self.spec;
        let scale = self.scale;
        let raster = self.raster(p, base, cal)?;
        let (h, w) = raster.xp.dim();
        let (r, c) = (h / 2, w / 2);
        let ok = |r: usize, c: usize| raster.valid[[r, c]];
        if !(ok(r, c) && ok(r, c + 1) && ok(r + 1, c)) {
            return Err(Error::InvalidArgument("no valid mapping at the window centre".into()));
        }
        let s = |r: usize, c: usize| spec.coordinate(raster.xp[[r, c]], raster.yp[[r, c]]);
        let gx = s(r, c + 1) - s(r, c);
        let gy = s(r + 1, c) - s(r, c);
        let grad = (gx * gx + gy * gy).sqrt() / scale;
        Ok(spec.period_um / grad)
    }
}

fn default_init(
    px: &mut BasisProblem,
    pk: &mut BasisProblem,
    cfg: &FitConfig,
) -> Result<FitParams> {
    let mut p = FitParams::from_optics(&cfg.optics);
    let half_x = 0.5 * px.local_period(&p, &cfg.optics, &cfg.calibration)?;
    let half_k = 0.5 * pk.local_period(&p, &cfg.optics, &cfg.calibration)?;
    p.psf_pos = Psf { sigma_u: half_x, sigma_v: half_x };
    p.psf_mom = Psf { sigma_u: half_k, sigma_v: half_k };
    Ok(p)
}

fn phase_scan(prob: &mut BasisProblem, p: &mut FitParams, cfg: &FitConfig) {
    if cfg.phase_scan_steps == 0 {
        return;
    }
    let g = prob.spec.period_um;
    let mut best = (prob.lae(p, &cfg.optics, &cfg.calibration), p.ell(prob.basis));
    for i in 0..cfg.phase_scan_steps {
        let ell = g * i as f64 / cfg.phase_scan_steps as f64;
        let mut q = *p;
        q.set_ell(prob.basis, ell);
        let v = prob.lae(&q, &cfg.optics, &cfg.calibration);
        if v < best.0 {
            best = (v, ell);
        }
    }
    p.set_ell(prob.basis, best.1);
}

fn step_scales(p: &FitParams, mode: FitMode, periods: (f64, f64)) -> Vec<f64> {
    let mut v = vec![
        0.1 * p.psf_pos.sigma_u,
        0.1 * p.psf_pos.sigma_v,
        0.1 * p.psf_mom.sigma_u,
        0.1 * p.psf_mom.sigma_v,
    ];
    if mode != FitMode::PsfOnly {
        v.extend_from_slice(&[2.0, 2.0, 2.0]);
    }
    v.push(0.1 * periods.0);
    v.push(0.1 * periods.1);
    if mode == FitMode::Extended {
        v.extend_from_slice(&[1.0, 1.0, 5.0]);
    }
    v
}

/// Jointly minimizes `LAE_x + LAE_k` over the free parameters of `cfg.mode`.
pub fn joint_fit(
    data_x: &CoincidenceImage,
    data_k: &CoincidenceImage,
    flat_x: &FlatField,
    flat_k: &FlatField,
    cfg: &FitConfig,
) -> Result<FitResult> {
    if data_x.basis != Basis::Position || data_k.basis != Basis::Momentum {
        return Err(Error::InvalidArgument("joint fit expects position then momentum data".into()));
    }
    cfg.optics.validate()?;
    cfg.calibration.validate()?;
    let margin = |scale: f64, init: Option<f64>| -> usize {
        // Room for the kernel of a width up to twice the start value.
        let sigma_px = init.map_or(64.0, |s| 2.0 * s / scale);
        (4.0 * sigma_px).ceil().min(crate::GRID as f64) as usize
    };
    let init_x = cfg.init.map(|p| p.psf_pos.sigma_u.max(p.psf_pos.sigma_v));
    let init_k = cfg.init.map(|p| p.psf_mom.sigma_u.max(p.psf_mom.sigma_v));
    let mut px = BasisProblem::new(data_x, flat_x, cfg.mask_x, margin(data_x.scale, init_x))?;
    let mut pk = BasisProblem::new(data_k, flat_k, cfg.mask_k, margin(data_k.scale, init_k))?;
    let mut start = match cfg.init {
        Some(p) => p,
        None => {
            let p = default_init(&mut px, &mut pk, cfg)?;
            // Re-crop with a margin matched to the computed start widths.
            px = BasisProblem::new(data_x, flat_x, cfg.mask_x, margin(data_x.scale, Some(p.psf_pos.sigma_u)))?;
            pk = BasisProblem::new(data_k, flat_k, cfg.mask_k, margin(data_k.scale, Some(p.psf_mom.sigma_u)))?;
            p
        }
    };
    phase_scan(&mut px, &mut start, cfg);
    phase_scan(&mut pk, &mut start, cfg);

    let mode = cfg.mode;
    let periods = (cfg.mask_x.period_um, cfg.mask_k.period_um);
    let floor = (MIN_SIGMA_PX * data_x.scale, MIN_SIGMA_PX * data_k.scale);
    let scales = step_scales(&start, mode, periods);
    let mut x = start.encode(mode);
    let mut best = f64::INFINITY;
    let mut evaluations = 0;
    let mut converged = false;
    let mut history = Vec::new();
    for round in 0..=cfg.restarts {
        let nm = nelder_mead(
            |v| {
                let p = start.decode(mode, v, floor, periods);
                px.lae(&p, &cfg.optics, &cfg.calibration) + pk.lae(&p, &cfg.optics, &cfg.calibration)
            },
            &x,
            &scales,
            &cfg.nelder_mead,
        )?;
        evaluations += nm.evaluations;
        converged = nm.converged;
        history.extend_from_slice(&nm.best_history);
        let gain = best - nm.value;
        if nm.value < best {
            best = nm.value;
            x = nm.x;
        }
        log::debug!("simplex round {round}: objective {:.3} after {} evaluations", best, nm.evaluations);
        if !(gain > cfg.restart_tol_rel * best.abs()) {
            break;
        }
    }
    let params = start.decode(mode, &x, floor, periods);
    if !converged {
        log::warn!("joint fit stopped at the iteration cap without converging");
    }

    let mx = px.model(&params, &cfg.optics, &cfg.calibration)?;
    let mk = pk.model(&params, &cfg.optics, &cfg.calibration)?;
    let lae_x = lae(&px.data, &mx, &px.beam_mask);
    let lae_k = lae(&pk.data, &mk, &pk.beam_mask);
    let r2_x = r_squared(&px.data, &mx, &px.beam_mask)?;
    let r2_k = r_squared(&pk.data, &mk, &pk.beam_mask)?;
    let masked = |m: &Array2<f64>, b: &Array2<bool>| {
        let mut out = m.clone();
        ndarray::Zip::from(&mut out).and(b).for_each(|v, &k| {
            if !k {
                *v = 0.0;
            }
        });
        out
    };
    let model_x = px.embed(&mx);
    let model_k = pk.embed(&mk);
    let residual_x = px.embed(&masked(&(&px.data - &mx), &px.beam_mask));
    let residual_k = pk.embed(&masked(&(&pk.data - &mk), &pk.beam_mask));
    Ok(FitResult {
        params,
        lae_x,
        lae_k,
        r2_x,
        r2_k,
        model_x,
        model_k,
        residual_x,
        residual_k,
        n_evaluations: evaluations,
        converged,
        mode,
        objective_history: history,
    })
}

/// Model image for given parameters on the full grid, for inspection and
/// for tests that synthesize data from the model itself.
pub fn render_model(
    basis: Basis,
    flat: &FlatField,
    params: &FitParams,
    cfg: &FitConfig,
    data_total: f64,
) -> Result<Array2<f64>> {
    let optics = params.optics(&cfg.optics);
    let spec = MaskSpec { offset_um: params.ell(basis), ..*cfg.mask(basis) };
    let grid = flat.values.nrows();
    let mask = MaskRaster::compute(basis, &optics, &cfg.calibration, grid, None)?.mask(&spec);
    let blurred =
        convolve_psf_rotated(&mask.values, &params.psf(basis), cfg.calibration.scale(basis), optics.phi_deg(basis))?;
    build_model(flat, &blurred, data_total)
}
