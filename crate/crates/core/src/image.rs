//! Coincidence images, detector calibration and flat-field references.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;

use crate::coincidence::CoincidencePair;
use crate::error::{Error, Result};
use crate::filters::{gaussian_blur, masked_gaussian, median3x3};

/// Measurement basis of the electron detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Basis {
    /// Image mode; pixel scale in µm.
    Position,
    /// Diffraction mode; pixel scale in µm⁻¹.
    Momentum,
}

impl Basis {
    pub fn unit(self) -> &'static str {
        match self {
            Basis::Position => "um",
            Basis::Momentum => "1/um",
        }
    }
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Basis::Position => "position",
            Basis::Momentum => "momentum",
        })
    }
}

impl FromStr for Basis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "position" | "x" => Ok(Basis::Position),
            "momentum" | "k" => Ok(Basis::Momentum),
            other => Err(Error::InvalidArgument(format!("unknown basis '{other}'"))),
        }
    }
}

/// Pixel index of the detector centre, 127 on a 256 grid.
pub fn detector_center(grid: usize) -> usize {
    grid / 2 - 1
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    /// µm per pixel in image mode.
    pub pos_scale: f64,
    /// µm⁻¹ per pixel in diffraction mode.
    pub mom_scale: f64,
    pub pos_scale_err: f64,
    pub mom_scale_err: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Self { pos_scale: 0.1129, mom_scale: 8.95e-2, pos_scale_err: 1.3e-3, mom_scale_err: 0.13e-2 }
    }
}

impl Calibration {
    pub fn scale(&self, basis: Basis) -> f64 {
        match basis {
            Basis::Position => self.pos_scale,
            Basis::Momentum => self.mom_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pos_scale > 0.0 && self.mom_scale > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument("calibration scales must be positive".into()))
        }
    }
}

/// Physical coordinates of a pixel relative to the detector centre.
pub fn pixel_to_physical(px: f64, py: f64, basis: Basis, cal: &Calibration) -> (f64, f64) {
    let c = detector_center(crate::GRID) as f64;
    let s = cal.scale(basis);
    ((px - c) * s, (py - c) * s)
}

pub fn physical_to_pixel(u: f64, v: f64, basis: Basis, cal: &Calibration) -> (f64, f64) {
    let c = detector_center(crate::GRID) as f64;
    let s = cal.scale(basis);
    (u / s + c, v / s + c)
}

/// A calibrated count grid indexed `[row, column]` = `[y, x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoincidenceImage {
    pub counts: Array2<f64>,
    pub basis: Basis,
    pub scale: f64,
    pub origin: (usize, usize),
}

impl CoincidenceImage {
    pub fn zeros(grid: usize, basis: Basis, cal: &Calibration) -> Self {
        let c = detector_center(grid);
        Self { counts: Array2::zeros((grid, grid)), basis, scale: cal.scale(basis), origin: (c, c) }
    }

    pub fn total(&self) -> f64 {
        self.counts.sum()
    }

    pub fn grid(&self) -> usize {
        self.counts.nrows()
    }
}

pub fn accumulate(pairs: &[CoincidencePair], basis: Basis, cal: &Calibration) -> CoincidenceImage {
    accumulate_pixels(pairs.iter().map(|p| (p.electron.x, p.electron.y)), basis, cal)
}

pub fn accumulate_pixels(
    pixels: impl IntoIterator<Item = (u16, u16)>,
    basis: Basis,
    cal: &Calibration,
) -> CoincidenceImage {
    let mut img = CoincidenceImage::zeros(crate::GRID, basis, cal);
    for (x, y) in pixels {
        img.counts[[y as usize, x as usize]] += 1.0;
    }
    img
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlatFieldParams {
    /// Fraction of the median-filtered maximum below which pixels leave the beam.
    pub threshold_fraction: f64,
    pub iterations: usize,
    /// Smoothing width in pixels; `None` picks 5 px (position) or 2 px (momentum).
    pub sigma_px: Option<f64>,
}

impl Default for FlatFieldParams {
    fn default() -> Self {
        Self { threshold_fraction: 0.1, iterations: 3, sigma_px: None }
    }
}

impl FlatFieldParams {
    pub fn sigma_for(&self, basis: Basis) -> f64 {
        self.sigma_px.unwrap_or(match basis {
            Basis::Position => 5.0,
            Basis::Momentum => 2.0,
        })
    }
}

/// Smoothed mask-free intensity reference used to normalize the model.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatField {
    pub values: Array2<f64>,
    pub basis: Basis,
    pub scale: f64,
    pub beam_mask: Array2<bool>,
}

impl FlatField {
    pub fn beam_pixels(&self) -> usize {
        self.beam_mask.iter().filter(|&&m| m).count()
    }
}

/// Median filter, threshold to a beam mask, iterated masked Gaussian
/// smoothing and a final unmasked Gaussian pass that lets the beam edge
/// roll off smoothly.
pub fn flat_field_smooth(raw: &CoincidenceImage, params: &FlatFieldParams) -> Result<FlatField> {
    if raw.total() <= 0.0 {
        return Err(Error::Empty("flat-field image has no counts"));
    }
    let median = median3x3(&raw.counts);
    let peak = median.iter().cloned().fold(0.0, f64::max);
    let threshold = params.threshold_fraction * peak;
    let beam_mask = median.mapv(|v| v > threshold && v > 0.0);
    if !beam_mask.iter().any(|&m| m) {
        return Err(Error::Empty("threshold removed every pixel"));
    }
    let sigma = params.sigma_for(raw.basis);
    let mut values = &raw.counts * &beam_mask.mapv(|m| if m { 1.0 } else { 0.0 });
    for _ in 0..params.iterations {
        values = masked_gaussian(&values, &beam_mask, sigma);
    }
    let values = gaussian_blur(&values, sigma, sigma).mapv(|v| v.max(0.0));
    Ok(FlatField { values, basis: raw.basis, scale: raw.scale, beam_mask })
}

/// Text grid file: a short header followed by row-major values.
pub fn write_grid(
    path: impl AsRef<Path>,
    values: &Array2<f64>,
    basis: Basis,
    scale: f64,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let (rows, cols) = values.dim();
    let c = detector_center(rows);
    writeln!(w, "epghost-grid 1")?;
    writeln!(w, "basis {basis}")?;
    writeln!(w, "scale {scale}")?;
    writeln!(w, "origin {c} {c}")?;
    writeln!(w, "size {cols} {rows}")?;
    for row in values.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridFile {
    pub values: Array2<f64>,
    pub basis: Basis,
    pub scale: f64,
    pub origin: (usize, usize),
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<GridFile> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let mut next = |what: &str| -> Result<String> {
        lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::Parse(format!("grid file ended before {what}")))
    };
    let bad = |what: &str| Error::Parse(format!("bad grid header field '{what}'"));
    if next("magic")?.trim() != "epghost-grid 1" {
        return Err(Error::Parse("not an epghost grid file".into()));
    }
    let field = |line: String, key: &str| -> Result<String> {
        line.strip_prefix(key).map(|s| s.trim().to_string()).ok_or_else(|| bad(key))
    };
    let basis: Basis = field(next("basis")?, "basis")?.parse()?;
    let scale: f64 = field(next("scale")?, "scale")?.parse().map_err(|_| bad("scale"))?;
    let origin = field(next("origin")?, "origin")?;
    let origin: Vec<usize> =
        origin.split_whitespace().map(|s| s.parse().map_err(|_| bad("origin"))).collect::<Result<_>>()?;
    let size = field(next("size")?, "size")?;
    let size: Vec<usize> =
        size.split_whitespace().map(|s| s.parse().map_err(|_| bad("size"))).collect::<Result<_>>()?;
    if origin.len() != 2 || size.len() != 2 {
        return Err(bad("origin/size"));
    }
    let (cols, rows) = (size[0], size[1]);
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let line = next("data")?;
        let before = data.len();
        for tok in line.split_whitespace() {
            data.push(tok.parse::<f64>().map_err(|_| Error::Parse(format!("bad value '{tok}'")))?);
        }
        if data.len() - before != cols {
            return Err(Error::Parse(format!("row {r} has {} values, expected {cols}", data.len() - before)));
        }
    }
    let values = Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Parse(e.to_string()))?;
    Ok(GridFile { values, basis, scale, origin: (origin[0], origin[1]) })
}

/// 16-bit binary PGM scaled so the maximum maps to 65535.
pub fn write_pgm(path: impl AsRef<Path>, values: &Array2<f64>) -> Result<()> {
    let (rows, cols) = values.dim();
    let max = values.iter().cloned().fold(0.0, f64::max);
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{cols} {rows}\n65535\n")?;
    for &v in values.iter() {
        let q = if max > 0.0 { (v.max(0.0) / max * 65535.0).round() as u16 } else { 0 };
        w.write_all(&q.to_be_bytes())?;
    }
    w.flush()?;
    Ok(())
}
