//! Detector scale calibration: spot detection, sub-pixel Gaussian spot
//! fits, spacing- and Fourier-based scale factors, hysteresis spread.

use std::fmt::Write as _;

use ndarray::{s, Array2};

use crate::error::{Error, Result};
use crate::filters::fft_magnitude_centered;
use crate::simplex::{nelder_mead, NelderMeadOptions};
use crate::witness::sample_std;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpotFit {
    /// Sub-pixel centre `(u, v)` = (column, row).
    pub center: (f64, f64),
    pub amplitude: f64,
    /// Widths along `u` and `v`, pixels.
    pub widths: (f64, f64),
    pub background: f64,
}

impl SpotFit {
    pub fn eval(&self, u: f64, v: f64) -> f64 {
        let a = (u - self.center.0) / self.widths.0;
        let b = (v - self.center.1) / self.widths.1;
        self.background + self.amplitude * (-0.5 * (a * a + b * b)).exp()
    }
}

/// Rectangular region of an image: top-left corner and size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Window {
    /// Square window of half-width `half` around a pixel, clipped to the image.
    pub fn around(row: usize, col: usize, half: usize, dim: (usize, usize)) -> Self {
        let row0 = row.saturating_sub(half);
        let col0 = col.saturating_sub(half);
        Self {
            row0,
            col0,
            rows: (row + half + 1).min(dim.0) - row0,
            cols: (col + half + 1).min(dim.1) - col0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibResult {
    /// Physical units per pixel.
    pub scale: f64,
    /// Standard deviation across measurements.
    pub sigma: f64,
    pub n_measurements: usize,
}

impl CalibResult {
    fn from_measurements(m: &[f64]) -> Self {
        Self { scale: m.iter().sum::<f64>() / m.len() as f64, sigma: sample_std(m), n_measurements: m.len() }
    }

    /// Structured `key: value` report.
    pub fn report(&self, unit: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scale_{unit}_per_px: {:.6e}", self.scale);
        let _ = writeln!(s, "sigma_{unit}_per_px: {:.6e}", self.sigma);
        let _ = writeln!(s, "n_measurements: {}", self.n_measurements);
        s
    }
}

/// Local maxima above `threshold`, strongest first, greedily thinned so
/// that kept peaks are at least `min_separation` pixels apart.
pub fn detect_spots(image: &Array2<f64>, min_separation: f64, threshold: f64) -> Vec<Peak> {
    let (h, w) = image.dim();
    let mut cand = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let v = image[[r, c]];
            if !(v > threshold) {
                continue;
            }
            let mut is_max = true;
            'nb: for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                        continue;
                    }
                    let n = image[[rr as usize, cc as usize]];
                    // Plateaus keep their first pixel in raster order.
                    if n > v || (n == v && (dr < 0 || (dr == 0 && dc < 0))) {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                cand.push(Peak { row: r, col: c, value: v });
            }
        }
    }
    cand.sort_by(|a, b| b.value.total_cmp(&a.value).then((a.row, a.col).cmp(&(b.row, b.col))));
    let mut kept: Vec<Peak> = Vec::new();
    for p in cand {
        let far = kept.iter().all(|k| {
            let (dr, dc) = (k.row as f64 - p.row as f64, k.col as f64 - p.col as f64);
            dr.hypot(dc) >= min_separation
        });
        if far {
            kept.push(p);
        }
    }
    kept
}

/// Starting values for a spot fit from the window contents.
pub fn initial_spot(image: &Array2<f64>, window: Window) -> Result<SpotFit> {
    let view = window_view(image, window)?;
    let (mut best, mut at) = (f64::NEG_INFINITY, (0, 0));
    let mut min = f64::INFINITY;
    for ((r, c), &v) in view.indexed_iter() {
        if v > best {
            best = v;
            at = (r, c);
        }
        min = min.min(v);
    }
    let mut mass = 0.0;
    for &v in view.iter() {
        mass += v - min;
    }
    let amp = best - min;
    let width = if amp > 0.0 { (mass / (2.0 * std::f64::consts::PI * amp)).sqrt().max(0.5) } else { 1.0 };
    Ok(SpotFit {
        center: ((window.col0 + at.1) as f64, (window.row0 + at.0) as f64),
        amplitude: amp,
        widths: (width, width),
        background: min,
    })
}

fn window_view(image: &Array2<f64>, w: Window) -> Result<ndarray::ArrayView2<'_, f64>> {
    let (h, wd) = image.dim();
    if w.rows == 0 || w.cols == 0 || w.row0 + w.rows > h || w.col0 + w.cols > wd {
        return Err(Error::InvalidArgument(format!("window {w:?} outside a {h}x{wd} image")));
    }
    Ok(image.slice(s![w.row0..w.row0 + w.rows, w.col0..w.col0 + w.cols]))
}

/// Sum of squared residuals of a spot model over a window.
pub fn spot_residual(image: &Array2<f64>, window: Window, spot: &SpotFit) -> Result<f64> {
    let view = window_view(image, window)?;
    Ok(view
        .indexed_iter()
        .map(|((r, c), &v)| (v - spot.eval((window.col0 + c) as f64, (window.row0 + r) as f64)).powi(2))
        .sum())
}

/// Least-squares fit of an axis-aligned 2D Gaussian plus constant.
pub fn fit_gaussian_2d(image: &Array2<f64>, window: Window, initial: &SpotFit) -> Result<SpotFit> {
    let view = window_view(image, window)?;
    let n = view.len() as f64;
    let mean = view.sum() / n;
    let var = view.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(Error::NoPeak);
    }
    if !(initial.widths.0 > 0.0 && initial.widths.1 > 0.0) {
        return Err(Error::InvalidArgument("initial spot widths must be positive".into()));
    }
    let decode = |p: &[f64]| SpotFit {
        center: (p[0], p[1]),
        amplitude: p[2],
        widths: (p[3].exp(), p[4].exp()),
        background: p[5],
    };
    let objective = |p: &[f64]| spot_residual(image, window, &decode(p)).unwrap_or(f64::INFINITY);
    let amp_scale = initial.amplitude.abs().max(var.sqrt());
    let scales = [0.5, 0.5, 0.1 * amp_scale, 0.1, 0.1, 0.05 * amp_scale];
    let opts = NelderMeadOptions {
        tol_abs: 1e-24 * n * (var + mean * mean),
        tol_rel: 1e-12,
        tol_x: Some(1e-7),
        max_iter: 20_000,
    };
    let mut x = vec![
        initial.center.0,
        initial.center.1,
        initial.amplitude,
        initial.widths.0.ln(),
        initial.widths.1.ln(),
        initial.background,
    ];
    let mut value = objective(&x);
    let mut converged = false;
    for _ in 0..4 {
        let r = nelder_mead(objective, &x, &scales, &opts)?;
        converged = r.converged;
        let done = r.value >= value * (1.0 - 1e-9);
        if r.value <= value {
            value = r.value;
            x = r.x;
        }
        if done {
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence("spot fit hit the iteration cap".into()));
    }
    Ok(decode(&x))
}

/// Scale from neighbour distances between spot centres. Neighbours are pairs
/// within 1.25 times the closest distance; each contributes one measurement
/// `known_spacing / distance`.
pub fn calibrate_from_spacings(centers: &[(f64, f64)], known_spacing: f64) -> Result<CalibResult> {
    Ok(CalibResult::from_measurements(&spacing_measurements(centers, known_spacing)?))
}

/// Pools the spacing measurements of several frames.
pub fn calibrate_frames(frames: &[Vec<(f64, f64)>], known_spacing: f64) -> Result<CalibResult> {
    let mut all = Vec::new();
    for f in frames {
        all.extend(spacing_measurements(f, known_spacing)?);
    }
    if all.is_empty() {
        return Err(Error::Insufficient("no frames".into()));
    }
    Ok(CalibResult::from_measurements(&all))
}

fn spacing_measurements(centers: &[(f64, f64)], known_spacing: f64) -> Result<Vec<f64>> {
    if centers.len() < 2 {
        return Err(Error::Insufficient(format!("need two spot centres, have {}", centers.len())));
    }
    if !(known_spacing > 0.0) {
        return Err(Error::InvalidArgument("known spacing must be positive".into()));
    }
    let mut d = Vec::new();
    for (i, a) in centers.iter().enumerate() {
        for b in &centers[i + 1..] {
            d.push((a.0 - b.0).hypot(a.1 - b.1));
        }
    }
    let dmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(dmin > 0.0) {
        return Err(Error::InvalidArgument("coincident spot centres".into()));
    }
    Ok(d.into_iter().filter(|&x| x <= 1.25 * dmin).map(|x| known_spacing / x).collect())
}

/// Real-space scale of a grating image of known period: the first-order
/// Fourier peaks of the Hann-windowed image are located by Gaussian fits and
/// each gives `known_spacing * |f|` with `f` in cycles per pixel.
pub fn fft_calibrate(image: &Array2<f64>, known_spacing_nm: f64) -> Result<CalibResult> {
    let (h, w) = image.dim();
    if h < 8 || w < 8 {
        return Err(Error::InvalidArgument(format!("image {h}x{w} too small for Fourier calibration")));
    }
    if !(known_spacing_nm > 0.0) {
        return Err(Error::InvalidArgument("known spacing must be positive".into()));
    }
    let mean = image.sum() / (h * w) as f64;
    let hann = |i: usize, n: usize| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos();
    let windowed = Array2::from_shape_fn((h, w), |(r, c)| (image[[r, c]] - mean) * hann(r, h) * hann(c, w));
    let mut mag = fft_magnitude_centered(&windowed);
    let (cr, cc) = (h / 2, w / 2);
    const DC_EXCLUSION_PX: f64 = 3.0;
    for ((r, c), v) in mag.indexed_iter_mut() {
        if (r as f64 - cr as f64).hypot(c as f64 - cc as f64) <= DC_EXCLUSION_PX {
            *v = 0.0;
        }
    }
    let max = mag.iter().cloned().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(Error::Insufficient("flat image has no Fourier peaks".into()));
    }
    let peaks = detect_spots(&mag, 3.0, 0.5 * max);
    if peaks.len() < 2 {
        return Err(Error::Insufficient(format!("found {} Fourier peaks, need two", peaks.len())));
    }
    let mut m = Vec::with_capacity(peaks.len());
    for p in &peaks {
        let win = Window::around(p.row, p.col, 2, (h, w));
        let init = SpotFit {
            center: (p.col as f64, p.row as f64),
            amplitude: p.value,
            widths: (1.0, 1.0),
            background: 0.0,
        };
        let fit = fit_gaussian_2d(&mag, win, &init)?;
        let fu = (fit.center.0 - cc as f64) / w as f64;
        let fv = (fit.center.1 - cr as f64) / h as f64;
        m.push(known_spacing_nm * fu.hypot(fv));
    }
    Ok(CalibResult::from_measurements(&m))
}

/// Sample standard deviation of per-iteration means.
pub fn hysteresis_spread(per_iteration_means: &[f64]) -> Result<f64> {
    if per_iteration_means.len() < 2 {
        return Err(Error::Insufficient("hysteresis spread needs two iterations".into()));
    }
    Ok(sample_std(per_iteration_means))
}
