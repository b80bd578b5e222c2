//! Separable Gaussian and median filters on row-major grids.
//!
//! Gaussian kernels are integrated over each pixel, truncated at 4 sigma and
//! renormalized to unit sum. Outside the grid the input is taken as zero.

use std::cell::RefCell;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

pub const TRUNCATE_SIGMAS: f64 = 4.0;

/// Unit-sum Gaussian with radius `ceil(4 sigma)`. Each tap is the normal
/// probability mass of its pixel, so a step edge blurs to the exact error
/// function profile. `sigma` is in pixels.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0, "kernel sigma must be positive");
    let radius = (TRUNCATE_SIGMAS * sigma).ceil() as i64;
    let cdf = |x: f64| 0.5 * libm::erfc(-x / (sigma * std::f64::consts::SQRT_2));
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| cdf(i as f64 + 0.5) - cdf(i as f64 - 0.5))
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= total);
    k
}

fn convolve_rows(src: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (rows, cols) = src.dim();
    let radius = (kernel.len() / 2) as isize;
    let mut out = Array2::zeros((rows, cols));
    let src = src.as_standard_layout();
    let s = src.as_slice().unwrap();
    let o = out.as_slice_mut().unwrap();
    for r in 0..rows {
        let row = &s[r * cols..(r + 1) * cols];
        let orow = &mut o[r * cols..(r + 1) * cols];
        // Scatter each non-zero input; binary masks are mostly runs of zeros.
        for (c, &v) in row.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let lo = (c as isize - radius).max(0) as usize;
            let hi = ((c as isize + radius) as usize).min(cols - 1);
            let k0 = (lo as isize - (c as isize - radius)) as usize;
            for (oc, w) in orow[lo..=hi].iter_mut().zip(&kernel[k0..]) {
                *oc += v * w;
            }
        }
    }
    out
}

fn convolve_cols(src: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (rows, cols) = src.dim();
    let radius = (kernel.len() / 2) as isize;
    let mut out = Array2::zeros((rows, cols));
    let src = src.as_standard_layout();
    let s = src.as_slice().unwrap();
    let o = out.as_slice_mut().unwrap();
    for r in 0..rows {
        let lo = (r as isize - radius).max(0) as usize;
        let hi = ((r as isize + radius) as usize).min(rows - 1);
        let orow = &mut o[r * cols..(r + 1) * cols];
        for rr in lo..=hi {
            let w = kernel[(rr as isize - r as isize + radius) as usize];
            let srow = &s[rr * cols..(rr + 1) * cols];
            for (oc, &v) in orow.iter_mut().zip(srow) {
                *oc += w * v;
            }
        }
    }
    out
}

/// Separable convolution with independent row (x) and column (y) kernels.
pub fn convolve_separable(src: &Array2<f64>, kernel_x: &[f64], kernel_y: &[f64]) -> Array2<f64> {
    convolve_cols(&convolve_rows(src, kernel_x), kernel_y)
}

pub fn gaussian_blur(src: &Array2<f64>, sigma_x: f64, sigma_y: f64) -> Array2<f64> {
    convolve_separable(src, &gaussian_kernel(sigma_x), &gaussian_kernel(sigma_y))
}

/// Unit-sum Gaussian with standard deviations `sigma_a`, `sigma_b` (pixels)
/// along axes rotated by `angle_deg` counter-clockwise from the grid axes.
/// Each tap averages a 3x3 sub-pixel sampling; the support is the 4-sigma
/// ellipse. Shape is `(2r+1, 2r+1)` with
/// `r = ceil(4 max(sigma))`, indexed `[row, column]`.
pub fn gaussian_kernel_2d(sigma_a: f64, sigma_b: f64, angle_deg: f64) -> Array2<f64> {
    assert!(sigma_a > 0.0 && sigma_b > 0.0, "kernel sigma must be positive");
    let radius = (TRUNCATE_SIGMAS * sigma_a.max(sigma_b)).ceil() as i64;
    let (sn, cs) = angle_deg.to_radians().sin_cos();
    let n = (2 * radius + 1) as usize;
    let mut k = Array2::zeros((n, n));
    // Taps outside the 4-sigma ellipse (plus a sub-pixel margin) stay zero.
    let reach = (TRUNCATE_SIGMAS + 1.0 / sigma_a.min(sigma_b)).powi(2);
    for ((r, c), v) in k.indexed_iter_mut() {
        let (dx, dy) = (c as f64 - radius as f64, r as f64 - radius as f64);
        let (a, b) = (cs * dx - sn * dy, sn * dx + cs * dy);
        if (a / sigma_a).powi(2) + (b / sigma_b).powi(2) > reach {
            continue;
        }
        let mut sum = 0.0;
        for sy in [-1.0 / 3.0, 0.0, 1.0 / 3.0] {
            for sx in [-1.0 / 3.0, 0.0, 1.0 / 3.0] {
                let dx = c as f64 - radius as f64 + sx;
                let dy = r as f64 - radius as f64 + sy;
                let a = cs * dx - sn * dy;
                let b = sn * dx + cs * dy;
                sum += (-0.5 * ((a / sigma_a).powi(2) + (b / sigma_b).powi(2))).exp();
            }
        }
        *v = sum;
    }
    let total = k.sum();
    k /= total;
    k
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn transpose(src: &[Complex<f64>], rows: usize, cols: usize) -> Vec<Complex<f64>> {
    const BLOCK: usize = 32;
    let mut out = vec![Complex::default(); src.len()];
    for r0 in (0..rows).step_by(BLOCK) {
        for c0 in (0..cols).step_by(BLOCK) {
            for r in r0..(r0 + BLOCK).min(rows) {
                for c in c0..(c0 + BLOCK).min(cols) {
                    out[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
    out
}

/// Spectrum of a `rows x cols` buffer, returned transposed. Only the rows
/// listed in `live` may be non-zero.
fn fft2_forward_rows(
    buf: &mut [Complex<f64>],
    rows: usize,
    cols: usize,
    live: impl Iterator<Item = usize>,
) -> Vec<Complex<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        let f = p.plan_fft_forward(cols);
        let mut scratch = vec![Complex::default(); f.get_inplace_scratch_len()];
        for r in live {
            f.process_with_scratch(&mut buf[r * cols..(r + 1) * cols], &mut scratch);
        }
        let mut t = transpose(buf, rows, cols);
        p.plan_fft_forward(rows).process(&mut t);
        t
    })
}

fn fft2_forward(buf: &mut [Complex<f64>], rows: usize, cols: usize) -> Vec<Complex<f64>> {
    fft2_forward_rows(buf, rows, cols, 0..rows)
}

/// Inverse of a transposed spectrum, keeping only the first `keep_rows`
/// rows of the (unnormalized) result in row-major order.
fn fft2_inverse_transposed(spec: &mut [Complex<f64>], rows: usize, cols: usize, keep_rows: usize) -> Vec<Complex<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        p.plan_fft_inverse(rows).process(spec);
        let mut t = vec![Complex::default(); keep_rows * cols];
        for c0 in (0..cols).step_by(32) {
            for r in 0..keep_rows {
                for c in c0..(c0 + 32).min(cols) {
                    t[r * cols + c] = spec[c * rows + r];
                }
            }
        }
        p.plan_fft_inverse(cols).process(&mut t);
        t
    })
}

/// Smallest length `>= n` whose only prime factors are 2, 3 and 5.
pub fn next_fast_len(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut k = m;
        for p in [2, 3, 5] {
            while k.is_multiple_of(p) {
                k /= p;
            }
        }
        if k == 1 {
            return m;
        }
        m += 1;
    }
}

/// Same-size linear convolution with an odd-sized centred kernel, zero
/// padding outside the grid, computed by FFT.
pub fn convolve_fft(src: &Array2<f64>, kernel: &Array2<f64>) -> Array2<f64> {
    let (h, w) = src.dim();
    let (kh, kw) = kernel.dim();
    assert!(kh % 2 == 1 && kw % 2 == 1, "kernel dimensions must be odd");
    let (ry, rx) = (kh / 2, kw / 2);
    // Circular wrap stays outside the output once the period exceeds the
    // largest in-grid separation plus the kernel radius.
    let (ph, pw) = (next_fast_len((h + ry).max(kh)), next_fast_len((w + rx).max(kw)));
    // Image in the real part, kernel (centred on the origin, wrapped) in the
    // imaginary part: one transform yields both spectra.
    let mut z = vec![Complex::default(); ph * pw];
    for ((r, c), &v) in src.indexed_iter() {
        z[r * pw + c].re = v;
    }
    for ((r, c), &v) in kernel.indexed_iter() {
        let rr = (r + ph - ry) % ph;
        let cc = (c + pw - rx) % pw;
        z[rr * pw + cc].im = v;
    }
    let top = h.max(ry + 1);
    let live = (0..top).chain((ph - ry).max(top)..ph);
    let spec = fft2_forward_rows(&mut z, ph, pw, live);
    // Transposed layout: index = col * ph + row.
    let mut prod = vec![Complex::default(); ph * pw];
    let quarter_i = Complex::new(0.0, -0.25);
    for c in 0..pw {
        let nc = (pw - c) % pw;
        for r in 0..ph {
            let nr = (ph - r) % ph;
            let zk = spec[c * ph + r];
            let zn = spec[nc * ph + nr].conj();
            prod[c * ph + r] = (zk * zk - zn * zn) * quarter_i;
        }
    }
    let out = fft2_inverse_transposed(&mut prod, ph, pw, h);
    let norm = 1.0 / (ph * pw) as f64;
    Array2::from_shape_fn((h, w), |(r, c)| out[r * pw + c].re * norm)
}

/// Magnitude of the 2D DFT of `src`, shifted so that zero frequency sits at
/// `(rows / 2, cols / 2)`.
pub fn fft_magnitude_centered(src: &Array2<f64>) -> Array2<f64> {
    let (h, w) = src.dim();
    let mut buf: Vec<Complex<f64>> = src.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let spec = fft2_forward(&mut buf, h, w);
    Array2::from_shape_fn((h, w), |(r, c)| {
        let rr = (r + h - h / 2) % h;
        let cc = (c + w - w / 2) % w;
        spec[cc * h + rr].norm()
    })
}

/// Normalized convolution: smooths `values` using only pixels where `mask`
/// is set and divides by the smoothed mask, so that a constant inside the mask
/// is a fixed point. Pixels outside the mask are zero in the output.
pub fn masked_gaussian(values: &Array2<f64>, mask: &Array2<bool>, sigma: f64) -> Array2<f64> {
    let weights = mask.mapv(|m| if m { 1.0 } else { 0.0 });
    let masked = values * &weights;
    let num = gaussian_blur(&masked, sigma, sigma);
    let den = gaussian_blur(&weights, sigma, sigma);
    let mut out = Array2::zeros(values.dim());
    ndarray::Zip::from(&mut out).and(&num).and(&den).and(mask).for_each(|o, &n, &d, &m| {
        if m && d > 0.0 {
            *o = n / d;
        }
    });
    out
}

/// 3x3 median filter. At the border only the in-grid neighbours take part.
pub fn median3x3(src: &Array2<f64>) -> Array2<f64> {
    let (rows, cols) = src.dim();
    let mut out = Array2::zeros((rows, cols));
    let mut window = Vec::with_capacity(9);
    for r in 0..rows {
        for c in 0..cols {
            window.clear();
            for rr in r.saturating_sub(1)..=(r + 1).min(rows - 1) {
                for cc in c.saturating_sub(1)..=(c + 1).min(cols - 1) {
                    window.push(src[[rr, cc]]);
                }
            }
            window.sort_by(|a, b| a.total_cmp(b));
            let n = window.len();
            out[[r, c]] = if n % 2 == 1 {
                window[n / 2]
            } else {
                0.5 * (window[n / 2 - 1] + window[n / 2])
            };
        }
    }
    out
}
