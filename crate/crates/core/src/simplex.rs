//! Nelder-Mead downhill simplex minimizer.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadOptions {
    /// Absolute tolerance on the spread of simplex values.
    pub tol_abs: f64,
    /// Relative tolerance on the spread, scaled by the best value.
    pub tol_rel: f64,
    /// Optional bound on the largest vertex distance from the best vertex.
    pub tol_x: Option<f64>,
    pub max_iter: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self { tol_abs: 0.0, tol_rel: 1e-3, tol_x: None, max_iter: 4000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Best value after each iteration.
    pub best_history: Vec<f64>,
}

const ALPHA: f64 = 1.0;
const GAMMA: f64 = 2.0;
const RHO: f64 = 0.5;
const SIGMA: f64 = 0.5;

struct Counter<F> {
    f: F,
    n: usize,
}

impl<F: FnMut(&[f64]) -> f64> Counter<F> {
    fn eval(&mut self, x: &[f64]) -> Result<f64> {
        let v = (self.f)(x);
        self.n += 1;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(self.n))
        }
    }
}

/// Minimizes `objective` from `x0`, with the initial simplex spanned by
/// `x0 + scales[i] e_i`. Stops when the value spread (and optionally the
/// simplex size) is within tolerance, or after `max_iter` iterations.
pub fn nelder_mead<F>(
    objective: F,
    x0: &[f64],
    scales: &[f64],
    opts: &NelderMeadOptions,
) -> Result<NelderMeadResult>
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    if n == 0 || scales.len() != n {
        return Err(Error::InvalidArgument("simplex needs matching non-empty x0 and scales".into()));
    }
    let mut f = Counter { f: objective, n: 0 };
    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    pts.push(x0.to_vec());
    for i in 0..n {
        let mut p = x0.to_vec();
        p[i] += scales[i];
        pts.push(p);
    }
    let mut vals = Vec::with_capacity(n + 1);
    for p in &pts {
        vals.push(f.eval(p)?);
    }
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    loop {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = order.iter().map(|&i| pts[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();

        let spread = vals[n] - vals[0];
        let size_ok = opts.tol_x.is_none_or(|tx| {
            pts[1..].iter().all(|p| p.iter().zip(&pts[0]).all(|(a, b)| (a - b).abs() <= tx))
        });
        if spread <= opts.tol_abs + opts.tol_rel * vals[0].abs() && size_ok {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        iterations += 1;

        let mut c = vec![0.0; n];
        for p in &pts[..n] {
            for (ci, pi) in c.iter_mut().zip(p) {
                *ci += pi / n as f64;
            }
        }
        let along = |t: f64, from: &[f64]| -> Vec<f64> {
            c.iter().zip(from).map(|(ci, wi)| ci + t * (wi - ci)).collect()
        };
        let xr = along(-ALPHA, &pts[n]);
        let fr = f.eval(&xr)?;
        if fr < vals[0] {
            let xe = along(-ALPHA * GAMMA, &pts[n]);
            let fe = f.eval(&xe)?;
            if fe < fr {
                pts[n] = xe;
                vals[n] = fe;
            } else {
                pts[n] = xr;
                vals[n] = fr;
            }
        } else if fr < vals[n - 1] {
            pts[n] = xr;
            vals[n] = fr;
        } else {
            let (xc, fc, accept) = if fr < vals[n] {
                let xc = along(-ALPHA * RHO, &pts[n]);
                let fc = f.eval(&xc)?;
                (xc, fc, fc <= fr)
            } else {
                let xc = along(RHO, &pts[n]);
                let fc = f.eval(&xc)?;
                (xc, fc, fc < vals[n])
            };
            if accept {
                pts[n] = xc;
                vals[n] = fc;
            } else {
                let best = pts[0].clone();
                for i in 1..=n {
                    for (pi, bi) in pts[i].iter_mut().zip(&best) {
                        *pi = bi + SIGMA * (*pi - bi);
                    }
                    vals[i] = f.eval(&pts[i])?;
                }
            }
        }
        history.push(vals.iter().cloned().fold(f64::INFINITY, f64::min));
    }

    Ok(NelderMeadResult {
        x: pts[0].clone(),
        value: vals[0],
        iterations,
        evaluations: f.n,
        converged,
        best_history: history,
    })
}
