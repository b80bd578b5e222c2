//! Paraboloidal mirror and thin-lens ray constructions that map sample
//! positions and emission wavevectors onto the grating mask.
//!
//! Two frames are used. The setup frame has `z` along the electron beam and
//! `y` along the mirror axis, with the origin at the mirror focus; sample
//! plane coordinates are its `(x, y)`. The mirror frame is
//! `(x_m, y_m, z_m) = (x, -z, y)`: the focus is at the origin, the surface is
//! `z_m = r^2 / (4 f) - f` and collimated light leaves along `+z_m` towards the
//! lens. All lengths inside this module are in µm.

use nalgebra::{Vector2, Vector3};
use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{GeometryError, Result};
use crate::image::{pixel_to_physical, Basis, Calibration};

type GResult<T> = std::result::Result<T, GeometryError>;

/// Maximum closest-approach distance, in µm, at which two reflected rays are
/// still taken to intersect.
pub const MAX_SKEW_UM: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpticsConfig {
    pub f_mirror_um: f64,
    pub f_lens_mm: f64,
    /// Distance from the mirror focus to the lens along the mirror axis.
    pub d_focus_mm: f64,
    /// Electron beam position relative to the mirror focus, setup frame, µm.
    pub beam_pos_um: [f64; 3],
    pub phi_x_deg: f64,
    pub phi_k_deg: f64,
    pub magnification_nominal: f64,
    /// Radius of the aperture in the mirror image plane.
    pub aperture_radius_mm: f64,
    /// Lens to first image plane, where the position mask sits.
    pub image_distance_mm: f64,
    /// Additional distance from the first image plane to the Fourier plane.
    pub fourier_offset_mm: f64,
    pub wavelength_um: f64,
}

impl Default for OpticsConfig {
    fn default() -> Self {
        Self {
            f_mirror_um: 750.0,
            f_lens_mm: 100.0,
            d_focus_mm: 317.0,
            beam_pos_um: [-2.39, -32.6, 52.4],
            phi_x_deg: 30.0,
            phi_k_deg: 295.0,
            magnification_nominal: 9.5,
            aperture_radius_mm: 0.5,
            image_distance_mm: 143.7,
            fourier_offset_mm: 5.0,
            wavelength_um: 0.55,
        }
    }
}

impl OpticsConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("f_mirror_um", self.f_mirror_um),
            ("f_lens_mm", self.f_lens_mm),
            ("d_focus_mm", self.d_focus_mm),
            ("aperture_radius_mm", self.aperture_radius_mm),
            ("image_distance_mm", self.image_distance_mm),
            ("wavelength_um", self.wavelength_um),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(crate::Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if self.d_focus_mm <= self.f_lens_mm {
            return Err(crate::Error::InvalidArgument("d_focus_mm must exceed f_lens_mm".into()));
        }
        Ok(())
    }

    pub fn phi_deg(&self, basis: Basis) -> f64 {
        match basis {
            Basis::Position => self.phi_x_deg,
            Basis::Momentum => self.phi_k_deg,
        }
    }

    pub fn k0(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.wavelength_um
    }
}

pub fn setup_to_mirror(v: Vector3<f64>) -> Vector3<f64> {
    Vector3::new(v.x, -v.z, v.y)
}

pub fn mirror_to_setup(v: Vector3<f64>) -> Vector3<f64> {
    Vector3::new(v.x, v.z, -v.y)
}

/// Counter-clockwise rotation by `deg` degrees.
pub fn rotate(v: Vector2<f64>, deg: f64) -> Vector2<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Vector2::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    pub period_um: f64,
    pub offset_um: f64,
    /// Unit vector in the mask plane across the grating lines.
    pub axis: [f64; 2],
}

impl MaskSpec {
    pub fn position() -> Self {
        Self { period_um: 38.5, offset_um: 0.0, axis: [1.0, 0.0] }
    }

    pub fn momentum() -> Self {
        Self { period_um: 100.0, offset_um: 0.0, axis: [1.0, 0.0] }
    }

    pub fn for_basis(basis: Basis) -> Self {
        match basis {
            Basis::Position => Self::position(),
            Basis::Momentum => Self::momentum(),
        }
    }

    pub fn coordinate(&self, x: f64, y: f64) -> f64 {
        x * self.axis[0] + y * self.axis[1]
    }
}

/// Binary grating transmission: 0 on the first half of each period.
pub fn mask_value(x: f64, y: f64, spec: &MaskSpec) -> u8 {
    grating_value(spec.coordinate(x, y), spec.period_um, spec.offset_um)
}

pub fn grating_value(s: f64, period: f64, offset: f64) -> u8 {
    if (s + offset).rem_euclid(period) < 0.5 * period {
        0
    } else {
        1
    }
}

fn surface_normal(p: &Vector3<f64>, f: f64) -> Vector3<f64> {
    Vector3::new(-p.x / (2.0 * f), -p.y / (2.0 * f), 1.0).normalize()
}

/// Nearest forward intersection of a ray with the paraboloid and the
/// specularly reflected unit direction. Mirror frame, µm.
pub fn reflect_on_paraboloid(
    origin: Vector3<f64>,
    direction: Vector3<f64>,
    f: f64,
) -> GResult<(Vector3<f64>, Vector3<f64>)> {
    let d = direction.normalize();
    let o = origin;
    let a = d.x * d.x + d.y * d.y;
    let b = 2.0 * (o.x * d.x + o.y * d.y) - 4.0 * f * d.z;
    let c = o.x * o.x + o.y * o.y - 4.0 * f * (o.z + f);
    let eps = 1e-9 * f;
    let t = if a < 1e-14 {
        if b == 0.0 {
            return Err(GeometryError::NoIntersection);
        }
        Some(-c / b).filter(|&t| t > eps)
    } else {
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            return Err(GeometryError::NoIntersection);
        }
        let sq = disc.sqrt();
        // Stable quadratic roots.
        let q = -0.5 * (b + b.signum() * sq);
        let (t1, t2) = if q == 0.0 { (0.0, 0.0) } else { (q / a, c / q) };
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        if lo > eps {
            Some(lo)
        } else if hi > eps {
            Some(hi)
        } else {
            None
        }
    };
    let t = t.ok_or(GeometryError::NoIntersection)?;
    let p = o + t * d;
    let n = surface_normal(&p, f);
    let r = d - 2.0 * d.dot(&n) * n;
    Ok((p, r))
}

/// Midpoint and length of the shortest segment joining two lines.
pub fn closest_approach(
    p1: Vector3<f64>,
    d1: Vector3<f64>,
    p2: Vector3<f64>,
    d2: Vector3<f64>,
) -> Option<(Vector3<f64>, f64)> {
    let w = p1 - p2;
    let a = d1.dot(&d1);
    let b = d1.dot(&d2);
    let c = d2.dot(&d2);
    let d = d1.dot(&w);
    let e = d2.dot(&w);
    let den = a * c - b * b;
    if den <= 1e-24 * a * c {
        return None;
    }
    let s = (b * e - c * d) / den;
    let t = (a * e - b * d) / den;
    let q1 = p1 + s * d1;
    let q2 = p2 + t * d2;
    Some(((q1 + q2) * 0.5, (q1 - q2).norm()))
}

/// Virtual image of a point formed by the mirror, in the mirror frame.
/// The axis-parallel ray through `p` reflects through the focus; the ray
/// through `p` and the focus reflects parallel to the axis. Both lie in the
/// meridional plane, so their intersection is found in closed form.
pub fn mirror_image(p: Vector3<f64>, f: f64) -> GResult<Vector3<f64>> {
    let rp = (p.x * p.x + p.y * p.y).sqrt();
    if p.norm() < 1e-12 * f || rp < 1e-12 * f {
        return Err(GeometryError::Degenerate);
    }
    let ha = Vector3::new(p.x, p.y, (p.x * p.x + p.y * p.y) / (4.0 * f) - f);
    let mut u = p.normalize();
    if u.z > 0.0 {
        u = -u;
    }
    let (hb, _) = reflect_on_paraboloid(Vector3::zeros(), u, f)?;
    let s = (hb.x * p.x + hb.y * p.y) / (rp * rp);
    Ok(ha * s)
}

/// Precomputed constants of the mirror-lens chain for one configuration.
#[derive(Debug, Clone, Copy)]
pub struct OpticsChain {
    pub cfg: OpticsConfig,
    f: f64,
    d_focus: f64,
    beam: Vector3<f64>,
    image_plane: f64,
    fourier_plane: f64,
    aperture_center: Vector2<f64>,
    aperture_radius: f64,
}

impl OpticsChain {
    pub fn new(cfg: &OpticsConfig) -> Result<Self> {
        cfg.validate()?;
        let f = cfg.f_mirror_um;
        let k0 = cfg.k0();
        let d0 = photon_direction(Vector2::zeros(), k0)?;
        let (hit0, _) = reflect_on_paraboloid(Vector3::zeros(), d0, f)?;
        Ok(Self {
            cfg: *cfg,
            f,
            d_focus: cfg.d_focus_mm * 1e3,
            beam: setup_to_mirror(Vector3::from(cfg.beam_pos_um)),
            image_plane: cfg.image_distance_mm * 1e3,
            fourier_plane: (cfg.image_distance_mm + cfg.fourier_offset_mm) * 1e3,
            aperture_center: hit0.xy(),
            aperture_radius: cfg.aperture_radius_mm * 1e3,
        })
    }

    pub fn beam_mirror_frame(&self) -> Vector3<f64> {
        self.beam
    }

    /// Chief-ray projection of a mirror-frame point onto a plane `plane` µm
    /// behind the lens.
    fn project(&self, q: Vector3<f64>, plane: f64) -> GResult<Vector2<f64>> {
        let u = self.d_focus - q.z;
        if u <= 0.0 {
            return Err(GeometryError::BehindLens);
        }
        Ok(-q.xy() * (plane / u))
    }

    /// Sample-plane offset from the beam position (setup frame, µm) to the
    /// first image plane (µm).
    pub fn position_to_mask(&self, x: Vector2<f64>) -> GResult<Vector2<f64>> {
        let p = self.beam + setup_to_mirror(Vector3::new(x.x, x.y, 0.0));
        let q = mirror_image(p, self.f)?;
        self.project(q, self.image_plane)
    }

    /// Emission direction (mirror frame) to the Fourier plane. Returns the
    /// mapped point and the collimated position used for the aperture test.
    pub fn direction_to_mask(&self, d: Vector3<f64>) -> GResult<(Vector2<f64>, Vector2<f64>)> {
        if self.beam.norm() < 1e-12 * self.f {
            return Err(GeometryError::Degenerate);
        }
        let (p1, r1) = reflect_on_paraboloid(Vector3::zeros(), d, self.f)?;
        let (p2, r2) = reflect_on_paraboloid(self.beam, d, self.f)?;
        let mapped = match closest_approach(p1, r1, p2, r2) {
            Some((q, gap)) => {
                if gap > MAX_SKEW_UM {
                    return Err(GeometryError::IllConditioned);
                }
                self.project(q, self.fourier_plane)?
            }
            // Parallel reflections meet at infinity along their common direction.
            None => {
                if r1.z <= 0.0 {
                    return Err(GeometryError::BehindLens);
                }
                r1.xy() * (self.fourier_plane / r1.z)
            }
        };
        Ok((mapped, p1.xy()))
    }

    /// Transverse photon wavevector (setup frame, µm⁻¹) to the Fourier plane.
    pub fn wavevector_to_mask(&self, k: Vector2<f64>) -> GResult<Vector2<f64>> {
        let d = photon_direction(k, self.cfg.k0())?;
        let (mapped, collimated) = self.direction_to_mask(d)?;
        if (collimated - self.aperture_center).norm() > self.aperture_radius {
            return Err(GeometryError::OutsideAperture);
        }
        Ok(mapped)
    }

    /// Maps a detector-frame physical coordinate of the electron to the mask
    /// plane of the given basis, including the detector rotation and, for
    /// momentum, the electron-photon anti-correlation.
    pub fn detector_to_mask(&self, basis: Basis, uv: Vector2<f64>) -> GResult<Vector2<f64>> {
        let r = rotate(uv, self.cfg.phi_deg(basis));
        match basis {
            Basis::Position => self.position_to_mask(r),
            Basis::Momentum => self.wavevector_to_mask(-r),
        }
    }
}

/// Mirror-frame unit direction of a photon emitted back towards the mirror
/// with transverse wavevector `k` (setup frame).
pub fn photon_direction(k: Vector2<f64>, k0: f64) -> GResult<Vector3<f64>> {
    let kt2 = k.norm_squared();
    if kt2 >= k0 * k0 {
        return Err(GeometryError::OutsideLightCone);
    }
    let kz = -(k0 * k0 - kt2).sqrt();
    Ok(setup_to_mirror(Vector3::new(k.x, k.y, kz)) / k0)
}

pub fn map_position_to_mask(x: [f64; 2], cfg: &OpticsConfig) -> Result<[f64; 2]> {
    let m = OpticsChain::new(cfg)?.position_to_mask(Vector2::from(x))?;
    Ok([m.x, m.y])
}

pub fn map_wavevector_to_mask(k: [f64; 2], cfg: &OpticsConfig) -> Result<[f64; 2]> {
    let m = OpticsChain::new(cfg)?.wavevector_to_mask(Vector2::from(k))?;
    Ok([m.x, m.y])
}

/// Central-difference Jacobian of the position mapping at the beam
/// position, mask µm per sample µm.
pub fn position_jacobian(cfg: &OpticsConfig) -> Result<nalgebra::Matrix2<f64>> {
    let chain = OpticsChain::new(cfg)?;
    let h = 1e-3;
    let mut j = nalgebra::Matrix2::zeros();
    for axis in 0..2 {
        let mut e = Vector2::zeros();
        e[axis] = h;
        let plus = chain.position_to_mask(e)?;
        let minus = chain.position_to_mask(-e)?;
        j.set_column(axis, &((plus - minus) / (2.0 * h)));
    }
    Ok(j)
}

/// First-order magnification: the geometric mean of the Jacobian's
/// singular values, i.e. the square root of its area scaling.
pub fn position_magnification(cfg: &OpticsConfig) -> Result<f64> {
    Ok(position_jacobian(cfg)?.determinant().abs().sqrt())
}

/// Lens-to-image distance of the mirror image of the beam position, mm.
pub fn derived_image_distance_mm(cfg: &OpticsConfig) -> Result<f64> {
    let chain = OpticsChain::new(cfg)?;
    let q = mirror_image(chain.beam, cfg.f_mirror_um)?;
    let u = chain.d_focus - q.z;
    let fl = cfg.f_lens_mm * 1e3;
    Ok(fl * u / (u - fl) * 1e-3)
}

/// Mask-plane coordinates of every detector pixel, computed once per
/// geometry and reused for any grating period or offset.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskRaster {
    pub basis: Basis,
    pub xp: Array2<f64>,
    pub yp: Array2<f64>,
    pub valid: Array2<bool>,
}

impl MaskRaster {
    /// `region` limits the evaluation to selected pixels; others are invalid.
    pub fn compute(
        basis: Basis,
        cfg: &OpticsConfig,
        cal: &Calibration,
        grid: usize,
        region: Option<&Array2<bool>>,
    ) -> Result<Self> {
        Self::compute_inner(basis, cfg, cal, (0, grid), (0, grid), region)
    }

    /// Raster of the detector window `rows.0..rows.1` by `cols.0..cols.1`.
    pub fn compute_window(
        basis: Basis,
        cfg: &OpticsConfig,
        cal: &Calibration,
        rows: (usize, usize),
        cols: (usize, usize),
    ) -> Result<Self> {
        Self::compute_inner(basis, cfg, cal, rows, cols, None)
    }

    fn compute_inner(
        basis: Basis,
        cfg: &OpticsConfig,
        cal: &Calibration,
        rows: (usize, usize),
        cols: (usize, usize),
        region: Option<&Array2<bool>>,
    ) -> Result<Self> {
        let chain = OpticsChain::new(cfg)?;
        let (h, w) = (rows.1 - rows.0, cols.1 - cols.0);
        let mapped: Vec<Option<Vector2<f64>>> = (0..h)
            .into_par_iter()
            .flat_map_iter(|i| {
                let r = rows.0 + i;
                let chain = &chain;
                (0..w).map(move |j| {
                    let c = cols.0 + j;
                    if region.is_some_and(|m| !m[[r, c]]) {
                        return None;
                    }
                    let (u, v) = pixel_to_physical(c as f64, r as f64, basis, cal);
                    chain.detector_to_mask(basis, Vector2::new(u, v)).ok()
                })
            })
            .collect();
        let mut xp = Array2::zeros((h, w));
        let mut yp = Array2::zeros((h, w));
        let mut valid = Array2::from_elem((h, w), false);
        for (k, m) in mapped.into_iter().enumerate() {
            if let Some(m) = m {
                let idx = [k / w, k % w];
                xp[idx] = m.x;
                yp[idx] = m.y;
                valid[idx] = true;
            }
        }
        Ok(Self { basis, xp, yp, valid })
    }

    pub fn mask(&self, spec: &MaskSpec) -> EffectiveMask {
        let mut values = Array2::zeros(self.xp.dim());
        ndarray::Zip::from(&mut values).and(&self.xp).and(&self.yp).and(&self.valid).for_each(
            |v, &x, &y, &ok| {
                if ok {
                    *v = mask_value(x, y, spec) as f64;
                }
            },
        );
        EffectiveMask { values, valid: self.valid.clone(), basis: self.basis }
    }
}

/// Binary mask in detector coordinates. Pixels whose construction failed
/// are 0 and cleared in `valid`.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveMask {
    pub values: Array2<f64>,
    pub valid: Array2<bool>,
    pub basis: Basis,
}

pub fn effective_mask(
    basis: Basis,
    spec: &MaskSpec,
    cfg: &OpticsConfig,
    cal: &Calibration,
    grid: usize,
) -> Result<EffectiveMask> {
    Ok(MaskRaster::compute(basis, cfg, cal, grid, None)?.mask(spec))
}

/// Transmitted fraction of a 3x3 sub-pixel sampling of each pixel, for
/// convergence checks of the pixel-centre mask.
pub fn effective_mask_supersampled(
    basis: Basis,
    spec: &MaskSpec,
    cfg: &OpticsConfig,
    cal: &Calibration,
    grid: usize,
) -> Result<Array2<f64>> {
    let chain = OpticsChain::new(cfg)?;
    let rows: Vec<Vec<f64>> = (0..grid)
        .into_par_iter()
        .map(|r| {
            (0..grid)
                .map(|c| {
                    let mut sum = 0.0;
                    let mut n = 0.0;
                    for dy in [-1.0 / 3.0, 0.0, 1.0 / 3.0] {
                        for dx in [-1.0 / 3.0, 0.0, 1.0 / 3.0] {
                            let (u, v) = pixel_to_physical(c as f64 + dx, r as f64 + dy, basis, cal);
                            if let Ok(m) = chain.detector_to_mask(basis, Vector2::new(u, v)) {
                                sum += mask_value(m.x, m.y, spec) as f64;
                                n += 1.0;
                            }
                        }
                    }
                    if n > 0.0 {
                        sum / n
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((grid, grid), flat).expect("grid shape"))
}
