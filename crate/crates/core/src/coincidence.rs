//! Drift correction, electron-photon coincidence matching and g² histograms.

use std::io::Write;

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::events::{check_sorted_electrons, check_sorted_photons, ElectronEvent, EventPackage, PhotonEvent};
use crate::filters::gaussian_blur;
use crate::image::{detector_center, Basis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CoincidencePair {
    pub electron: ElectronEvent,
    pub photon_t_ns: i64,
    /// `photon_t_ns - electron.toa_ns`.
    pub dt_ns: i64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig {
    pub expected_delay_ns: i64,
    pub window_halfwidth_ns: i64,
    pub false_window_center_ns: i64,
    pub basis: Basis,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            expected_delay_ns: -40,
            window_halfwidth_ns: 100,
            false_window_center_ns: -150,
            basis: Basis::Position,
        }
    }
}

impl MatchConfig {
    /// True when the true and false windows overlap; reported, not rejected.
    pub fn windows_overlap(&self) -> bool {
        (self.false_window_center_ns - self.expected_delay_ns).abs() <= 2 * self.window_halfwidth_ns
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftCorrection {
    pub package: EventPackage,
    /// Integer pixel translation that was applied.
    pub shift: (i32, i32),
    pub dropped: usize,
}

/// Recentres a package on the detector centre. Position data uses the centre
/// of mass; momentum data uses the strongest peak of a σ = 2 px blurred image.
pub fn drift_correct(package: &EventPackage, basis: Basis, grid: usize) -> Result<DriftCorrection> {
    if package.events.is_empty() {
        return Err(Error::Empty("drift correction of an empty package"));
    }
    let c = detector_center(grid) as f64;
    let (cx, cy) = match basis {
        Basis::Position => {
            let n = package.events.len() as f64;
            let sx: f64 = package.events.iter().map(|e| e.x as f64).sum();
            let sy: f64 = package.events.iter().map(|e| e.y as f64).sum();
            (sx / n, sy / n)
        }
        Basis::Momentum => {
            let (px, py) = beam_peak(&package.events, grid)?;
            (px as f64, py as f64)
        }
    };
    let shift = ((c - cx).round() as i32, (c - cy).round() as i32);
    let (package, dropped) = translate(package, shift, grid);
    Ok(DriftCorrection { package, shift, dropped })
}

/// Column and row of the highest strict local maximum of the blurred hit map,
/// excluding the outermost pixel ring.
pub fn beam_peak(events: &[ElectronEvent], grid: usize) -> Result<(usize, usize)> {
    let mut hits = Array2::<f64>::zeros((grid, grid));
    for e in events {
        if (e.x as usize) < grid && (e.y as usize) < grid {
            hits[[e.y as usize, e.x as usize]] += 1.0;
        }
    }
    let blurred = gaussian_blur(&hits, 2.0, 2.0);
    let mut best: Option<(f64, usize, usize)> = None;
    for r in 1..grid - 1 {
        for c in 1..grid - 1 {
            let v = blurred[[r, c]];
            if v <= 0.0 || best.is_some_and(|(b, _, _)| v <= b) {
                continue;
            }
            let mut is_max = true;
            'nb: for dr in [-1isize, 0, 1] {
                for dc in [-1isize, 0, 1] {
                    if (dr, dc) == (0, 0) {
                        continue;
                    }
                    let n = blurred[[(r as isize + dr) as usize, (c as isize + dc) as usize]];
                    if n >= v {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                best = Some((v, r, c));
            }
        }
    }
    best.map(|(_, r, c)| (c, r)).ok_or(Error::NoPeak)
}

/// Drift-corrects a whole time-sorted stream package by package. Returns the
/// corrected stream and the number of events dropped off the grid.
pub fn correct_stream(
    electrons: &[ElectronEvent],
    basis: Basis,
    package_size: usize,
    grid: usize,
) -> Result<(Vec<ElectronEvent>, usize)> {
    let packages = crate::events::split_packages(electrons, package_size)?;
    let corrected: Vec<Result<DriftCorrection>> =
        packages.par_iter().map(|p| drift_correct(p, basis, grid)).collect();
    let mut out = Vec::with_capacity(electrons.len());
    let mut dropped = 0;
    for c in corrected {
        let c = c?;
        dropped += c.dropped;
        out.extend(c.package.events);
    }
    Ok((out, dropped))
}

fn translate(package: &EventPackage, shift: (i32, i32), grid: usize) -> (EventPackage, usize) {
    let mut events = Vec::with_capacity(package.events.len());
    for e in &package.events {
        let x = e.x as i64 + shift.0 as i64;
        let y = e.y as i64 + shift.1 as i64;
        if (0..grid as i64).contains(&x) && (0..grid as i64).contains(&y) {
            events.push(ElectronEvent { x: x as u16, y: y as u16, ..*e });
        }
    }
    let dropped = package.events.len() - events.len();
    (EventPackage { index: package.index, events }, dropped)
}

/// Streaming one-to-one matcher. Photons are taken in time order; each one
/// claims the unused electron whose arrival is closest to
/// `photon_t - expected_delay`, within the inclusive half-width. Ties go to
/// the earlier electron.
pub fn match_pairs(
    electrons: &[ElectronEvent],
    photons: &[PhotonEvent],
    cfg: &MatchConfig,
) -> Result<Vec<CoincidencePair>> {
    check_sorted_electrons(electrons)?;
    check_sorted_photons(photons)?;
    if cfg.window_halfwidth_ns < 0 {
        return Err(Error::InvalidArgument("window half-width must be non-negative".into()));
    }
    let hw = cfg.window_halfwidth_ns;
    let mut used = vec![false; electrons.len()];
    let mut lo = 0usize;
    let mut pairs = Vec::new();
    for p in photons {
        let target = p.t_ns - cfg.expected_delay_ns;
        // Targets never decrease, so anything left behind stays out of reach.
        while lo < electrons.len() && (used[lo] || electrons[lo].toa_ns < target - hw) {
            lo += 1;
        }
        let mut best: Option<(i64, usize)> = None;
        for (i, e) in electrons.iter().enumerate().skip(lo) {
            if e.toa_ns > target + hw {
                break;
            }
            if used[i] {
                continue;
            }
            let d = (e.toa_ns - target).abs();
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        if let Some((_, i)) = best {
            used[i] = true;
            let electron = electrons[i];
            pairs.push(CoincidencePair { electron, photon_t_ns: p.t_ns, dt_ns: p.t_ns - electron.toa_ns });
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FalseRate {
    pub count: usize,
    pub per_photon: f64,
}

/// Accidental coincidences counted in a window of the same width centred at
/// `false_window_center_ns`, where no correlated pairs are expected.
pub fn false_coincidence_rate(
    electrons: &[ElectronEvent],
    photons: &[PhotonEvent],
    cfg: &MatchConfig,
) -> Result<FalseRate> {
    if cfg.windows_overlap() {
        log::warn!(
            "false-coincidence window at {} ns overlaps the coincidence window at {} ns",
            cfg.false_window_center_ns,
            cfg.expected_delay_ns
        );
    }
    let shifted = MatchConfig { expected_delay_ns: cfg.false_window_center_ns, ..*cfg };
    let count = match_pairs(electrons, photons, &shifted)?.len();
    let per_photon = if photons.is_empty() { 0.0 } else { count as f64 / photons.len() as f64 };
    Ok(FalseRate { count, per_photon })
}

#[derive(Debug, Clone, PartialEq)]
pub struct G2Histogram {
    pub bin_edges_ns: Vec<f64>,
    pub counts: Vec<u64>,
    /// Expected accidental counts per bin for uncorrelated streams.
    pub normalization: f64,
}

impl G2Histogram {
    pub fn centers(&self) -> Vec<f64> {
        self.bin_edges_ns.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn peak_bin(&self) -> Option<usize> {
        let max = *self.counts.iter().max()?;
        self.counts.iter().position(|&c| c == max)
    }
}

/// Histogram of every `photon_t - toa` difference in `[-range, range)`.
pub fn g2(
    electrons: &[ElectronEvent],
    photons: &[PhotonEvent],
    bin_width_ns: f64,
    range_ns: f64,
) -> Result<G2Histogram> {
    if !(bin_width_ns > 0.0) || !(range_ns > 0.0) {
        return Err(Error::InvalidArgument("g2 bin width and range must be positive".into()));
    }
    check_sorted_electrons(electrons)?;
    check_sorted_photons(photons)?;
    let nbins = (2.0 * range_ns / bin_width_ns).ceil() as usize;
    let bin_edges_ns: Vec<f64> = (0..=nbins).map(|i| -range_ns + i as f64 * bin_width_ns).collect();
    let mut counts = vec![0u64; nbins];
    let mut lo = 0usize;
    for p in photons {
        let t = p.t_ns as f64;
        while lo < electrons.len() && t - (electrons[lo].toa_ns as f64) >= range_ns {
            lo += 1;
        }
        for e in &electrons[lo..] {
            let dt = t - e.toa_ns as f64;
            if dt < -range_ns {
                break;
            }
            let b = ((dt + range_ns) / bin_width_ns).floor() as usize;
            if b < nbins {
                counts[b] += 1;
            }
        }
    }
    let span = match (electrons.first(), electrons.last(), photons.first(), photons.last()) {
        (Some(e0), Some(e1), Some(p0), Some(p1)) => {
            (e1.toa_ns.max(p1.t_ns) - e0.toa_ns.min(p0.t_ns)) as f64
        }
        _ => 0.0,
    };
    let normalization = if span > 0.0 {
        electrons.len() as f64 * photons.len() as f64 * bin_width_ns / span
    } else {
        0.0
    };
    Ok(G2Histogram { bin_edges_ns, counts, normalization })
}

pub fn write_pairs_csv(w: impl Write, pairs: &[CoincidencePair]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["x", "y", "toa_ns", "photon_t_ns", "dt_ns"])?;
    for p in pairs {
        wtr.write_record([
            p.electron.x.to_string(),
            p.electron.y.to_string(),
            p.electron.toa_ns.to_string(),
            p.photon_t_ns.to_string(),
            p.dt_ns.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_pairs_csv(r: impl std::io::Read) -> Result<Vec<CoincidencePair>> {
    #[derive(serde::Deserialize)]
    struct Row {
        x: u16,
        y: u16,
        toa_ns: i64,
        photon_t_ns: i64,
        dt_ns: i64,
    }
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let row: Row = row?;
        out.push(CoincidencePair {
            electron: ElectronEvent::new(row.x, row.y, row.toa_ns, 0),
            photon_t_ns: row.photon_t_ns,
            dt_ns: row.dt_ns,
        });
    }
    Ok(out)
}

pub fn write_g2_csv(w: impl Write, hist: &G2Histogram) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["bin_center_ns", "count"])?;
    for (c, n) in hist.centers().iter().zip(&hist.counts) {
        wtr.write_record([c.to_string(), n.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(t: i64) -> ElectronEvent {
        ElectronEvent::new(10, 10, t, 0)
    }

    fn p(t: i64) -> PhotonEvent {
        PhotonEvent { t_ns: t }
    }

    #[test]
    fn empty_photons_give_no_pairs() {
        let pairs = match_pairs(&[e(0), e(5)], &[], &MatchConfig::default()).unwrap();
        assert!(pairs.is_empty());
    }

    #[test]
    fn single_pair_at_expected_delay() {
        let pairs = match_pairs(&[e(0)], &[p(-40)], &MatchConfig::default()).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].dt_ns, -40);
    }

    #[test]
    fn window_edges_are_inclusive() {
        let cfg = MatchConfig::default();
        assert_eq!(match_pairs(&[e(100)], &[p(-40)], &cfg).unwrap().len(), 1);
        assert_eq!(match_pairs(&[e(101)], &[p(-40)], &cfg).unwrap().len(), 0);
        assert_eq!(match_pairs(&[e(-100)], &[p(-40)], &cfg).unwrap().len(), 1);
    }

    #[test]
    fn tie_prefers_earlier_electron() {
        let cfg = MatchConfig::default();
        let pairs = match_pairs(&[e(-10), e(10)], &[p(-40)], &cfg).unwrap();
        assert_eq!(pairs[0].electron.toa_ns, -10);
    }

    #[test]
    fn electrons_used_once() {
        let cfg = MatchConfig::default();
        let pairs = match_pairs(&[e(0)], &[p(-40), p(-40)], &cfg).unwrap();
        assert_eq!(pairs.len(), 1);
    }

    #[test]
    fn unsorted_rejected() {
        let cfg = MatchConfig::default();
        assert!(matches!(match_pairs(&[e(5), e(0)], &[p(0)], &cfg), Err(Error::Unsorted(1))));
        assert!(matches!(match_pairs(&[e(0)], &[p(5), p(0)], &cfg), Err(Error::Unsorted(1))));
    }

    #[test]
    fn drift_identity_and_delta() {
        let pkg = EventPackage { index: 0, events: vec![ElectronEvent::new(127, 127, 0, 0); 4] };
        let out = drift_correct(&pkg, Basis::Position, 256).unwrap();
        assert_eq!(out.package, pkg);
        let pkg = EventPackage { index: 0, events: vec![ElectronEvent::new(130, 125, 0, 0); 4] };
        let out = drift_correct(&pkg, Basis::Position, 256).unwrap();
        assert_eq!(out.shift, (-3, 2));
        assert!(out.package.events.iter().all(|e| (e.x, e.y) == (127, 127)));
    }

    #[test]
    fn drift_drops_off_grid() {
        let mut events = vec![ElectronEvent::new(250, 127, 0, 0); 9];
        events.push(ElectronEvent::new(0, 127, 1, 0));
        let out = drift_correct(&EventPackage { index: 0, events }, Basis::Position, 256).unwrap();
        assert_eq!(out.dropped, 1);
        assert_eq!(out.package.events.len(), 9);
    }

    #[test]
    fn drift_empty_and_no_peak() {
        let empty = EventPackage { index: 0, events: vec![] };
        assert!(matches!(drift_correct(&empty, Basis::Position, 256), Err(Error::Empty(_))));
        let mut events = Vec::new();
        for y in 0..256u16 {
            for x in 0..256u16 {
                events.push(ElectronEvent::new(x, y, 0, 0));
            }
        }
        // Blurring with zero padding leaves a plateau in the middle, where no
        // pixel strictly exceeds its neighbours.
        let pkg = EventPackage { index: 0, events };
        assert!(matches!(drift_correct(&pkg, Basis::Momentum, 256), Err(Error::NoPeak)));
    }

    #[test]
    fn g2_delta_correlation_in_one_bin() {
        let electrons: Vec<_> = (0..50).map(|i| e(i * 10_000)).collect();
        let photons: Vec<_> = (0..50).map(|i| p(i * 10_000 - 40)).collect();
        let h = g2(&electrons, &photons, 10.0, 500.0).unwrap();
        assert_eq!(h.counts.iter().sum::<u64>(), 50);
        let peak = h.peak_bin().unwrap();
        assert_eq!(h.counts[peak], 50);
        assert!(h.bin_edges_ns[peak] <= -40.0 && -40.0 < h.bin_edges_ns[peak + 1]);
        assert_eq!(h.counts.len() + 1, h.bin_edges_ns.len());
    }

    #[test]
    fn g2_rejects_bad_bins() {
        assert!(g2(&[], &[], 0.0, 10.0).is_err());
        assert!(g2(&[], &[], -1.0, 10.0).is_err());
    }

    #[test]
    fn pairs_csv_round_trip() {
        let pairs = vec![CoincidencePair { electron: e(7), photon_t_ns: -33, dt_ns: -40 }];
        let mut buf = Vec::new();
        write_pairs_csv(&mut buf, &pairs).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("x,y,toa_ns,photon_t_ns,dt_ns"));
        assert_eq!(read_pairs_csv(buf.as_slice()).unwrap(), pairs);
    }
}
