//! Property checks shared by the invariant suite and the acceptance run.
//! Each check takes a seed and reports the first violation it finds.

use nalgebra::Vector3;
use ndarray::Array2;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use epghost_core::calib::{calibrate_from_spacings, fft_calibrate, fit_gaussian_2d, initial_spot, spot_residual, Window};
use epghost_core::coincidence::{drift_correct, g2, match_pairs};
use epghost_core::events::*;
use epghost_core::filters::masked_gaussian;
use epghost_core::fit::{build_model, joint_fit, lae, render_model};
use epghost_core::image::{accumulate, detector_center, flat_field_smooth, physical_to_pixel, pixel_to_physical, FlatFieldParams};
use epghost_core::optics::{effective_mask, map_position_to_mask, map_wavevector_to_mask, reflect_on_paraboloid};
use epghost_core::sim::{simulate, SimBasis, SimConfig, SimOutput};
use epghost_core::simplex::NelderMeadOptions;
use epghost_core::witness::{combine_and_judge, mgvt, subsample_errors, SubsampleConfig};
use epghost_core::*;

pub type Check = fn(u64) -> Result<(), String>;

pub const SEEDS: [u64; 3] = [11, 23, 37];

pub const REGISTRY: &[(&str, Check)] = &[
    ("event-store: binary and csv round trips", event_round_trip),
    ("event-store: split_packages is a partition", split_partition),
    ("event-store: clock sync order-preserving and invertible", clock_sync),
    ("coincidence: match output is a matching", match_is_matching),
    ("coincidence: match commutes with a time shift", match_shift),
    ("coincidence: drift_correct count and centre of mass", drift_com),
    ("coincidence: g2 additive over independent streams", g2_additive),
    ("image: accumulate conserves counts", accumulate_conserves),
    ("image: flat field non-negative and confined to the halo", flat_field_support),
    ("image: masked smoothing keeps a constant", masked_constant),
    ("image: pixel_to_physical affine and invertible", pixel_affine),
    ("optics: focus rays reflect parallel to the axis", focus_rays),
    ("optics: mappings deterministic, continuous, masks binary", mapping_regular),
    ("optics: effective mask rotates with phi", mask_equivariant),
    ("fit: lae non-negative, zero iff equal", lae_properties),
    ("fit: build_model preserves the data total", model_total),
    ("fit: objective history non-increasing", objective_monotone),
    ("witness: mgvt strictly monotone", mgvt_monotone),
    ("witness: mgvt scale covariant", mgvt_scale),
    ("witness: quadrature symmetric in stat and cal", quadrature_symmetry),
    ("witness: subsampling reproducible", subsample_reproducible),
    ("sim: pair offset variance matches the configured width", sim_variance),
    ("sim: photon count bound", sim_photon_bound),
    ("sim: identical seed gives identical files", sim_files_identical),
    ("sim: transmitted fraction with and without the grating", sim_transmission),
    ("calib: spot fit improves on the initial guess", spot_fit_improves),
    ("calib: spacing calibration scale equivariant", spacing_equivariant),
    ("calib: fft calibration rotation and translation invariant", fft_invariant),
];

fn runner(seed: u64, cases: u32) -> TestRunner {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    TestRunner::new_with_rng(Config { cases, failure_persistence: None, ..Config::default() }, TestRng::from_seed(RngAlgorithm::ChaCha, &bytes))
}

fn run<S: Strategy>(seed: u64, cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    runner(seed, cases).run(&strategy, test).map_err(|e| e.to_string())
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn electron_strategy() -> impl Strategy<Value = Vec<ElectronEvent>> {
    prop::collection::vec((0u16..256, 0u16..256, -1_000_000i64..1_000_000, any::<u16>()), 0..200).prop_map(|v| {
        let mut e: Vec<ElectronEvent> = v.into_iter().map(|(x, y, t, tot)| ElectronEvent::new(x, y, t, tot)).collect();
        sort_electrons(&mut e);
        e
    })
}

fn photon_strategy() -> impl Strategy<Value = Vec<PhotonEvent>> {
    prop::collection::vec(-1_000_000i64..1_000_000, 0..200).prop_map(|v| {
        let mut p: Vec<PhotonEvent> = v.into_iter().map(|t_ns| PhotonEvent { t_ns }).collect();
        p.sort();
        p
    })
}

fn event_round_trip(seed: u64) -> Result<(), String> {
    run(seed, 64, (electron_strategy(), photon_strategy()), |(e, p)| {
        let bytes = encode_electrons(&e, 256);
        let (back, grid) = decode_electrons(&bytes).map_err(|x| TestCaseError::fail(x.to_string()))?;
        prop_assert_eq!(grid, 256);
        prop_assert_eq!(&back, &e);
        prop_assert_eq!(encode_electrons(&back, grid), bytes);
        let pb = encode_photons(&p);
        let pback = decode_photons(&pb).map_err(|x| TestCaseError::fail(x.to_string()))?;
        prop_assert_eq!(&pback, &p);
        prop_assert_eq!(encode_photons(&pback), pb);

        let mut csv_e = String::from("x,y,toa_ns,tot\n");
        for ev in &e {
            csv_e.push_str(&format!("{},{},{},{}\n", ev.x, ev.y, ev.toa_ns, ev.tot));
        }
        let ce = read_electron_csv(csv_e.as_bytes(), 256).map_err(|x| TestCaseError::fail(x.to_string()))?;
        prop_assert_eq!(&ce, &e);
        let mut csv_p = String::from("t_ns\n");
        for ph in &p {
            csv_p.push_str(&format!("{}\n", ph.t_ns));
        }
        let cp = read_photon_csv(csv_p.as_bytes()).map_err(|x| TestCaseError::fail(x.to_string()))?;
        prop_assert_eq!(&cp, &p);
        Ok(())
    })?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut e: Vec<ElectronEvent> =
        (0..500).map(|_| ElectronEvent::new(rng.random_range(0..256), rng.random_range(0..256), rng.random_range(0..10_000_000), rng.random())).collect();
    sort_electrons(&mut e);
    let path = dir.path().join("e.epev");
    write_electron_file(&path, &e).map_err(|x| x.to_string())?;
    let first = std::fs::read(&path).map_err(|x| x.to_string())?;
    let back = read_electron_file(&path).map_err(|x| x.to_string())?;
    write_electron_file(&path, &back).map_err(|x| x.to_string())?;
    ensure(back == e && std::fs::read(&path).map_err(|x| x.to_string())? == first, || "electron file round trip".into())
}

fn split_partition(seed: u64) -> Result<(), String> {
    run(seed, 128, (electron_strategy(), 1usize..50), |(e, size)| {
        let packages = split_packages(&e, size).map_err(|x| TestCaseError::fail(x.to_string()))?;
        prop_assert_eq!(packages.iter().map(|p| p.events.len()).sum::<usize>(), e.len());
        let joined: Vec<ElectronEvent> = packages.iter().flat_map(|p| p.events.iter().copied()).collect();
        prop_assert_eq!(joined, e);
        for (i, p) in packages.iter().enumerate() {
            prop_assert_eq!(p.index, i);
            prop_assert!(p.events.len() == size || i + 1 == packages.len());
        }
        Ok(())
    })
}

fn clock_sync(seed: u64) -> Result<(), String> {
    run(seed, 128, (photon_strategy(), -1_000_000_000i64..1_000_000_000), |(p, offset)| {
        let sync = ClockSync { offset_ns: offset, ..Default::default() };
        let shifted = apply_clock_sync(&p, &sync).map_err(|x| TestCaseError::fail(x.to_string()))?;
        prop_assert!(shifted.windows(2).all(|w| w[0] <= w[1]));
        let back = apply_clock_sync(&shifted, &ClockSync { offset_ns: -offset, ..sync })
            .map_err(|x| TestCaseError::fail(x.to_string()))?;
        prop_assert_eq!(back, p);
        Ok(())
    })
}

/// Dense streams so that windows overlap and contention occurs.
fn dense_streams() -> impl Strategy<Value = (Vec<ElectronEvent>, Vec<PhotonEvent>)> {
    (
        prop::collection::vec((0u16..256, 0u16..256, 0i64..5_000), 0..120),
        prop::collection::vec(0i64..5_000, 0..120),
    )
        .prop_map(|(e, p)| {
            let mut e: Vec<ElectronEvent> = e.into_iter().map(|(x, y, t)| ElectronEvent::new(x, y, t, 1)).collect();
            sort_electrons(&mut e);
            let mut p: Vec<PhotonEvent> = p.into_iter().map(|t_ns| PhotonEvent { t_ns }).collect();
            p.sort();
            (e, p)
        })
}

fn match_is_matching(seed: u64) -> Result<(), String> {
    run(seed, 128, dense_streams(), |(e, p)| {
        let cfg = MatchConfig::default();
        let pairs = match_pairs(&e, &p, &cfg).map_err(|x| TestCaseError::fail(x.to_string()))?;
        // Electrons are identified by their index; equal events are told apart by multiplicity.
        let mut used = vec![false; e.len()];
        let mut photon_used = vec![false; p.len()];
        for pair in &pairs {
            let pi = p.iter().enumerate().position(|(i, ph)| ph.t_ns == pair.photon_t_ns && !photon_used[i]);
            prop_assert!(pi.is_some(), "photon used twice");
            photon_used[pi.unwrap()] = true;
            let ei = e.iter().enumerate().position(|(i, ev)| *ev == pair.electron && !used[i]);
            prop_assert!(ei.is_some(), "electron used twice");
            used[ei.unwrap()] = true;
            prop_assert!((pair.dt_ns - cfg.expected_delay_ns).abs() <= cfg.window_halfwidth_ns);
        }
        Ok(())
    })
}

fn match_shift(seed: u64) -> Result<(), String> {
    run(seed, 128, (dense_streams(), -1_000_000_000i64..1_000_000_000), |((e, p), c)| {
        let cfg = MatchConfig::default();
        let base = match_pairs(&e, &p, &cfg).map_err(|x| TestCaseError::fail(x.to_string()))?;
        let es: Vec<ElectronEvent> = e.iter().map(|ev| ElectronEvent { toa_ns: ev.toa_ns + c, ..*ev }).collect();
        let ps: Vec<PhotonEvent> = p.iter().map(|ph| PhotonEvent { t_ns: ph.t_ns + c }).collect();
        let shifted = match_pairs(&es, &ps, &cfg).map_err(|x| TestCaseError::fail(x.to_string()))?;
        let expected: Vec<CoincidencePair> = base
            .iter()
            .map(|q| CoincidencePair {
                electron: ElectronEvent { toa_ns: q.electron.toa_ns + c, ..q.electron },
                photon_t_ns: q.photon_t_ns + c,
                dt_ns: q.dt_ns,
            })
            .collect();
        prop_assert_eq!(shifted, expected);
        Ok(())
    })
}

fn drift_com(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = GRID;
    let c = detector_center(grid) as f64;
    for _ in 0..50 {
        let cx: f64 = rng.random_range(60.0..190.0);
        let cy: f64 = rng.random_range(60.0..190.0);
        let n = rng.random_range(50..2000);
        let spread = Normal::new(0.0, rng.random_range(1.0..15.0)).unwrap();
        let events: Vec<ElectronEvent> = (0..n)
            .map(|i| {
                let x = (cx + spread.sample(&mut rng)).round().clamp(0.0, 255.0) as u16;
                let y = (cy + spread.sample(&mut rng)).round().clamp(0.0, 255.0) as u16;
                ElectronEvent::new(x, y, i as i64, 1)
            })
            .collect();
        let package = EventPackage { index: 0, events };
        for basis in [Basis::Position, Basis::Momentum] {
            let d = drift_correct(&package, basis, grid).map_err(|e| e.to_string())?;
            ensure(d.package.events.len() + d.dropped == n && d.package.events.len() <= n, || "event count grew".into())?;
            if basis == Basis::Position {
                let m = d.package.events.len() as f64;
                let mx = d.package.events.iter().map(|e| e.x as f64).sum::<f64>() / m;
                let my = d.package.events.iter().map(|e| e.y as f64).sum::<f64>() / m;
                ensure((mx - c).abs() <= 1.0 && (my - c).abs() <= 1.0, || format!("centre of mass ({mx}, {my})"))?;
            }
        }
    }
    Ok(())
}

fn g2_additive(seed: u64) -> Result<(), String> {
    let (bin, range) = (10.0, 500.0);
    run(seed, 64, (dense_streams(), dense_streams()), |((ea, pa), (eb, pb))| {
        // The second stream is moved far enough that no cross pair lands in range.
        let off = 1_000_000;
        let eb: Vec<ElectronEvent> = eb.iter().map(|e| ElectronEvent { toa_ns: e.toa_ns + off, ..*e }).collect();
        let pb: Vec<PhotonEvent> = pb.iter().map(|p| PhotonEvent { t_ns: p.t_ns + off }).collect();
        let e: Vec<ElectronEvent> = ea.iter().chain(&eb).copied().collect();
        let p: Vec<PhotonEvent> = pa.iter().chain(&pb).copied().collect();
        let ha = g2(&ea, &pa, bin, range).map_err(|x| TestCaseError::fail(x.to_string()))?;
        let hb = g2(&eb, &pb, bin, range).map_err(|x| TestCaseError::fail(x.to_string()))?;
        let h = g2(&e, &p, bin, range).map_err(|x| TestCaseError::fail(x.to_string()))?;
        prop_assert_eq!(&h.bin_edges_ns, &ha.bin_edges_ns);
        let sum: Vec<u64> = ha.counts.iter().zip(&hb.counts).map(|(a, b)| a + b).collect();
        prop_assert_eq!(h.counts, sum);
        Ok(())
    })
}

fn accumulate_conserves(seed: u64) -> Result<(), String> {
    run(seed, 64, dense_streams(), |(e, _)| {
        let pairs: Vec<CoincidencePair> =
            e.iter().map(|&electron| CoincidencePair { electron, photon_t_ns: electron.toa_ns - 40, dt_ns: -40 }).collect();
        for basis in [Basis::Position, Basis::Momentum] {
            let img = accumulate(&pairs, basis, &Calibration::default());
            prop_assert_eq!(img.total(), pairs.len() as f64);
        }
        Ok(())
    })
}

fn disc(grid: usize, cx: f64, cy: f64, r: f64) -> Array2<bool> {
    Array2::from_shape_fn((grid, grid), |(row, col)| (col as f64 - cx).hypot(row as f64 - cy) <= r)
}

/// Pixels within `r` of any set pixel.
fn dilate(mask: &Array2<bool>, r: f64) -> Array2<bool> {
    let (h, w) = mask.dim();
    let ri = r.ceil() as isize;
    let mut out = Array2::from_elem((h, w), false);
    for ((row, col), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        for dr in -ri..=ri {
            for dc in -ri..=ri {
                let (rr, cc) = (row as isize + dr, col as isize + dc);
                if (dr * dr + dc * dc) as f64 <= r * r && (0..h as isize).contains(&rr) && (0..w as isize).contains(&cc) {
                    out[[rr as usize, cc as usize]] = true;
                }
            }
        }
    }
    out
}

fn flat_field_support(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cal = Calibration::default();
    for basis in [Basis::Position, Basis::Momentum] {
        let mut img = CoincidenceImage::zeros(GRID, basis, &cal);
        let cx = rng.random_range(100.0..156.0);
        let cy = rng.random_range(100.0..156.0);
        let r = rng.random_range(30.0..60.0);
        let beam = disc(GRID, cx, cy, r);
        for ((row, col), v) in img.counts.indexed_iter_mut() {
            if beam[[row, col]] {
                *v = Poisson::new(rng.random_range(20.0..40.0)).unwrap().sample(&mut rng);
            } else if rng.random::<f64>() < 0.001 {
                *v = 1.0;
            }
        }
        let params = FlatFieldParams::default();
        let ff = flat_field_smooth(&img, &params).map_err(|e| e.to_string())?;
        ensure(ff.values.iter().all(|&v| v >= 0.0), || "negative flat-field value".into())?;
        let sigma = params.sigma_for(basis);
        let halo = dilate(&ff.beam_mask, 3.0 * sigma);
        let peak = ff.values.iter().cloned().fold(0.0, f64::max);
        for ((row, col), &v) in ff.values.indexed_iter() {
            if !halo[[row, col]] && v > 2e-3 * peak {
                return Err(format!("{basis:?} value {v} at ({row}, {col}) outside the 3 sigma halo"));
            }
        }
    }
    Ok(())
}

fn masked_constant(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..4 {
        let c = rng.random_range(0.5..100.0);
        let sigma = rng.random_range(1.0..5.0);
        let r = rng.random_range(30.0..70.0);
        let mask = disc(GRID, 127.0, 127.0, r);
        let mut v = mask.mapv(|m| if m { c } else { 0.0 });
        for _ in 0..3 {
            v = masked_gaussian(&v, &mask, sigma);
        }
        let interior = disc(GRID, 127.0, 127.0, r - 4.0 * sigma - 1.0);
        for ((row, col), &x) in v.indexed_iter() {
            if mask[[row, col]] && !((x - c).abs() <= 0.01 * c) {
                return Err(format!("value {x} vs {c} at ({row}, {col})"));
            }
            if interior[[row, col]] && !((x - c).abs() <= 1e-9 * c) {
                return Err(format!("interior value {x} vs {c}"));
            }
        }
    }
    Ok(())
}

fn pixel_affine(seed: u64) -> Result<(), String> {
    let strategy = (-10.0f64..300.0, -10.0f64..300.0, -10.0f64..300.0, -10.0f64..300.0, 0.0f64..1.0, 0.01f64..1.0, 0.001f64..0.5);
    run(seed, 256, strategy, |(x1, y1, x2, y2, a, ps, ms)| {
        let cal = Calibration { pos_scale: ps, mom_scale: ms, ..Default::default() };
        for basis in [Basis::Position, Basis::Momentum] {
            let p1 = pixel_to_physical(x1, y1, basis, &cal);
            let p2 = pixel_to_physical(x2, y2, basis, &cal);
            let pm = pixel_to_physical(a * x1 + (1.0 - a) * x2, a * y1 + (1.0 - a) * y2, basis, &cal);
            let tol = 1e-9 * (1.0 + p1.0.abs() + p2.0.abs() + p1.1.abs() + p2.1.abs());
            prop_assert!((pm.0 - (a * p1.0 + (1.0 - a) * p2.0)).abs() < tol);
            prop_assert!((pm.1 - (a * p1.1 + (1.0 - a) * p2.1)).abs() < tol);
            let back = physical_to_pixel(p1.0, p1.1, basis, &cal);
            prop_assert!((back.0 - x1).abs() < 1e-9 && (back.1 - y1).abs() < 1e-9);
        }
        Ok(())
    })
}

fn focus_rays(seed: u64) -> Result<(), String> {
    run(seed, 512, (100.0f64..5000.0, 0.0f64..std::f64::consts::TAU, -0.99f64..0.99), |(f, az, cz)| {
        let s = (1.0 - cz * cz).sqrt();
        let d = Vector3::new(s * az.cos(), s * az.sin(), cz);
        let (_, r) = reflect_on_paraboloid(Vector3::zeros(), d, f).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!(r.x.abs() < 1e-12 && r.y.abs() < 1e-12, "reflected {:?}", r);
        prop_assert!((r.z.abs() - 1.0).abs() < 1e-12);
        Ok(())
    })
}

fn mapping_regular(seed: u64) -> Result<(), String> {
    let cfg = OpticsConfig::default();
    run(seed, 256, (-12.0f64..12.0, -12.0f64..12.0, -1.5f64..1.5, -1.5f64..1.5), |(x, y, kx, ky)| {
        let h = 1e-6;
        if let Ok(a) = map_position_to_mask([x, y], &cfg) {
            prop_assert_eq!(Some(a), map_position_to_mask([x, y], &cfg).ok());
            let b = map_position_to_mask([x + h, y - h], &cfg).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert!((a[0] - b[0]).hypot(a[1] - b[1]) < 1e-3, "jump {:?} {:?}", a, b);
        }
        if let Ok(a) = map_wavevector_to_mask([kx, ky], &cfg) {
            prop_assert_eq!(Some(a), map_wavevector_to_mask([kx, ky], &cfg).ok());
            if let Ok(b) = map_wavevector_to_mask([kx + h, ky - h], &cfg) {
                prop_assert!((a[0] - b[0]).hypot(a[1] - b[1]) < 1e-2, "jump {:?} {:?}", a, b);
            }
        }
        Ok(())
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cal = Calibration::default();
    for basis in [Basis::Position, Basis::Momentum] {
        let spec = MaskSpec { offset_um: rng.random_range(0.0..30.0), ..MaskSpec::for_basis(basis) };
        let m = effective_mask(basis, &spec, &cfg, &cal, GRID).map_err(|e| e.to_string())?;
        ensure(m.values.iter().all(|&v| v == 0.0 || v == 1.0), || "non-binary mask".into())?;
        ensure(m.values.iter().zip(&m.valid).all(|(&v, &ok)| ok || v == 0.0), || "invalid pixel transmits".into())?;
        ensure(effective_mask(basis, &spec, &cfg, &cal, GRID).map_err(|e| e.to_string())? == m, || "mask not deterministic".into())?;
    }
    Ok(())
}

fn mask_equivariant(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cal = Calibration::default();
    let c = detector_center(GRID) as f64;
    for basis in [Basis::Position, Basis::Momentum] {
        let delta: f64 = rng.random_range(-40.0..40.0);
        let base = OpticsConfig::default();
        let turned = match basis {
            Basis::Position => OpticsConfig { phi_x_deg: base.phi_x_deg + delta, ..base },
            Basis::Momentum => OpticsConfig { phi_k_deg: base.phi_k_deg + delta, ..base },
        };
        let spec = MaskSpec::for_basis(basis);
        let m0 = effective_mask(basis, &spec, &base, &cal, GRID).map_err(|e| e.to_string())?;
        let m1 = effective_mask(basis, &spec, &turned, &cal, GRID).map_err(|e| e.to_string())?;
        let (s, co) = delta.to_radians().sin_cos();
        let at = |r: isize, col: isize| -> Option<(f64, bool)> {
            if (0..GRID as isize).contains(&r) && (0..GRID as isize).contains(&col) {
                Some((m0.values[[r as usize, col as usize]], m0.valid[[r as usize, col as usize]]))
            } else {
                None
            }
        };
        let mut compared = 0usize;
        for ((row, col), &v) in m1.values.indexed_iter() {
            if !m1.valid[[row, col]] {
                continue;
            }
            // Pixel p at φ + Δ sees what pixel R(Δ)p sees at φ.
            let (u, w) = (col as f64 - c, row as f64 - c);
            let (src_c, src_r) = (c + co * u - s * w, c + s * u + co * w);
            let (ri, ci) = (src_r.round() as isize, src_c.round() as isize);
            let Some((v0, ok0)) = at(ri, ci) else { continue };
            if !ok0 {
                continue;
            }
            compared += 1;
            if v0 != v {
                let near_edge = (-1..=1).any(|dr| (-1..=1).any(|dc| at(ri + dr, ci + dc).is_some_and(|(x, ok)| !ok || x == v)));
                if !near_edge {
                    return Err(format!("{basis:?} mismatch at ({row}, {col}) more than 1 px from an edge"));
                }
            }
        }
        ensure(compared > 1000, || format!("{basis:?} only {compared} pixels compared"))?;
    }
    Ok(())
}

fn lae_properties(seed: u64) -> Result<(), String> {
    let shape = 12usize;
    let strategy = (
        prop::collection::vec(0.0f64..100.0, shape * shape),
        prop::collection::vec(0.0f64..100.0, shape * shape),
        prop::collection::vec(any::<bool>(), shape * shape),
        0usize..shape * shape,
    );
    run(seed, 256, strategy, |(d, m, b, i)| {
        let d = Array2::from_shape_vec((shape, shape), d).unwrap();
        let m = Array2::from_shape_vec((shape, shape), m).unwrap();
        let b = Array2::from_shape_vec((shape, shape), b).unwrap();
        prop_assert!(lae(&d, &m, &b) >= 0.0);
        prop_assert_eq!(lae(&d, &d, &b), 0.0);
        let mut e = d.clone();
        let idx = [i / shape, i % shape];
        e[idx] += 1.0;
        let l = lae(&d, &e, &b);
        if b[idx] {
            prop_assert!(l > 0.0);
        } else {
            prop_assert_eq!(l, 0.0);
        }
        let masked_equal = d.iter().zip(&m).zip(&b).all(|((x, y), &k)| !k || x == y);
        prop_assert_eq!(lae(&d, &m, &b) == 0.0, masked_equal);
        Ok(())
    })
}

fn synthetic_flat(basis: Basis, cx: f64, cy: f64, r: f64) -> FlatField {
    let beam_mask = disc(GRID, cx, cy, r);
    let values = Array2::from_shape_fn((GRID, GRID), |(row, col)| {
        let d = (col as f64 - cx).hypot(row as f64 - cy) / r;
        if d <= 1.0 {
            (-d * d).exp()
        } else {
            0.0
        }
    });
    FlatField { values, basis, scale: Calibration::default().scale(basis), beam_mask }
}

fn model_total(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..10 {
        let flat = synthetic_flat(Basis::Position, rng.random_range(90.0..160.0), rng.random_range(90.0..160.0), rng.random_range(10.0..60.0));
        let blurred = Array2::from_shape_fn((GRID, GRID), |_| rng.random::<f64>());
        let total = rng.random_range(1.0..1e7);
        let model = build_model(&flat, &blurred, total).map_err(|e| e.to_string())?;
        let sum: f64 = model.iter().zip(&flat.beam_mask).filter(|(_, &m)| m).map(|(v, _)| v).sum();
        ensure(((sum - total) / total).abs() <= 1e-9, || format!("model total {sum} vs {total}"))?;
    }
    Ok(())
}

fn objective_monotone(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = FitConfig::default();
    let mut truth = FitParams::from_optics(&base.optics);
    truth.psf_pos.sigma_u = rng.random_range(1.0..2.0);
    truth.psf_mom.sigma_u = rng.random_range(0.3..0.7);
    let flat_x = synthetic_flat(Basis::Position, 127.0, 127.0, 45.0);
    let flat_k = synthetic_flat(Basis::Momentum, 127.0, 127.0, 30.0);
    let mut image = |basis, flat: &FlatField| -> Result<CoincidenceImage, String> {
        let model = render_model(basis, flat, &truth, &base, 1e5).map_err(|e| e.to_string())?;
        let counts = model.mapv(|m| if m > 0.0 { Poisson::new(m).unwrap().sample(&mut rng) } else { 0.0 });
        Ok(CoincidenceImage { counts, ..CoincidenceImage::zeros(GRID, basis, &base.calibration) })
    };
    let img_x = image(Basis::Position, &flat_x)?;
    let img_k = image(Basis::Momentum, &flat_k)?;
    let mut start = truth;
    start.psf_pos.sigma_u *= 1.5;
    start.psf_mom.sigma_u *= 0.6;
    let cfg = FitConfig {
        mode: FitMode::PsfOnly,
        init: Some(start),
        phase_scan_steps: 0,
        nelder_mead: NelderMeadOptions { tol_rel: 1e-6, ..Default::default() },
        ..base
    };
    let fit = joint_fit(&img_x, &img_k, &flat_x, &flat_k, &cfg).map_err(|e| e.to_string())?;
    let h = &fit.objective_history;
    ensure(h.len() > 5, || format!("only {} iterations recorded", h.len()))?;
    ensure(h.windows(2).all(|w| w[1] <= w[0]), || "objective increased".into())?;
    ensure((h.last().unwrap() - fit.objective()).abs() <= 1e-9 * fit.objective(), || "history does not end at the result".into())
}

fn mgvt_monotone(seed: u64) -> Result<(), String> {
    run(seed, 512, (1e-3f64..10.0, 1e-3f64..10.0, 1e-6f64..1.0), |(dx, dk, eps)| {
        let (p, _) = mgvt(dx, dk).unwrap();
        prop_assert!(mgvt(dx * (1.0 + eps), dk).unwrap().0 > p);
        prop_assert!(mgvt(dx, dk * (1.0 + eps)).unwrap().0 > p);
        prop_assert!(mgvt(dx * (1.0 - 0.5 * eps), dk).unwrap().0 < p);
        prop_assert!(mgvt(dx, dk * (1.0 - 0.5 * eps)).unwrap().0 < p);
        Ok(())
    })
}

fn mgvt_scale(seed: u64) -> Result<(), String> {
    run(seed, 512, (1e-3f64..10.0, 1e-3f64..10.0, 1e-3f64..1e3), |(dx, dk, c)| {
        let a = mgvt(dx, dk).unwrap();
        let b = mgvt(c * dx, dk / c).unwrap();
        prop_assert!((a.0 - b.0).abs() <= 1e-12 * a.0);
        prop_assert_eq!(a.1, b.1);
        Ok(())
    })
}

fn quadrature_symmetry(seed: u64) -> Result<(), String> {
    run(seed, 512, (0.1f64..5.0, 0.05f64..2.0, 0.0f64..0.5, 0.0f64..0.5, 0.0f64..0.2, 0.0f64..0.2), |(dx, dk, sx, cx, sk, ck)| {
        let a = combine_and_judge(dx, dk, &ErrorBudget { stat_x: sx, cal_x: cx, stat_k: sk, cal_k: ck }).unwrap();
        let b = combine_and_judge(dx, dk, &ErrorBudget { stat_x: cx, cal_x: sx, stat_k: ck, cal_k: sk }).unwrap();
        let close = |u: f64, v: f64| (u - v).abs() <= 1e-12 * (1.0 + u.abs());
        prop_assert!(close(a.err_x, b.err_x) && close(a.err_k, b.err_k) && close(a.err_total, b.err_total));
        prop_assert_eq!(a.product, b.product);
        Ok(())
    })
}

fn subsample_reproducible(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..5000).map(|_| rng.random()).collect();
    let ks: Vec<f64> = (0..4000).map(|_| rng.random()).collect();
    let cfg = SubsampleConfig { n_batches: 20, batch_size: 1000, seed };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let f = |a: &[f64], b: &[f64]| Ok((mean(a), mean(b)));
    let r1 = subsample_errors(&xs, &ks, &cfg, f).map_err(|e| e.to_string())?;
    let r2 = subsample_errors(&xs, &ks, &cfg, f).map_err(|e| e.to_string())?;
    ensure(r1.stat_x.to_bits() == r2.stat_x.to_bits() && r1.stat_k.to_bits() == r2.stat_k.to_bits(), || "stat differs".into())?;
    ensure(
        r1.sigma_x.iter().map(|v| v.to_bits()).eq(r2.sigma_x.iter().map(|v| v.to_bits()))
            && r1.sigma_k.iter().map(|v| v.to_bits()).eq(r2.sigma_k.iter().map(|v| v.to_bits())),
        || "batch values differ".into(),
    )?;
    let r3 = subsample_errors(&xs, &ks, &SubsampleConfig { seed: seed + 1, ..cfg }, f).map_err(|e| e.to_string())?;
    ensure(r3.sigma_x != r1.sigma_x, || "seed has no effect".into())
}

fn sim_run(basis: SimBasis, n: usize, masked: bool, seed: u64) -> Result<SimOutput, String> {
    let cfg = SimConfig {
        basis,
        n_electrons: n,
        pair_probability: 0.5,
        mask_inserted: masked,
        background_photon_rate_hz: 200.0,
        stray_electron_rate_hz: 500.0,
        rng_seed: seed,
        ..Default::default()
    };
    simulate(&cfg, &OpticsConfig::default(), &MaskSpec::for_basis(basis.photon_basis()), &Calibration::default()).map_err(|e| e.to_string())
}

fn sim_variance(seed: u64) -> Result<(), String> {
    for basis in [SimBasis::Position, SimBasis::Momentum] {
        let out = sim_run(basis, 40_000, true, seed)?;
        let cfg = &out.truth.config;
        let want = match basis {
            SimBasis::Position => cfg.dx_minus_um,
            _ => cfg.dk_plus_inv_um,
        }
        .powi(2);
        for s in &out.truth.offset_stats {
            let se = want * (2.0 / (s.n as f64 - 1.0)).sqrt();
            ensure((s.variance() - want).abs() <= 3.0 * se, || format!("{basis:?} variance {} vs {want}", s.variance()))?;
        }
    }
    Ok(())
}

fn sim_photon_bound(seed: u64) -> Result<(), String> {
    for basis in [SimBasis::Position, SimBasis::Momentum] {
        for masked in [true, false] {
            let out = sim_run(basis, 40_000, masked, seed)?;
            let cfg = &out.truth.config;
            let pairs = cfg.n_electrons as f64 * cfg.pair_probability;
            let bg = cfg.background_photon_rate_hz * out.truth.duration_ns as f64 * 1e-9;
            let bound = pairs + 3.0 * pairs.sqrt() + bg + 3.0 * bg.sqrt();
            ensure(out.photons.len() as f64 <= bound, || format!("{} photons above {bound}", out.photons.len()))?;
        }
    }
    Ok(())
}

fn sim_files_identical(seed: u64) -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for (i, basis) in [SimBasis::Position, SimBasis::Momentum].into_iter().enumerate() {
        let a = sim_run(basis, 5_000, true, seed)?;
        let b = sim_run(basis, 5_000, true, seed)?;
        let (sa, sb) = (format!("a{i}"), format!("b{i}"));
        a.write(dir.path(), &sa).map_err(|e| e.to_string())?;
        b.write(dir.path(), &sb).map_err(|e| e.to_string())?;
        for ext in ["epev", "phev", "truth.txt"] {
            let fa = std::fs::read(dir.path().join(format!("{sa}.{ext}"))).map_err(|e| e.to_string())?;
            let fb = std::fs::read(dir.path().join(format!("{sb}.{ext}"))).map_err(|e| e.to_string())?;
            ensure(fa == fb, || format!("{ext} files differ"))?;
        }
    }
    Ok(())
}

fn sim_transmission(seed: u64) -> Result<(), String> {
    for basis in [SimBasis::Position, SimBasis::Momentum] {
        let open = sim_run(basis, 40_000, false, seed)?;
        let t = open.truth.config.glass_transmissivity;
        let reached = (open.truth.pairs - open.truth.aperture_lost) as f64;
        let frac = open.truth.transmitted_pairs as f64 / reached;
        let sd = (t * (1.0 - t) / reached).sqrt();
        ensure((frac - t).abs() <= 3.0 * sd, || format!("{basis:?} open fraction {frac} vs {t}"))?;
        let masked = sim_run(basis, 40_000, true, seed + 1)?;
        let reached = (masked.truth.pairs - masked.truth.aperture_lost) as f64;
        let ratio = masked.truth.transmitted_pairs as f64 / reached / t;
        ensure((ratio - 0.5).abs() <= 0.1, || format!("{basis:?} grating transmits {ratio} of the open rate"))?;
    }
    Ok(())
}

fn spot_fit_improves(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..10 {
        let (u, v) = (rng.random_range(12.0..20.0), rng.random_range(12.0..20.0));
        let (a, s, bg) = (rng.random_range(20.0..200.0), rng.random_range(1.0..3.0), rng.random_range(0.0..10.0));
        let img = Array2::from_shape_fn((32, 32), |(r, c)| {
            let m = bg + a * (-((c as f64 - u).powi(2) + (r as f64 - v).powi(2)) / (2.0 * s * s)).exp();
            Poisson::new(m.max(1e-9)).unwrap().sample(&mut rng)
        });
        let win = Window::around(v.round() as usize, u.round() as usize, 8, img.dim());
        let init = initial_spot(&img, win).map_err(|e| e.to_string())?;
        let fit = fit_gaussian_2d(&img, win, &init).map_err(|e| e.to_string())?;
        let (r0, r1) = (spot_residual(&img, win, &init).unwrap(), spot_residual(&img, win, &fit).unwrap());
        ensure(r1 <= r0, || format!("residual {r1} above initial {r0}"))?;
    }
    Ok(())
}

fn spacing_equivariant(seed: u64) -> Result<(), String> {
    let strategy = (prop::collection::vec((0.0f64..500.0, 0.0f64..500.0), 2..30), 0.01f64..100.0, 0.1f64..50.0);
    run(seed, 256, strategy, |(pts, c, known)| {
        let Ok(a) = calibrate_from_spacings(&pts, known) else { return Ok(()) };
        let scaled: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (c * x, c * y)).collect();
        let b = calibrate_from_spacings(&scaled, known).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!((b.scale * c - a.scale).abs() <= 1e-9 * a.scale);
        prop_assert_eq!(a.n_measurements, b.n_measurements);
        Ok(())
    })
}

fn fft_invariant(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let period = rng.random_range(3.5..6.0);
    let known = 462.9;
    let grating = |angle: f64, shift: (f64, f64)| {
        let (s, c) = angle.to_radians().sin_cos();
        Array2::from_shape_fn((128, 128), |(r, col)| {
            let (x, y) = (col as f64 - shift.0, r as f64 - shift.1);
            1.0 + (std::f64::consts::TAU * (c * x + s * y) / period).cos()
        })
    };
    let reference = fft_calibrate(&grating(0.0, (0.0, 0.0)), known).map_err(|e| e.to_string())?.scale;
    ensure((reference * period / known - 1.0).abs() <= 0.01, || format!("reference scale {reference} for period {period}"))?;
    for _ in 0..4 {
        let angle = rng.random_range(0.0..180.0);
        let shift = (rng.random_range(0.0..50.0), rng.random_range(0.0..50.0));
        let r = fft_calibrate(&grating(angle, shift), known).map_err(|e| e.to_string())?.scale;
        ensure((r / reference - 1.0).abs() <= 0.01, || format!("angle {angle:.1} shift {shift:?} gives {r} vs {reference}"))?;
    }
    Ok(())
}
