#![allow(dead_code)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod invariants;

use std::io::Write;
use std::time::{Duration, Instant};

use epghost_core::coincidence::CoincidencePair;
use epghost_core::fit::joint_fit;
use epghost_core::image::{flat_field_smooth, FlatFieldParams};
use epghost_core::pipeline::{stream_to_image, PipelineConfig};
use epghost_core::sim::{simulate, BeamProfile, SimBasis, SimConfig};
use epghost_core::witness::{combine_and_judge, subsample_errors, ErrorBudget, PsfRefit, SubsampleConfig, SubsampleResult};
use epghost_core::*;

/// Writes one line straight to stderr so it shows without `--nocapture`.
pub fn say(line: &str) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

pub fn verdict_line(criterion: &str, pass: bool, detail: &str) {
    say(&format!("{} criterion {criterion}: {detail}", if pass { "PASS" } else { "FAIL" }));
}

/// Beam profiles of the fixture: a truncated Gaussian spot in position and
/// the default Gaussian divergence in momentum.
pub fn profile(basis: Basis) -> BeamProfile {
    match basis {
        Basis::Position => BeamProfile::TruncatedGaussian { sigma_um: 6.0 },
        Basis::Momentum => BeamProfile::Default,
    }
}

pub fn sim_config(basis: SimBasis, dx: f64, dk: f64, n: usize, masked: bool, seed: u64) -> SimConfig {
    SimConfig {
        basis,
        n_electrons: n,
        pair_probability: 0.5,
        dx_minus_um: dx,
        dk_plus_inv_um: dk,
        profile: profile(basis.photon_basis()),
        background_photon_rate_hz: 200.0,
        stray_electron_rate_hz: 500.0,
        mask_inserted: masked,
        rng_seed: seed,
        ..Default::default()
    }
}

/// Simulated streams run through drift correction and matching.
pub fn run_pipeline(cfg: &SimConfig) -> (Vec<CoincidencePair>, CoincidenceImage) {
    let basis = cfg.basis.photon_basis();
    let out = simulate(cfg, &OpticsConfig::default(), &MaskSpec::for_basis(basis), &Calibration::default()).unwrap();
    let pcfg = PipelineConfig {
        matching: MatchConfig { basis, ..Default::default() },
        ..Default::default()
    };
    let r = stream_to_image(&out.electrons, &out.photons, &pcfg).unwrap();
    (r.pairs, r.image)
}

pub struct Fixture {
    pub dx: f64,
    pub dk: f64,
    pub pairs_x: Vec<CoincidencePair>,
    pub pairs_k: Vec<CoincidencePair>,
    pub image_x: CoincidenceImage,
    pub image_k: CoincidenceImage,
    pub flat_x: FlatField,
    pub flat_k: FlatField,
    pub fit: FitResult,
    pub subsample: SubsampleResult,
    pub verdict: WitnessVerdict,
    pub elapsed: Duration,
}

/// Masked runs of 500k electrons give a little over 1e5 coincidences per
/// basis; flat runs use half as many electrons.
pub const MASKED_ELECTRONS: usize = 500_000;
pub const FLAT_ELECTRONS: usize = 250_000;

/// Full chain: simulate, match, flat-field, joint fit, subsample, witness.
pub fn run_fixture(dx: f64, dk: f64, seed: u64) -> Fixture {
    let t = Instant::now();
    let s = 4 * seed;
    let (pairs_x, image_x) = run_pipeline(&sim_config(SimBasis::Position, dx, dk, MASKED_ELECTRONS, true, s));
    let (_, raw_fx) = run_pipeline(&sim_config(SimBasis::Position, dx, dk, FLAT_ELECTRONS, false, s + 1));
    let (pairs_k, image_k) = run_pipeline(&sim_config(SimBasis::Momentum, dx, dk, MASKED_ELECTRONS, true, s + 2));
    let (_, raw_fk) = run_pipeline(&sim_config(SimBasis::Momentum, dx, dk, FLAT_ELECTRONS, false, s + 3));
    let flat_x = flat_field_smooth(&raw_fx, &FlatFieldParams::default()).unwrap();
    let flat_k = flat_field_smooth(&raw_fk, &FlatFieldParams::default()).unwrap();
    let cfg = FitConfig::default();
    let fit = joint_fit(&image_x, &image_k, &flat_x, &flat_k, &cfg).unwrap();
    let refit = PsfRefit::new(&flat_x, &flat_k, &cfg, fit.params);
    let sub_cfg = SubsampleConfig { seed, ..Default::default() };
    let subsample = subsample_errors(&pairs_x, &pairs_k, &sub_cfg, |a, b| refit.fit(a, b)).unwrap();
    let verdict = combine_and_judge(
        fit.params.psf_pos.sigma_u,
        fit.params.psf_mom.sigma_u,
        &ErrorBudget::new(subsample.stat_x, subsample.stat_k),
    )
    .unwrap();
    Fixture {
        dx,
        dk,
        pairs_x,
        pairs_k,
        image_x,
        image_k,
        flat_x,
        flat_k,
        fit,
        subsample,
        verdict,
        elapsed: t.elapsed(),
    }
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}
