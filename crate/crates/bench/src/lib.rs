//! Inputs shared by the benchmarks.

use epghost_core::fit::joint_fit;
use epghost_core::image::{flat_field_smooth, FlatFieldParams};
use epghost_core::pipeline::{stream_to_image, PipelineConfig};
use epghost_core::sim::{simulate, SimBasis, SimConfig, SimOutput};
use epghost_core::{Calibration, CoincidenceImage, FitConfig, FitResult, FlatField, MaskSpec, MatchConfig, OpticsConfig};

pub fn streams(basis: SimBasis, n_electrons: usize, masked: bool, seed: u64) -> SimOutput {
    let cfg = SimConfig { basis, n_electrons, pair_probability: 0.5, mask_inserted: masked, rng_seed: seed, ..Default::default() };
    let b = basis.photon_basis();
    simulate(&cfg, &OpticsConfig::default(), &MaskSpec::for_basis(b), &Calibration::default()).expect("simulation")
}

pub fn image(basis: SimBasis, n_electrons: usize, masked: bool, seed: u64) -> CoincidenceImage {
    let out = streams(basis, n_electrons, masked, seed);
    let cfg = PipelineConfig { matching: MatchConfig { basis: basis.photon_basis(), ..Default::default() }, ..Default::default() };
    stream_to_image(&out.electrons, &out.photons, &cfg).expect("pipeline").image
}

/// Masked images, flat fields and a converged fit for both bases.
pub struct FitInputs {
    pub image_x: CoincidenceImage,
    pub image_k: CoincidenceImage,
    pub flat_x: FlatField,
    pub flat_k: FlatField,
    pub fit: FitResult,
}

pub fn fit_inputs(n_electrons: usize) -> FitInputs {
    let image_x = image(SimBasis::Position, n_electrons, true, 1);
    let image_k = image(SimBasis::Momentum, n_electrons, true, 2);
    let flat = |basis, seed| flat_field_smooth(&image(basis, n_electrons, false, seed), &FlatFieldParams::default()).expect("flat field");
    let flat_x = flat(SimBasis::Position, 3);
    let flat_k = flat(SimBasis::Momentum, 4);
    let fit = joint_fit(&image_x, &image_k, &flat_x, &flat_k, &FitConfig::default()).expect("fit");
    FitInputs { image_x, image_k, flat_x, flat_k, fit }
}
