use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};

use epghost_core::calib::{calibrate_frames, detect_spots, fft_calibrate, fit_gaussian_2d, initial_spot, CalibResult, Window};
use epghost_core::coincidence::{g2 as g2_histogram, read_pairs_csv, write_g2_csv, write_pairs_csv};
use epghost_core::events::{apply_clock_sync, load_electrons, load_photons};
use epghost_core::fit::{joint_fit, parse_fit_report};
use epghost_core::image::{flat_field_smooth, read_grid, write_grid, GridFile};
use epghost_core::pipeline::stream_to_image;
use epghost_core::sim::simulate as run_simulation;
use epghost_core::witness::{combine_and_judge, sample_std, subsample_errors, PsfRefit};
use epghost_core::{Basis, CoincidenceImage, Error, FlatField};

use crate::config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    NoConvergence(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::NoConvergence(_) => 4,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NoConvergence(_) => Failure::NoConvergence(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Data(format!("{}: {e}", path.display()))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Beam-mask companion of a flat-field grid file.
pub fn mask_path(flat: &Path) -> PathBuf {
    flat.with_extension("mask.grid")
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BasisArg {
    Position,
    Momentum,
}

impl From<BasisArg> for Basis {
    fn from(b: BasisArg) -> Self {
        match b {
            BasisArg::Position => Basis::Position,
            BasisArg::Momentum => Basis::Momentum,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MaskArg {
    In,
    Out,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Output directory.
    #[arg(short, long)]
    pub out_dir: PathBuf,
    /// File stem of the written files.
    #[arg(long, default_value = "run")]
    pub stem: String,
    /// Overrides sim.basis.
    #[arg(long, value_enum)]
    pub basis: Option<BasisArg>,
    /// Overrides sim.mask_inserted.
    #[arg(long, value_enum)]
    pub mask: Option<MaskArg>,
}

pub fn simulate(cfg: &RunConfig, a: &SimulateArgs) -> Result<(), Failure> {
    let mut cfg = cfg.clone();
    if let Some(b) = a.basis {
        cfg.sim.basis = Basis::from(b).to_string();
    }
    if let Some(m) = a.mask {
        cfg.sim.mask_inserted = matches!(m, MaskArg::In);
    }
    let sim = cfg.sim_config().map_err(|e| Failure::Config(e.to_string()))?;
    let basis = sim.basis.photon_basis();
    let out = run_simulation(&sim, &cfg.optics(), &cfg.mask(basis), &cfg.calibration())?;
    std::fs::create_dir_all(&a.out_dir).map_err(io_err(&a.out_dir))?;
    out.write(&a.out_dir, &a.stem)?;
    print!("{}", out.truth.to_text());
    Ok(())
}

#[derive(Args, Debug)]
pub struct MatchArgs {
    /// Electron events, binary or `.csv` with `x,y,toa_ns,tot`.
    #[arg(long)]
    pub electrons: PathBuf,
    /// Photon events, binary or `.csv` with `t_ns`.
    #[arg(long)]
    pub photons: PathBuf,
    #[arg(long, value_enum)]
    pub basis: BasisArg,
    /// Prefix of the pairs CSV, g2 CSV and image grid.
    #[arg(short, long)]
    pub out: PathBuf,
    /// Skip sorting of the input streams.
    #[arg(long)]
    pub presorted: bool,
}

pub fn match_cmd(cfg: &RunConfig, a: &MatchArgs) -> Result<(), Failure> {
    let basis: Basis = a.basis.into();
    let electrons = load_electrons(&a.electrons, a.presorted)?;
    let photons = apply_clock_sync(&load_photons(&a.photons, a.presorted)?, &cfg.clock_sync())?;
    let pcfg = cfg.pipeline(basis);
    let out = stream_to_image(&electrons, &photons, &pcfg)?;
    let pairs_path = with_suffix(&a.out, ".pairs.csv");
    write_pairs_csv(BufWriter::new(File::create(&pairs_path).map_err(io_err(&pairs_path))?), &out.pairs)?;
    let hist = g2_histogram(&electrons, &photons, cfg.matching.g2_bin_ns, cfg.matching.g2_range_ns)?;
    let g2_path = with_suffix(&a.out, ".g2.csv");
    write_g2_csv(BufWriter::new(File::create(&g2_path).map_err(io_err(&g2_path))?), &hist)?;
    write_grid(with_suffix(&a.out, ".image.grid"), &out.image.counts, basis, out.image.scale)?;
    println!("basis: {basis}");
    println!("electrons: {}", electrons.len());
    println!("photons: {}", photons.len());
    println!("pairs: {}", out.pairs.len());
    println!("false_coincidences: {}", out.false_rate.count);
    println!("false_per_photon: {:.6}", out.false_rate.per_photon);
    println!("dropped_off_grid: {}", out.dropped);
    println!("windows_overlap: {}", pcfg.matching.windows_overlap());
    Ok(())
}

#[derive(Args, Debug)]
pub struct FlatfieldArgs {
    /// Coincidence image grid of a mask-free run.
    #[arg(long)]
    pub image: PathBuf,
    /// Flat-field grid; the beam mask goes next to it as `<stem>.mask.grid`.
    #[arg(short, long)]
    pub out: PathBuf,
}

fn load_image(path: &Path) -> Result<CoincidenceImage, Failure> {
    let GridFile { values, basis, scale, origin } = read_grid(path)?;
    Ok(CoincidenceImage { counts: values, basis, scale, origin })
}

pub fn flatfield(cfg: &RunConfig, a: &FlatfieldArgs) -> Result<(), Failure> {
    let raw = load_image(&a.image)?;
    let ff = flat_field_smooth(&raw, &cfg.flatfield_params())?;
    write_grid(&a.out, &ff.values, ff.basis, ff.scale)?;
    write_grid(mask_path(&a.out), &ff.beam_mask.mapv(|m| if m { 1.0 } else { 0.0 }), ff.basis, ff.scale)?;
    println!("basis: {}", ff.basis);
    println!("raw_total: {}", raw.total());
    println!("beam_pixels: {}", ff.beam_pixels());
    Ok(())
}

fn load_flat(path: &Path, basis: Basis) -> Result<FlatField, Failure> {
    let g = read_grid(path)?;
    let m = read_grid(mask_path(path))?;
    if g.basis != basis || m.basis != basis {
        return Err(Failure::Data(format!("{}: expected a {basis} flat field", path.display())));
    }
    if g.values.dim() != m.values.dim() {
        return Err(Failure::Data(format!("{}: beam mask size differs", path.display())));
    }
    Ok(FlatField { values: g.values, basis, scale: g.scale, beam_mask: m.values.mapv(|v| v > 0.5) })
}

fn load_basis_image(path: &Path, basis: Basis) -> Result<CoincidenceImage, Failure> {
    let img = load_image(path)?;
    if img.basis != basis {
        return Err(Failure::Data(format!("{}: expected a {basis} image", path.display())));
    }
    Ok(img)
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[arg(long)]
    pub image_x: PathBuf,
    #[arg(long)]
    pub image_k: PathBuf,
    #[arg(long)]
    pub flat_x: PathBuf,
    #[arg(long)]
    pub flat_k: PathBuf,
    /// Start from the parameters of an earlier fit report.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Prefix of the report and the model and residual grids.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

fn read_report(path: &Path) -> Result<epghost_core::FitParams, Failure> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(parse_fit_report(&text)?)
}

pub fn fit(cfg: &RunConfig, a: &FitArgs) -> Result<(), Failure> {
    let ix = load_basis_image(&a.image_x, Basis::Position)?;
    let ik = load_basis_image(&a.image_k, Basis::Momentum)?;
    let fx = load_flat(&a.flat_x, Basis::Position)?;
    let fk = load_flat(&a.flat_k, Basis::Momentum)?;
    let mut fcfg = cfg.fit_config().map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(p) = &a.init {
        fcfg.init = Some(read_report(p)?);
    }
    let r = joint_fit(&ix, &ik, &fx, &fk, &fcfg)?;
    let report = r.report(&fcfg.optics);
    print!("{report}");
    if let Some(prefix) = &a.out {
        let path = with_suffix(prefix, ".fit.txt");
        std::fs::write(&path, &report).map_err(io_err(&path))?;
        write_grid(with_suffix(prefix, ".model_x.grid"), &r.model_x, Basis::Position, ix.scale)?;
        write_grid(with_suffix(prefix, ".model_k.grid"), &r.model_k, Basis::Momentum, ik.scale)?;
        write_grid(with_suffix(prefix, ".residual_x.grid"), &r.residual_x, Basis::Position, ix.scale)?;
        write_grid(with_suffix(prefix, ".residual_k.grid"), &r.residual_k, Basis::Momentum, ik.scale)?;
    }
    if !r.converged {
        return Err(Failure::NoConvergence(format!("{} fit stopped after {} evaluations", r.mode, r.n_evaluations)));
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct WitnessArgs {
    /// Fitted position width; with --dk-per-um, skips subsampling.
    #[arg(long, requires = "dk_per_um", conflicts_with_all = ["pairs_x", "fit_report"])]
    pub dx_um: Option<f64>,
    #[arg(long, requires = "dx_um")]
    pub dk_per_um: Option<f64>,
    /// Statistical errors for the direct mode.
    #[arg(long, default_value_t = 0.0)]
    pub stat_x_um: f64,
    #[arg(long, default_value_t = 0.0)]
    pub stat_k_per_um: f64,
    /// Coincidence pairs CSV of the position run.
    #[arg(long, requires_all = ["pairs_k", "flat_x", "flat_k", "fit_report"])]
    pub pairs_x: Option<PathBuf>,
    #[arg(long)]
    pub pairs_k: Option<PathBuf>,
    #[arg(long)]
    pub flat_x: Option<PathBuf>,
    #[arg(long)]
    pub flat_k: Option<PathBuf>,
    /// Report written by `fit`.
    #[arg(long)]
    pub fit_report: Option<PathBuf>,
    /// Per-batch fitted widths as CSV.
    #[arg(long)]
    pub batches_out: Option<PathBuf>,
}

fn read_pairs(path: &Path) -> Result<Vec<epghost_core::CoincidencePair>, Failure> {
    Ok(read_pairs_csv(File::open(path).map_err(io_err(path))?)?)
}

pub fn witness(cfg: &RunConfig, a: &WitnessArgs) -> Result<(), Failure> {
    if let (Some(dx), Some(dk)) = (a.dx_um, a.dk_per_um) {
        let v = combine_and_judge(dx, dk, &cfg.error_budget(a.stat_x_um, a.stat_k_per_um))?;
        print!("{}", v.report());
        return Ok(());
    }
    let (Some(px), Some(pk), Some(fx), Some(fk), Some(rep)) = (&a.pairs_x, &a.pairs_k, &a.flat_x, &a.flat_k, &a.fit_report) else {
        return Err(Failure::Config("witness needs --dx-um and --dk-per-um, or pairs, flat fields and a fit report".into()));
    };
    let pairs_x = read_pairs(px)?;
    let pairs_k = read_pairs(pk)?;
    let flat_x = load_flat(fx, Basis::Position)?;
    let flat_k = load_flat(fk, Basis::Momentum)?;
    let params = read_report(rep)?;
    let fcfg = cfg.fit_config().map_err(|e| Failure::Config(e.to_string()))?;
    let refit = PsfRefit::new(&flat_x, &flat_k, &fcfg, params);
    let sub = subsample_errors(&pairs_x, &pairs_k, &cfg.subsample(), |x, k| refit.fit(x, k))?;
    let v = combine_and_judge(params.psf_pos.sigma_u, params.psf_mom.sigma_u, &cfg.error_budget(sub.stat_x, sub.stat_k))?;
    println!("n_batches: {}", sub.sigma_x.len());
    println!("batch_size_pairs: {}", cfg.witness.batch_size_pairs);
    println!("stat_x_um: {:.6}", sub.stat_x);
    println!("stat_k_per_um: {:.6}", sub.stat_k);
    print!("{}", v.report());
    if let Some(path) = &a.batches_out {
        let mut w = csv::Writer::from_path(path).map_err(|e| Failure::Data(e.to_string()))?;
        w.write_record(["batch", "sigma_x_um", "sigma_k_per_um"]).map_err(|e| Failure::Data(e.to_string()))?;
        for (i, (x, k)) in sub.sigma_x.iter().zip(&sub.sigma_k).enumerate() {
            w.write_record([i.to_string(), x.to_string(), k.to_string()]).map_err(|e| Failure::Data(e.to_string()))?;
        }
        w.flush().map_err(io_err(path))?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum CalibMethod {
    /// Spacing of diffraction spots of known separation.
    Spots,
    /// Fourier peaks of a grating image of known period.
    Fft,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[arg(long, value_enum)]
    pub method: CalibMethod,
    /// Grid files of the calibration frames.
    #[arg(required = true)]
    pub frames: Vec<PathBuf>,
}

pub fn calibrate(cfg: &RunConfig, a: &CalibrateArgs) -> Result<(), Failure> {
    let c = &cfg.calibrate;
    let images: Vec<_> = a.frames.iter().map(|p| read_grid(p).map(|g| g.values)).collect::<Result<_, _>>()?;
    match a.method {
        CalibMethod::Spots => {
            let mut frames = Vec::new();
            for img in &images {
                let mut centres = Vec::new();
                for p in detect_spots(img, c.min_separation_px, c.threshold_counts) {
                    let win = Window::around(p.row, p.col, c.window_half_px, img.dim());
                    let s = fit_gaussian_2d(img, win, &initial_spot(img, win)?)?;
                    centres.push(s.center);
                }
                frames.push(centres);
            }
            let r = calibrate_frames(&frames, c.known_spacing_per_um)?;
            print!("{}", r.report("1/um/px"));
        }
        CalibMethod::Fft => {
            let results: Vec<CalibResult> = images.iter().map(|img| fft_calibrate(img, c.known_spacing_nm)).collect::<Result<_, _>>()?;
            if let [r] = results.as_slice() {
                print!("{}", r.report("nm/px"));
            } else {
                let scales: Vec<f64> = results.iter().map(|r| r.scale).collect();
                let mean = scales.iter().sum::<f64>() / scales.len() as f64;
                println!("scale: {mean:.6} nm/px");
                println!("sigma: {:.6} nm/px", sample_std(&scales));
                println!("n_measurements: {}", scales.len());
            }
        }
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct G2Args {
    #[arg(long)]
    pub electrons: PathBuf,
    #[arg(long)]
    pub photons: PathBuf,
    /// Histogram CSV.
    #[arg(short, long)]
    pub out: PathBuf,
}

pub fn g2(cfg: &RunConfig, a: &G2Args) -> Result<(), Failure> {
    let electrons = load_electrons(&a.electrons, false)?;
    let photons = apply_clock_sync(&load_photons(&a.photons, false)?, &cfg.clock_sync())?;
    let h = g2_histogram(&electrons, &photons, cfg.matching.g2_bin_ns, cfg.matching.g2_range_ns)?;
    write_g2_csv(BufWriter::new(File::create(&a.out).map_err(io_err(&a.out))?), &h)?;
    let centers = h.centers();
    println!("bins: {}", h.counts.len());
    println!("total: {}", h.counts.iter().sum::<u64>());
    println!("accidental_per_bin: {:.6}", h.normalization);
    if let Some(i) = h.peak_bin() {
        println!("peak_ns: {}", centers[i]);
        println!("peak_count: {}", h.counts[i]);
    }
    Ok(())
}
