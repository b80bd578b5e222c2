// `!(x > 0.0)` style guards reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Failure;
use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "epghost", version, about = "Electron-photon coincidence ghost imaging and entanglement witness")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; defaults apply to absent keys.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stage; overrides sim.seed and witness.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one electron and photon event stream with ground truth.
    #[command(after_help = config::keys_help())]
    Simulate(commands::SimulateArgs),
    /// Match coincidences and build the ghost image of one basis.
    #[command(name = "match", after_help = config::keys_help())]
    Match(commands::MatchArgs),
    /// Smooth a mask-free coincidence image into a flat field.
    #[command(after_help = config::keys_help())]
    Flatfield(commands::FlatfieldArgs),
    /// Joint PSF fit of the position and momentum ghost images.
    #[command(after_help = config::keys_help())]
    Fit(commands::FitArgs),
    /// Subsampling errors and the entanglement verdict.
    #[command(after_help = config::keys_help())]
    Witness(commands::WitnessArgs),
    /// Pixel-scale calibration from spot frames or a grating image.
    #[command(after_help = config::keys_help())]
    Calibrate(commands::CalibrateArgs),
    /// Photon-electron arrival-time correlation histogram.
    #[command(after_help = config::keys_help())]
    G2(commands::G2Args),
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.common.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Failure::Config(format!("--jobs: {e}")))?;
    }
    let mut cfg = RunConfig::load(cli.common.config.as_deref()).map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(seed) = cli.common.seed {
        cfg.set_seed(seed);
    }
    match cli.command {
        Command::Simulate(a) => commands::simulate(&cfg, &a),
        Command::Match(a) => commands::match_cmd(&cfg, &a),
        Command::Flatfield(a) => commands::flatfield(&cfg, &a),
        Command::Fit(a) => commands::fit(&cfg, &a),
        Command::Witness(a) => commands::witness(&cfg, &a),
        Command::Calibrate(a) => commands::calibrate(&cfg, &a),
        Command::G2(a) => commands::g2(&cfg, &a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
