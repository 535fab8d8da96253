use std::path::PathBuf;
use std::process::ExitCode;

use ambit_core::config::ExperimentConfig;
use ambit_core::runner::{run, RunError};
use clap::Parser;

/// Run an ambit-field experiment described by a TOML config.
#[derive(Debug, Parser)]
#[command(name = "ambit", version)]
struct Args {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides `seed` in the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    workers: Option<usize>,
    /// Run with an inadmissible thinning exponent as an observational probe.
    #[arg(long)]
    override_admissibility: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(&args) {
        Ok(out) => {
            for f in out {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(args: &Args) -> Result<Vec<PathBuf>, RunError> {
    let mut cfg = ExperimentConfig::load(&args.config).map_err(RunError::from)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.override_admissibility {
        cfg.override_admissibility = true;
    }
    if let Some(w) = args.workers {
        if w == 0 {
            return Err(RunError::Config(vec!["--workers must be >= 1".into()]));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| RunError::Config(vec![e.to_string()]))?;
    }
    Ok(run(&cfg, args.out.as_deref())?.files)
}
