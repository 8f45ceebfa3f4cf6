//! Command-line entry point: validate a run configuration or execute its
//! experiment plans and write the report directories.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use streamtemp::config::RunConfig;
use streamtemp::runner::{load_data, run};

#[derive(Debug, Parser)]
#[command(name = "streamtemp", version, about = "Stream temperature experiments at unmonitored sites")]
struct Args {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Plan or plan group to run (exp1, exp2, exp3 or a configured plan name); repeatable.
    #[arg(long = "plan")]
    plans: Vec<String>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured worker thread count.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parse the config and inputs, print the ingest report and exit.
    #[arg(long)]
    validate_only: bool,
}

fn execute(args: Args) -> anyhow::Result<bool> {
    let mut config = RunConfig::load(&args.config).with_context(|| format!("loading {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(threads) = args.threads {
        config.threads = threads;
    }
    if let Some(out) = args.out {
        config.output_dir = out;
    }
    config.validate()?;
    rayon::ThreadPoolBuilder::new().num_threads(config.threads).build_global()?;

    if args.validate_only {
        let (data, report) = load_data(&config)?;
        println!("{}", serde_json::to_string_pretty(&report)?);
        println!("{} sites loaded, {} test sites", data.sites.len(), data.test_sites().len());
        return Ok(true);
    }

    let out = if config.output_dir.is_absolute() {
        config.output_dir.clone()
    } else {
        std::env::current_dir()?.join(&config.output_dir)
    };
    let manifest = run(&config, &args.plans, &out)?;
    for p in &manifest.plans {
        match &p.error {
            Some(e) => println!("{}: {} ({e})", p.label, p.status),
            None => println!("{}: {}", p.label, p.status),
        }
    }
    println!("reports written to {}", out.display());
    Ok(manifest.failures() == 0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Args::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
