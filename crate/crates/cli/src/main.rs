use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hwas::config::{Overrides, RunConfig};
use hwas::pipeline::{self, PipelineError, Stage};

/// Heat-wide association screening and case-crossover DLNM pipeline.
#[derive(Debug, Parser)]
#[command(name = "hwas", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration; flags below override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, default_value = "hwas_out")]
    out: PathBuf,

    /// Analysis variant preset (primary, sens_i, sens_ii, sens_iii, sens_iv).
    #[arg(long, global = true)]
    variant: Option<String>,

    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Seed for the synthetic generator.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse visits and report counts and drops.
    IngestCheck,
    /// Average grid cells into tracts and write temperature.csv.
    LinkTemperature,
    /// Stage-1 screening only.
    Screen,
    /// Screening then stage-2 fits for the selected variant.
    Stage2,
    /// Screening then subgroup refits.
    Stratified,
    /// Screening then every sensitivity variant and the comparison table.
    Sensitivity,
    /// Every stage.
    Pipeline,
    /// Write a synthetic corpus and a config that points at it.
    Synth,
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let overrides = Overrides {
        variant: cli.variant.clone(),
        workers: cli.workers,
        seed: cli.seed,
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let stage = match cli.command {
        Command::IngestCheck => {
            let report = pipeline::ingest_check(&cfg)?;
            println!("{report:#}");
            return Ok(());
        }
        Command::LinkTemperature => {
            let path = pipeline::link_temperature(&cfg, &cli.out)?;
            println!("{}", path.display());
            return Ok(());
        }
        Command::Synth => {
            let path = pipeline::synth_bundle(&cfg, &cli.out)?;
            println!("{}", path.display());
            return Ok(());
        }
        Command::Screen => Stage::Screen,
        Command::Stage2 => Stage::Stage2,
        Command::Stratified => Stage::Stratified,
        Command::Sensitivity => Stage::Sensitivity,
        Command::Pipeline => Stage::Pipeline,
    };
    let out = pipeline::run_pipeline(&cfg, &cli.out, stage)?;
    let m = &out.metadata;
    println!(
        "variant {}: {} codes screened, {} retained; outputs in {}",
        m.variant,
        m.screening_family_size,
        m.retained_codes.len(),
        cli.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
