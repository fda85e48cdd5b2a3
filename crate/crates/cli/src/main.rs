use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hyperkl::config::ExperimentConfig;
use hyperkl::pipeline::{self, Study};
use hyperkl::Error;

#[derive(Debug, Parser)]
#[command(
    name = "hyperkl",
    version,
    about = "Field inference under uncertain covariance hyper-parameters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML configuration; its keys override the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Named base configuration (desk-sin, paper-step-fixed, ...).
    #[arg(long, global = true)]
    preset: Option<String>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Master seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for Monte-Carlo and training solves.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the polynomial chaos surrogate and write surrogate.json.
    BuildSurrogate,
    /// Generate synthetic observations and write data.csv.
    GenerateData,
    /// Sample the posterior using data.csv and surrogate.json from --out.
    Infer,
    /// Run an error study and write its table.
    ErrorStudy {
        /// eps_M_vs_K, eps_M_vs_l, eps_U_vs_o, eps_U_vs_K or stretching_vs_l.
        study: String,
    },
    /// Print the resolved configuration.
    ShowConfig,
    /// List the named presets.
    Presets,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::InvalidHyperParameter(_)
        | Error::Dimension { .. }
        | Error::Capacity(_)
        | Error::InverseCrime(_) => 2,
        Error::StaleSurrogate { .. } => 4,
        Error::Io(_) | Error::Json(_) | Error::Csv(_) => 1,
        _ => 3,
    }
}

fn run(cli: Cli) -> hyperkl::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    if let Command::Presets = cli.command {
        for p in hyperkl::config::PRESETS {
            println!("{p}");
        }
        return Ok(());
    }
    let preset = match (&cli.preset, &cli.config) {
        (None, None) => Some("desk-sin"),
        (p, _) => p.as_deref(),
    };
    let mut cfg = ExperimentConfig::load(preset, cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = &cli.out;
    match cli.command {
        Command::BuildSurrogate => {
            let r = pipeline::cmd_build_surrogate(&cfg, out)?;
            println!(
                "{} ({}) held-out relative error {:.3e}, worst draw {:.3e}",
                r.path.display(),
                if r.reused { "up to date" } else { "built" },
                r.held_out_error,
                r.held_out_max
            );
        }
        Command::GenerateData => {
            let path = pipeline::cmd_generate_data(&cfg, out)?;
            println!("{}", path.display());
        }
        Command::Infer => {
            let o = pipeline::cmd_infer(&cfg, out)?;
            let d = &o.diagnostics;
            println!(
                "acceptance {:.3}, informed coordinates {}/{}, median distance {:.4}",
                d.acceptance_rate,
                d.informed_coordinates,
                o.k,
                o.median_distance()
            );
        }
        Command::ErrorStudy { study } => {
            let study: Study = study.parse()?;
            let path = pipeline::cmd_error_study(&cfg, study, out)?;
            println!("{}", path.display());
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
        Command::Presets => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
