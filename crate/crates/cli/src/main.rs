use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use multipod_cli::commands::{self, Context};
use multipod_cli::{CliError, Format, Grid};

#[derive(Debug, Parser)]
#[command(name = "multipod", version, about = "Simulate and verify multipod data-parallel training")]
struct Cli {
    /// Scenario file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check distributed kernels against their reference implementations.
    Verify,
    /// Sweep chip counts and print the simulated step breakdown.
    Simulate,
    /// Print the weight-update sharding plan and table placement.
    Plan,
    /// Run the distributed evaluation metrics on synthetic data.
    Metrics,
    /// Compare shuffle policies over repeated runs.
    ShuffleSim,
    /// Merge `simulate` outputs into one scaling summary.
    Report {
        inputs: Vec<PathBuf>,
    },
}

fn run(cli: &Cli) -> Result<bool, CliError> {
    let ctx = Context {
        config: cli.config.clone(),
        seed: cli.seed,
        format: cli.format,
    };
    let (grids, ok) = match &cli.command {
        Command::Verify => commands::verify::run(&ctx)?,
        Command::Simulate => commands::simulate::run(&ctx)?,
        Command::Plan => commands::plan::run(&ctx)?,
        Command::Metrics => commands::metrics::run(&ctx)?,
        Command::ShuffleSim => commands::shuffle::run(&ctx)?,
        Command::Report { inputs } => commands::report::run(&ctx, inputs)?,
    };
    let mut out: Box<dyn Write> = match &cli.out {
        Some(path) => Box::new(BufWriter::new(File::create(path)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    write_all(&grids, cli.format, &mut out)?;
    out.flush()?;
    Ok(ok)
}

fn write_all(grids: &[Grid], format: Format, out: &mut dyn Write) -> io::Result<()> {
    for (i, g) in grids.iter().enumerate() {
        if i > 0 {
            writeln!(out)?;
        }
        g.write(format, &mut *out)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("multipod: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
