use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use mmib::datasets::{World, WorldConfig};
use mmib::experiment::{random_scenarios, report, run_experiment, ExperimentSpec, Precision, RunOptions};
use mmib::Error;

/// Sweeps of contrastive encoders on synthetic factored worlds.
#[derive(Parser)]
#[command(name = "mmib", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run (or resume) the experiment described by a JSON spec file.
    Run {
        spec: PathBuf,
        /// Output directory; defaults to `<MMIB_OUT>/<spec name>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Root used when `--out` and the spec's `out_dir` are absent.
        #[arg(long, env = "MMIB_OUT", default_value = "runs")]
        out_root: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value = "64", value_parser = ["32", "64"])]
        precision: String,
        /// Overrides the spec's base seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Print random scenarios (withheld factor sets) for a world.
    Scenarios {
        #[arg(long, value_enum, default_value_t = WorldArg::Minisprites)]
        world: WorldArg,
        #[arg(long, default_value_t = 30)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Recompute aggregates and plots from a runs CSV.
    Report {
        csv: PathBuf,
        /// Directory for the outputs; defaults to the CSV's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum WorldArg {
    Codebook,
    Minisprites,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Run {
            spec,
            out,
            out_root,
            workers,
            precision,
            seed,
            quiet,
        } => {
            let mut spec = ExperimentSpec::load(&spec)?;
            if let Some(s) = seed {
                spec.base_seed = s;
            }
            let out_dir = out
                .or_else(|| spec.out_dir.clone())
                .unwrap_or_else(|| out_root.join(&spec.name));
            let opts = RunOptions {
                out_dir,
                workers,
                precision: Precision::from_bits(precision.parse().unwrap_or(64))?,
                verbose: !quiet,
            };
            let summary = run_experiment(&spec, &opts)?;
            println!(
                "{}: {} runs planned, {} already present, {} executed, {} failed",
                summary.csv.display(),
                summary.planned,
                summary.skipped,
                summary.executed,
                summary.failed
            );
            if let Some(rho) = summary.aggregates.spearman_urr_cka {
                println!("spearman(urr_mean, cka) = {rho:.4}");
            }
            Ok(if summary.failed > 0 { 2 } else { 0 })
        }
        Command::Scenarios { world, count, seed } => {
            let cfg = match world {
                WorldArg::Codebook => WorldConfig::default_codebook(seed),
                WorldArg::Minisprites => WorldConfig::minisprites(seed),
            };
            let world = Arc::new(World::build(&cfg)?);
            for s in random_scenarios(&world, count, seed)? {
                println!("{}", s.label());
            }
            Ok(0)
        }
        Command::Report { csv, out } => {
            let dir = out
                .or_else(|| csv.parent().map(|p| p.to_path_buf()))
                .unwrap_or_else(|| PathBuf::from("."));
            let agg = report(&csv, &dir, None)?;
            println!("scenario,{},runs,failed,median_urr_mean,median_cka", agg.axis.name());
            for c in &agg.cells {
                println!(
                    "{},{},{},{},{:.4},{:.4}",
                    c.scenario, c.value, c.runs, c.failed, c.medians[0], c.medians[1]
                );
            }
            if let Some(rho) = agg.spearman_urr_cka {
                println!("spearman(urr_mean, cka) = {rho:.4}");
            }
            Ok(0)
        }
    }
}
