use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dms::search::Split;
use dms_cli::{commands, report, CliError};

#[derive(Parser)]
#[command(name = "dms", version, about = "Differentiable model scaling: search, retrain, evaluate")]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a configured pipeline and write its run directory.
    Search {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `out_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a fresh model of an exported architecture, or pretrain the
    /// configured supernet when no architecture is given.
    Retrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        architecture: Option<PathBuf>,
    },
    /// Evaluate the model saved in a run directory.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Export the architecture and pruned weights of a supernet checkpoint.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit per-layer latency models to a measured latency table.
    FitLatency {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every gradient path.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        seeds: u64,
    },
    /// Compare searched and uniform-baseline results across run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Val,
    Test,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Search { config, out } => {
            let (dir, r) = commands::search(&config, out.as_deref())?;
            println!(
                "search done: {} exported {} (target {}), test {}",
                dir.display(),
                r.exported_resource,
                r.r_final,
                serde_json::to_string(&r.test).expect("metrics serialize")
            );
        }
        Command::Retrain {
            config,
            out,
            architecture,
        } => {
            let (dir, r) = commands::retrain(&config, out.as_deref(), architecture.as_deref())?;
            println!(
                "retrain done: {} test {}",
                dir.display(),
                serde_json::to_string(&r.test).expect("metrics serialize")
            );
        }
        Command::Eval { run, split } => {
            let split = match split {
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            match commands::eval(&run, split)? {
                Some(m) => println!("{}", serde_json::to_string(&m).expect("metrics serialize")),
                None => return Err(CliError::Invalid("the requested split is empty".into())),
            }
        }
        Command::Export { checkpoint, out } => {
            let desc = commands::export(&checkpoint, &out)?;
            for e in &desc.entries {
                println!("{:<24} {:>6} / {:<6}", e.name, e.k, e.n_max);
            }
        }
        Command::FitLatency { table, out } => {
            let model = commands::fit_latency(&table, &out)?;
            for (id, l) in &model.layers {
                println!(
                    "{id:<24} r2 {:.6} mse {:.3e} latency_max {:.6e} samples {}",
                    l.r_squared, l.mse, l.latency_max, l.samples
                );
            }
        }
        Command::Gradcheck { seeds } => {
            let r = commands::gradcheck(seeds)?;
            for c in &r.cases {
                println!(
                    "{:<36} {:.3e} (< {:.0e}) {}",
                    c.name,
                    c.max_error,
                    c.tolerance,
                    if c.passed() { "ok" } else { "FAIL" }
                );
            }
            println!(
                "max relative error over {} seeds: primitives {:.3e}, composites {:.3e}",
                r.seeds,
                r.max_error(false),
                r.max_error(true)
            );
            if !r.passed() {
                return Err(CliError::Invalid("gradient check failed".into()));
            }
        }
        Command::Report { runs, out } => {
            let table = report::render(&report::load(&runs)?);
            print!("{table}");
            if let Some(path) = out {
                std::fs::write(&path, &table).map_err(|source| CliError::Io { path, source })?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
