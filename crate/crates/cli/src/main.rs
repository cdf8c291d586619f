use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ksd_cli::{execute, write_outcome, RunConfig};

#[derive(Parser)]
#[command(
    name = "ksd",
    version,
    about = "Stationary Boltzmann verification suites and solves"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Size of the worker pool.
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        verbose: bool,
    },
    /// Print the JSON schema of the config file.
    Schema,
}

const EXIT_FAIL: u8 = 1;
const EXIT_CONFIG: u8 = 2;

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Schema => {
            let text =
                serde_json::to_string_pretty(&RunConfig::schema()).expect("schema serializes");
            // A closed pipe (e.g. `| head`) is not an error.
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Command::Run {
            config,
            output_dir,
            threads,
            verbose,
        } => run(&config, output_dir, threads, verbose),
    }
}

fn run(
    path: &PathBuf,
    output_dir: Option<PathBuf>,
    threads: Option<usize>,
    verbose: bool,
) -> ExitCode {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read {}: {e}", path.display());
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let (cfg, res) = match RunConfig::parse(&text).and_then(|c| c.resolve().map(|r| (c, r))) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("{}: {e}", path.display());
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("cannot size the worker pool: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    let dir = output_dir
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("ksd_output"));
    let outcome = execute(&cfg, &res, verbose);
    match write_outcome(&outcome, &dir) {
        Ok(p) if verbose => eprintln!("wrote {}", p.display()),
        Ok(_) => {}
        Err(e) => {
            eprintln!("{e:#}");
            return ExitCode::from(EXIT_FAIL);
        }
    }
    for w in &outcome.report.warnings {
        eprintln!("warning: {w}");
    }
    let failures = outcome.report.failures();
    if failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        eprintln!("{} failing checks:", failures.len());
        for (suite, c) in failures {
            eprintln!(
                "  {suite}/{}: lhs {:e} rhs {:e} ({})",
                c.name, c.lhs, c.rhs, c.anchor
            );
        }
        ExitCode::from(EXIT_FAIL)
    }
}
