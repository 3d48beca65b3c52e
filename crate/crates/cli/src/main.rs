use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mirror_stein::harness::{self, CellOutcome, IDENTITY_DRAWS};
use mirror_stein::Error;

#[derive(Parser)]
#[command(name = "mstein", version, about = "Mirrored Stein samplers: benchmarks and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (sampler, rate, seed) cell of an experiment spec.
    Run {
        spec: PathBuf,
        /// Run cells concurrently regardless of the spec setting.
        #[arg(long)]
        concurrent: bool,
    },
    /// Monte-Carlo Stein identity suite on Dirichlet targets.
    IdentityCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = IDENTITY_DRAWS)]
        draws: usize,
    },
    /// Finite-difference suites for maps, kernels, targets and eigenfunctions.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print build information.
    Version,
}

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

fn error_code(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    if e.is_validation() {
        ExitCode::from(EXIT_VALIDATION)
    } else {
        ExitCode::from(EXIT_RUNTIME)
    }
}

fn run(spec: PathBuf, concurrent: bool) -> ExitCode {
    let mut spec = match harness::load_spec(&spec) {
        Ok(s) => s,
        Err(e @ Error::Io { .. }) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_VALIDATION);
        }
        Err(e) => return error_code(&e),
    };
    spec.concurrent |= concurrent;
    let report = match harness::run_experiment(&spec) {
        Ok(r) => r,
        Err(e) => return error_code(&e),
    };
    for c in &report.cells {
        match &c.outcome {
            CellOutcome::Finished { .. } => {
                let file = c
                    .trace_file
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default();
                println!("ok     {} rate={} seed={} -> {file}", c.label, c.rate, c.seed);
            }
            CellOutcome::Failed(msg) => {
                println!("failed {} rate={} seed={}: {msg}", c.label, c.rate, c.seed)
            }
        }
    }
    for b in harness::best_rates(&report) {
        let score = match (b.mean_energy_distance, b.mean_test_log_predictive) {
            (Some(e), _) => format!("energy distance {e:.6e}"),
            (None, Some(t)) => format!("test log predictive {t:.6e}"),
            (None, None) => String::new(),
        };
        println!("best   {} rate={} {score}", b.label, b.rate);
    }
    println!("summary: {}", report.summary_file.display());
    let failed = report.failed_samplers();
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        eprintln!("error: every cell failed for {}", failed.join(", "));
        ExitCode::from(EXIT_RUNTIME)
    }
}

fn report(result: mirror_stein::Result<harness::CheckReport>) -> ExitCode {
    match result {
        Ok(r) => {
            println!("{r}");
            if r.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_RUNTIME)
            }
        }
        Err(e) => error_code(&e),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match cli.command {
        Command::Run { spec, concurrent } => run(spec, concurrent),
        Command::IdentityCheck { seed, draws } => {
            if draws < 2 {
                eprintln!("error: --draws must be at least 2");
                return ExitCode::from(EXIT_VALIDATION);
            }
            report(harness::identity_check(seed, draws))
        }
        Command::GradCheck { seed } => report(harness::grad_check(seed)),
        Command::Version => {
            println!("mstein {}", env!("CARGO_PKG_VERSION"));
            println!("mirror-stein {}", mirror_stein::VERSION);
            ExitCode::SUCCESS
        }
    }
}
