use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use kmsuq::scenario::Scenario;
use kmsuq::{execute, Invocation, EXIT_CONFIG};

/// Multi-species Boltzmann UQ experiments.
#[derive(Debug, Parser)]
#[command(name = "kmsuq", version)]
struct Cli {
    /// relax, spectrum, gap-sg, sensitivity, decompose, picard, assumptions, converge-gpc or oracle
    scenario: Scenario,
    /// TOML run configuration
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `[output] dir`
    #[arg(long)]
    out: Option<PathBuf>,
    /// Treat every failed check as an error
    #[arg(long)]
    strict: bool,
    /// Worker threads
    #[arg(long, env = "KMSUQ_THREADS")]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("--threads must be at least 1");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("thread pool configured once");
    }
    let inv = Invocation {
        scenario: cli.scenario,
        config: cli.config,
        out: cli.out,
        strict: cli.strict,
    };
    match execute(&inv) {
        Ok(done) => {
            for c in &done.checks {
                let status = if c.pass { "ok  " } else { "FAIL" };
                println!("{status} {}: {}", c.name, c.detail);
            }
            println!("artifacts in {}", done.out_dir.display());
            ExitCode::from(done.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
