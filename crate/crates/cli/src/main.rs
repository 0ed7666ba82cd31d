use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lavreg::experiment::{list_experiments, run_experiment, ExperimentConfig};

#[derive(Parser)]
#[command(name = "lavreg", version, about = "Lavrentiev regularization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        config: PathBuf,
        /// Worker threads for grid evaluations.
        #[arg(long)]
        jobs: Option<usize>,
        /// Output directory; overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the registered experiments.
    List,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::List => {
            print!("{}", list_experiments());
            ExitCode::SUCCESS
        }
        Command::Run { config, jobs, out } => ExitCode::from(run(config, jobs, out)),
    }
}

fn run(config: PathBuf, jobs: Option<usize>, out: Option<PathBuf>) -> u8 {
    let mut cfg = match ExperimentConfig::from_path(&config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    if let Ok(seed) = std::env::var("LAVREG_SEED") {
        match seed.trim().parse::<u64>() {
            Ok(s) => cfg = cfg.with_seed(s),
            Err(_) => {
                eprintln!("error: LAVREG_SEED must be an unsigned integer, got {seed:?}");
                return 1;
            }
        }
    }
    if let Some(dir) = out {
        cfg.output_dir = dir;
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        if n == 0 {
            eprintln!("error: --jobs must be at least 1");
            return 1;
        }
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let report = match pool.install(|| run_experiment(&cfg)) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    if let Err(e) = report.write(&cfg.output_dir) {
        eprintln!("error: {e}");
        return 1;
    }
    println!("{}", report.summary_line());
    if let Some(err) = &report.error {
        eprintln!("{}", err.message);
    }
    report.exit_code() as u8
}
