use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nested_risk::experiments::{build_problem, run_experiment, ExperimentConfig, RunStatus};
use nested_risk::loss_estimators::{InnerConfig, InnerSampler};
use nested_risk::mlmc::nested_brute_force;
use nested_risk::portfolio::{read_manifest, write_manifest};
use nested_risk::RiskError;

#[derive(Parser)]
#[command(name = "nested-risk", version, about = "Multilevel estimation of portfolio loss exceedance probabilities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep the configured variants over the tolerance grid.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `experiment.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; defaults to the number of cores.
        #[arg(long)]
        jobs: Option<usize>,
        /// Main CSV path; overrides `experiment.output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the configured market and portfolio to a manifest.
    GenPortfolio {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plain nested Monte Carlo estimate for a manifest.
    Oracle {
        #[arg(long)]
        portfolio: PathBuf,
        #[arg(long)]
        outer: u64,
        #[arg(long)]
        inner: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        jobs: Option<usize>,
    },
}

enum Failure {
    Config(String),
    Unreachable,
    Io(String),
}

impl From<RiskError> for Failure {
    fn from(e: RiskError) -> Self {
        match e {
            RiskError::Io { .. } => Failure::Io(e.to_string()),
            other => Failure::Config(other.to_string()),
        }
    }
}

fn with_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, Failure> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        if j == 0 {
            return Err(Failure::Config("--jobs must be positive".into()));
        }
        builder = builder.num_threads(j);
    }
    let pool = builder.build().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(pool.install(f))
}

fn run(config: &Path, seed: Option<u64>, jobs: Option<usize>, out: Option<PathBuf>) -> Result<(), Failure> {
    let mut cfg = ExperimentConfig::from_path(config)?;
    if let Some(s) = seed {
        cfg.experiment.seed = s;
    }
    let out = out
        .or_else(|| cfg.experiment.output.as_ref().map(|p| cfg.base_dir.join(p)))
        .unwrap_or_else(|| PathBuf::from("runs.csv"));
    let records = with_pool(jobs, || run_experiment(&cfg, Some(&out)))??;
    for r in &records {
        match &r.result {
            Some(res) => println!(
                "{:<15} tol {:<6} eta {:.6} work {} levels {}..{}",
                r.variant.as_str(),
                r.tol,
                res.estimate,
                res.total_work,
                res.start_level,
                res.max_level
            ),
            None => println!("{:<15} tol {:<6} unreachable", r.variant.as_str(), r.tol),
        }
    }
    if records.iter().all(|r| r.status == RunStatus::Unreachable) {
        return Err(Failure::Unreachable);
    }
    Ok(())
}

fn gen_portfolio(config: &Path, out: &Path) -> Result<(), Failure> {
    let cfg = ExperimentConfig::from_path(config)?;
    let (model, portfolio) = build_problem(&cfg)?;
    let file = File::create(out).map_err(|e| RiskError::io(out, e))?;
    let mut w = BufWriter::new(file);
    write_manifest(&mut w, &portfolio, &model)
        .and_then(|_| w.flush())
        .map_err(|e| RiskError::io(out, e))?;
    println!("wrote {} options, threshold {}", portfolio.len(), portfolio.threshold());
    Ok(())
}

fn oracle(manifest: &Path, outer: u64, inner: u64, seed: u64, jobs: Option<usize>) -> Result<(), Failure> {
    let file = File::open(manifest).map_err(|e| RiskError::io(manifest, e))?;
    let (portfolio, model) = read_manifest(BufReader::new(file))?;
    // plain nested simulation: every inner draw covers the whole book
    let full_sum = InnerConfig {
        subsampling: false,
        ..InnerConfig::default()
    };
    let sampler = InnerSampler::new(&portfolio, &model, full_sum)?;
    let (p, se) = with_pool(jobs, || nested_brute_force(&sampler, &model, outer, inner, seed))??;
    println!("estimate {p:.6} std_error {se:.6}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { config, seed, jobs, out } => run(&config, seed, jobs, out),
        Command::GenPortfolio { config, out } => gen_portfolio(&config, &out),
        Command::Oracle {
            portfolio,
            outer,
            inner,
            seed,
            jobs,
        } => oracle(&portfolio, outer, inner, seed, jobs),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Unreachable) => {
            eprintln!("error: no tolerance in the grid was reachable");
            ExitCode::from(2)
        }
        Err(Failure::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
