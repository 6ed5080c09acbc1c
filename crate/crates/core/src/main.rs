use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use modbench::harness::{
    aggregate_report, load_records, plot_data, run_one, run_sweep, verify, write_report, RunCoords, SweepConfig, VerifyOptions,
    RESULTS_FILE,
};
use modbench::rulegen::{Family, Mode};
use modbench::zoo::Level;
use modbench::Error;

#[derive(Parser)]
#[command(name = "modbench", version, about = "Benchmark of modular architectures with collapse and specialization metrics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep configuration (JSON). Uses the small built-in sweep when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parallel runs; overrides the config's jobs.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate a single run and print its record.
    Run {
        #[command(flatten)]
        sweep: SweepArgs,
        #[arg(long, default_value = "mlp")]
        family: Family,
        #[arg(long, default_value = "classification")]
        mode: Mode,
        #[arg(long, default_value = "modular")]
        level: Level,
        #[arg(long, default_value_t = 2)]
        rules: usize,
        /// Parameter budget; the config's first capacity when omitted.
        #[arg(long)]
        capacity: Option<usize>,
        #[arg(long, default_value_t = 0)]
        task: usize,
        #[arg(long, default_value_t = 0)]
        seed: usize,
    },
    /// Run every configured coordinate, appending to results.jsonl.
    Sweep {
        #[command(flatten)]
        sweep: SweepArgs,
        /// Continue an existing results file, skipping completed runs.
        #[arg(long)]
        resume: bool,
    },
    /// Aggregate results.jsonl into CSV tables and summary.txt under <out>/report.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the CSV series of one figure.
    Plot {
        #[arg(long)]
        out: PathBuf,
        /// perf_vs_R, metrics_vs_R, metrics_by_model or train_curve.
        #[arg(long)]
        figure: String,
        #[arg(long)]
        family: Option<Family>,
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Run the oracle checks; exits 1 if any fails.
    Verify,
}

fn load_config(args: &SweepArgs) -> Result<SweepConfig, Error> {
    let mut cfg = match &args.config {
        Some(p) => SweepConfig::load(p)?,
        None => SweepConfig::desk_default(),
    };
    if let Some(j) = args.jobs {
        cfg.jobs = j;
    }
    if let Some(o) = &args.out {
        cfg.output_dir = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn results(out: &Path) -> Result<Vec<modbench::harness::RunRecord>, Error> {
    let path = out.join(RESULTS_FILE);
    if !path.exists() {
        return Err(Error::Config(format!("{} does not exist", path.display())));
    }
    load_records(&path)
}

fn execute(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Run { sweep, family, mode, level, rules, capacity, task, seed } => {
            let cfg = load_config(&sweep)?;
            let capacity = capacity.unwrap_or(cfg.capacities[0]);
            let coords = RunCoords { family, mode, rules, capacity, task_index: task, level, seed_index: seed };
            let record = run_one(&cfg, coords);
            println!("{}", serde_json::to_string_pretty(&record)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { sweep, resume } => {
            let cfg = load_config(&sweep)?;
            let out = cfg.output_dir.clone().ok_or_else(|| Error::Config("no output directory: pass --out".into()))?;
            let outcome = run_sweep(&cfg, &out, cfg.jobs, resume)?;
            println!(
                "{} runs executed, {} reused, {} total in {}",
                outcome.executed,
                outcome.reused,
                outcome.records.len(),
                outcome.results_path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { out } => {
            let bundle = aggregate_report(&results(&out)?)?;
            let dir = out.join("report");
            write_report(&bundle, &dir)?;
            print!("{}", bundle.summary);
            println!("\ntables written to {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Plot { out, figure, family, mode } => {
            let records: Vec<_> = results(&out)?
                .into_iter()
                .filter(|r| family.is_none_or(|f| r.coords.family == f) && mode.is_none_or(|m| r.coords.mode == m))
                .collect();
            print!("{}", plot_data(&records, &figure)?.to_csv());
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify => {
            let checks = verify(&VerifyOptions::default());
            for c in &checks {
                println!("{}", c.line());
            }
            Ok(if checks.iter().all(|c| c.passed) { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
