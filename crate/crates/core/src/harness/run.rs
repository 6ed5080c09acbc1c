use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::SweepConfig;
use crate::error::{Error, Result};
use crate::metrics::{adaptation, MetricReport};
use crate::rulegen::{sample_task, Family, Mode};
use crate::seed;
use crate::train::{eval_seed, evaluate, train, EvalCheckpoint, ModelActivations, TrainLog};
use crate::zoo::{Level, Model, ModelConfig};

pub const RESULTS_FILE: &str = "results.jsonl";

/// Position of one run in the sweep grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RunCoords {
    pub family: Family,
    pub mode: Mode,
    pub rules: usize,
    pub capacity: usize,
    pub task_index: usize,
    pub level: Level,
    pub seed_index: usize,
}

impl RunCoords {
    pub fn key(&self) -> String {
        format!(
            "{}/{}/R{}/cap{}/task{}/{}/seed{}",
            self.family, self.mode, self.rules, self.capacity, self.task_index, self.level, self.seed_index
        )
    }

    /// Shared by every level, capacity and seed trained on the same task.
    pub fn task_seed(&self, master_seed: u64) -> u64 {
        seed::derive(
            master_seed,
            &[seed::DOMAIN_TASK, self.family.code(), self.mode.code(), self.rules as u64, self.task_index as u64],
        )
    }

    pub fn run_seed(&self, master_seed: u64) -> u64 {
        seed::derive(
            master_seed,
            &[
                seed::DOMAIN_RUN,
                self.family.code(),
                self.mode.code(),
                self.rules as u64,
                self.capacity as u64,
                self.task_index as u64,
                self.level.code(),
                self.seed_index as u64,
            ],
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Diverged,
    Skipped,
}

/// One line of `results.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    #[serde(flatten)]
    pub coords: RunCoords,
    pub task_seed: u64,
    pub run_seed: u64,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub width: usize,
    pub param_count: usize,
    pub iterations: usize,
    /// Final performance per shift name (error rate or mean absolute error).
    pub performance: BTreeMap<String, f64>,
    pub final_train_loss: Option<f64>,
    /// Absent for Monolithic runs and failed runs.
    pub metrics: Option<MetricReport>,
    pub curve: Vec<EvalCheckpoint>,
    pub wall_clock_s: f64,
}

impl RunRecord {
    /// In-distribution performance, when the run produced one.
    pub fn id_performance(&self) -> Option<f64> {
        self.performance.get("id").copied()
    }

    fn skipped(coords: RunCoords, master_seed: u64, error: String) -> Self {
        RunRecord {
            coords,
            task_seed: coords.task_seed(master_seed),
            run_seed: coords.run_seed(master_seed),
            status: RunStatus::Skipped,
            error: Some(error),
            width: 0,
            param_count: 0,
            iterations: 0,
            performance: BTreeMap::new(),
            final_train_loss: None,
            metrics: None,
            curve: Vec::new(),
            wall_clock_s: 0.0,
        }
    }
}

/// Every run of the sweep, in a fixed order.
pub fn enumerate_runs(config: &SweepConfig) -> Vec<RunCoords> {
    let mut out = Vec::new();
    for &family in &config.families {
        for &mode in &config.modes {
            for &rules in &config.rule_counts {
                for &capacity in &config.capacities {
                    for task_index in 0..config.tasks_per_setting {
                        for &level in &config.levels {
                            for seed_index in 0..config.seeds_per_task {
                                out.push(RunCoords { family, mode, rules, capacity, task_index, level, seed_index });
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Trains and evaluates one run. Failures become `skipped` records.
pub fn run_one(config: &SweepConfig, coords: RunCoords) -> RunRecord {
    match execute_run(config, coords) {
        Ok((r, _)) => r,
        Err(e) => {
            log::warn!("run {} failed: {e}", coords.key());
            RunRecord::skipped(coords, config.master_seed, e.to_string())
        }
    }
}

/// Like [`run_one`], but returns the full training log and propagates errors.
pub fn execute_run(config: &SweepConfig, coords: RunCoords) -> Result<(RunRecord, TrainLog)> {
    let start = Instant::now();
    let task_seed = coords.task_seed(config.master_seed);
    let run_seed = coords.run_seed(config.master_seed);
    let task = sample_task(coords.family, coords.rules, task_seed, &config.task_options)?;
    let mut model_cfg = ModelConfig::for_task(coords.level, &task, coords.capacity);
    model_cfg.arch = config.architecture(coords.family);
    let mut model = Model::build(&model_cfg, run_seed)?;
    let train_cfg = config.train_config(coords.family, coords.mode);
    let log = train(&mut model, &task, &train_cfg)?;

    let (status, error) = match &log.diverged {
        Some(d) => (RunStatus::Diverged, Some(format!("diverged at iteration {}: {}", d.iteration, d.detail))),
        None => (RunStatus::Ok, None),
    };
    let metrics = if status == RunStatus::Ok && coords.level.is_modular() {
        let (_, stats) = evaluate(
            &model,
            &task,
            coords.mode,
            train_cfg.shifts[0],
            train_cfg.eval_samples,
            eval_seed(task.seed, train_cfg.shifts[0]),
        )?;
        let mut report = MetricReport::from_stats(&stats)?;
        if let Some(a) = &config.adaptation {
            let mut source = ModelActivations::new(&model, &task, coords.mode)?;
            report.adaptation = Some(adaptation(&mut source, a, run_seed)?);
        }
        Some(report)
    } else {
        None
    };
    let last = log.final_checkpoint();
    let record = RunRecord {
        coords,
        task_seed,
        run_seed,
        status,
        error,
        width: model.width,
        param_count: model.param_count(),
        iterations: log.losses.len(),
        performance: if status == RunStatus::Ok { last.map(|c| c.evals.clone()).unwrap_or_default() } else { BTreeMap::new() },
        final_train_loss: last.map(|c| c.train_loss),
        metrics,
        curve: log.checkpoints.clone(),
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    Ok((record, log))
}

/// Reads every record of a results file.
pub fn load_records(path: &Path) -> Result<Vec<RunRecord>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RunRecord = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub results_path: PathBuf,
    /// All records of the sweep, existing and new, ordered by coordinates.
    pub records: Vec<RunRecord>,
    pub executed: usize,
    pub reused: usize,
}

/// Runs every pending coordinate of `config`, appending each record to
/// `out_dir/results.jsonl` as it completes.
///
/// An existing results file is only reused with `resume`; its completed
/// coordinates are skipped.
pub fn run_sweep(config: &SweepConfig, out_dir: &Path, jobs: usize, resume: bool) -> Result<SweepOutcome> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let results_path = out_dir.join(RESULTS_FILE);
    let existing = if results_path.exists() {
        if !resume {
            return Err(Error::Config(format!("{} already exists; pass --resume to continue it", results_path.display())));
        }
        load_records(&results_path)?
    } else {
        Vec::new()
    };
    let done: BTreeSet<RunCoords> = existing.iter().map(|r| r.coords).collect();
    let pending: Vec<RunCoords> = enumerate_runs(config).into_iter().filter(|c| !done.contains(c)).collect();
    log::info!("{} runs pending, {} already complete", pending.len(), done.len());

    let mut writer = OpenOptions::new().create(true).append(true).open(&results_path)?;
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<RunRecord>();
    let mut fresh = Vec::with_capacity(pending.len());
    std::thread::scope(|scope| -> Result<()> {
        for _ in 0..jobs.max(1).min(pending.len().max(1)) {
            let tx = tx.clone();
            let (next, pending) = (&next, &pending);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&coords) = pending.get(i) else { break };
                if tx.send(run_one(config, coords)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        // The only writer of the results file.
        for rec in rx {
            writeln!(writer, "{}", serde_json::to_string(&rec)?)?;
            writer.flush()?;
            log::info!("finished {} ({:?})", rec.coords.key(), rec.status);
            fresh.push(rec);
        }
        Ok(())
    })?;

    let executed = fresh.len();
    let reused = existing.len();
    let mut records = existing;
    records.extend(fresh);
    records.sort_by_key(|r| r.coords);
    Ok(SweepOutcome { results_path, records, executed, reused })
}

/// Re-executes a record's coordinates under `config`.
pub fn rerun(config: &SweepConfig, record: &RunRecord) -> RunRecord {
    run_one(config, record.coords)
}
