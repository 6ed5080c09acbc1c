use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::AdaptationConfig;
use crate::rulegen::{Family, Mode, Shift, TaskOptions};
use crate::train::TrainConfig;
use crate::zoo::{Architecture, Level};

/// Optional replacements for the per-family training defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub iterations: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub eval_every: Option<usize>,
    pub eval_samples: Option<usize>,
}

fn default_rule_counts() -> Vec<usize> {
    vec![2, 4, 8, 16, 32]
}

fn five() -> usize {
    5
}

fn one() -> usize {
    1
}

/// A full sweep, read from a single JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub master_seed: u64,
    pub families: Vec<Family>,
    pub modes: Vec<Mode>,
    pub levels: Vec<Level>,
    #[serde(default = "default_rule_counts")]
    pub rule_counts: Vec<usize>,
    /// Parameter budgets.
    pub capacities: Vec<usize>,
    #[serde(default = "five")]
    pub tasks_per_setting: usize,
    #[serde(default = "five")]
    pub seeds_per_task: usize,
    #[serde(default)]
    pub train: TrainOverrides,
    /// Evaluation shifts; each family's standard set when absent.
    #[serde(default)]
    pub shifts: Option<Vec<Shift>>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "one")]
    pub jobs: usize,
    #[serde(default)]
    pub task_options: TaskOptions,
    /// Layer sizes per family; the zoo defaults when absent.
    #[serde(default)]
    pub architectures: BTreeMap<Family, Architecture>,
    /// Adaptation metric settings; skipped when absent.
    #[serde(default)]
    pub adaptation: Option<AdaptationConfig>,
}

impl SweepConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SweepConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// The small default sweep: MLP, R in {2, 8}, one capacity, 3 tasks x 3 seeds.
    pub fn desk_default() -> Self {
        SweepConfig {
            master_seed: 0,
            families: vec![Family::Mlp],
            modes: vec![Mode::Classification],
            levels: vec![Level::GtModular, Level::ModularOp, Level::Modular, Level::Monolithic, Level::RandomGate],
            rule_counts: vec![2, 8],
            capacities: vec![8000],
            tasks_per_setting: 3,
            seeds_per_task: 3,
            train: TrainOverrides::default(),
            shifts: None,
            output_dir: None,
            jobs: 1,
            task_options: TaskOptions::default(),
            architectures: BTreeMap::new(),
            adaptation: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.families.is_empty() || self.modes.is_empty() || self.levels.is_empty() {
            return bad("families, modes and levels must be nonempty");
        }
        if self.rule_counts.is_empty() || self.capacities.is_empty() {
            return bad("rule_counts and capacities must be nonempty");
        }
        if self.rule_counts.iter().any(|&r| r < 2) {
            return bad("every rule count must be at least 2");
        }
        if self.tasks_per_setting == 0 || self.seeds_per_task == 0 || self.jobs == 0 {
            return bad("tasks_per_setting, seeds_per_task and jobs must be positive");
        }
        if let Some(s) = &self.shifts {
            if s.is_empty() {
                return bad("shift list must be nonempty when given");
            }
            for shift in s {
                shift.validate(Family::Mha).map_err(|e| Error::Config(e.to_string()))?;
            }
        }
        for &family in &self.families {
            for &mode in &self.modes {
                self.train_config(family, mode).validate(family)?;
            }
        }
        Ok(())
    }

    pub fn train_config(&self, family: Family, mode: Mode) -> TrainConfig {
        let mut c = TrainConfig::for_family(family, mode);
        let o = &self.train;
        c.iterations = o.iterations.unwrap_or(c.iterations);
        c.batch_size = o.batch_size.unwrap_or(c.batch_size);
        c.learning_rate = o.learning_rate.unwrap_or(c.learning_rate);
        c.eval_every = o.eval_every.unwrap_or(c.eval_every);
        c.eval_samples = o.eval_samples.unwrap_or(c.eval_samples);
        if let Some(shifts) = &self.shifts {
            // Length shifts only apply to sequence families; `id` always comes first.
            c.shifts = std::iter::once(Shift::InDistribution)
                .chain(shifts.iter().copied().filter(|&s| s != Shift::InDistribution && s.validate(family).is_ok()))
                .collect();
        }
        c
    }

    pub fn architecture(&self, family: Family) -> Architecture {
        self.architectures.get(&family).copied().unwrap_or_else(|| Architecture::for_family(family))
    }
}
