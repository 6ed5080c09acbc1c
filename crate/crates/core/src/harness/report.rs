use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{RunRecord, RunStatus};
use crate::error::{Error, Result};
use crate::metrics::{ranking_votes, VoteGroup, VoteTable};
use crate::rulegen::{Family, Mode};
use crate::zoo::Level;

/// A CSV table with a header row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Table { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Drops the named columns.
    fn without(&self, names: &[&str]) -> Table {
        let keep: Vec<usize> = (0..self.header.len()).filter(|&i| !names.contains(&self.header[i].as_str())).collect();
        Table {
            header: keep.iter().map(|&i| self.header[i].clone()).collect(),
            rows: self.rows.iter().map(|r| keep.iter().map(|&i| r[i].clone()).collect()).collect(),
        }
    }
}

/// Mean and sample standard deviation (`n - 1`; zero for a single value).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
    Some(Summary { mean, std, n })
}

fn stat_cells(values: &[f64]) -> [String; 3] {
    match summarize(values) {
        Some(s) => [s.mean.to_string(), s.std.to_string(), s.n.to_string()],
        None => [String::new(), String::new(), "0".into()],
    }
}

fn ok(records: &[RunRecord]) -> impl Iterator<Item = &RunRecord> {
    records.iter().filter(|r| r.status == RunStatus::Ok)
}

type Setting = (Family, Mode);

fn setting(r: &RunRecord) -> Setting {
    (r.coords.family, r.coords.mode)
}

fn perf_vs_r(records: &[RunRecord]) -> Table {
    let mut t = Table::new(&["family", "mode", "R", "level", "shift", "mean", "std", "n"]);
    let mut cells: BTreeMap<(Setting, usize, Level), BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    let mut shifts: BTreeMap<Setting, BTreeSet<String>> = BTreeMap::new();
    for r in records {
        cells.entry((setting(r), r.coords.rules, r.coords.level)).or_default();
    }
    for r in ok(records) {
        let cell = cells.get_mut(&(setting(r), r.coords.rules, r.coords.level)).expect("cell exists");
        for (shift, &v) in &r.performance {
            cell.entry(shift.clone()).or_default().push(v);
            shifts.entry(setting(r)).or_default().insert(shift.clone());
        }
    }
    for ((s, rules, level), by_shift) in &cells {
        for shift in shifts.get(s).into_iter().flatten() {
            let vals = by_shift.get(shift).map(Vec::as_slice).unwrap_or(&[]);
            let [mean, std, n] = stat_cells(vals);
            t.rows.push(vec![s.0.to_string(), s.1.to_string(), rules.to_string(), level.to_string(), shift.clone(), mean, std, n]);
        }
    }
    t
}

fn metric_values(records: &[RunRecord]) -> impl Iterator<Item = (&RunRecord, &'static str, f64)> {
    ok(records).flat_map(|r| r.metrics.iter().flat_map(move |m| m.entries().into_iter().map(move |(k, v)| (r, k, v))))
}

fn metrics_vs_r(records: &[RunRecord]) -> Table {
    let mut t = Table::new(&["family", "mode", "R", "level", "metric", "mean", "std", "n"]);
    let mut groups: BTreeMap<(Setting, usize, Level, &str), Vec<f64>> = BTreeMap::new();
    for (r, k, v) in metric_values(records) {
        groups.entry((setting(r), r.coords.rules, r.coords.level, k)).or_default().push(v);
    }
    for ((s, rules, level, metric), vals) in &groups {
        let [mean, std, n] = stat_cells(vals);
        t.rows.push(vec![s.0.to_string(), s.1.to_string(), rules.to_string(), level.to_string(), metric.to_string(), mean, std, n]);
    }
    t
}

fn metrics_by_model(records: &[RunRecord]) -> Table {
    let mut t = Table::new(&["family", "mode", "level", "metric", "mean", "std", "n"]);
    let mut groups: BTreeMap<(Setting, Level, &str), Vec<f64>> = BTreeMap::new();
    for (r, k, v) in metric_values(records) {
        groups.entry((setting(r), r.coords.level, k)).or_default().push(v);
    }
    for ((s, level, metric), vals) in &groups {
        let [mean, std, n] = stat_cells(vals);
        t.rows.push(vec![s.0.to_string(), s.1.to_string(), level.to_string(), metric.to_string(), mean, std, n]);
    }
    t
}

fn curves(records: &[RunRecord]) -> Table {
    let mut t = Table::new(&["family", "mode", "level", "iter", "series", "mean", "std", "n"]);
    let mut groups: BTreeMap<(Setting, Level, usize, String), Vec<f64>> = BTreeMap::new();
    for r in ok(records) {
        for c in &r.curve {
            let key = |series: String| (setting(r), r.coords.level, c.iter, series);
            groups.entry(key("train_loss".into())).or_default().push(c.train_loss);
            for (shift, &v) in &c.evals {
                groups.entry(key(shift.clone())).or_default().push(v);
            }
        }
    }
    for ((s, level, iter, series), vals) in &groups {
        let [mean, std, n] = stat_cells(vals);
        t.rows.push(vec![s.0.to_string(), s.1.to_string(), level.to_string(), iter.to_string(), series.clone(), mean, std, n]);
    }
    t
}

/// Vote groups keyed by (family, mode, R, capacity, task) over in-distribution performance.
pub fn vote_groups(records: &[RunRecord]) -> Vec<VoteGroup> {
    let mut groups: BTreeMap<String, BTreeMap<Level, Vec<f64>>> = BTreeMap::new();
    for r in records {
        let c = &r.coords;
        let key = format!("{}/{}/R{}/cap{}/task{}", c.family, c.mode, c.rules, c.capacity, c.task_index);
        let entry = groups.entry(key).or_default();
        if let (RunStatus::Ok, Some(p)) = (r.status, r.id_performance()) {
            entry.entry(c.level).or_default().push(p);
        }
    }
    groups.into_iter().map(|(key, performances)| VoteGroup { key, performances }).collect()
}

pub const RESTRICTED_LEVELS: [Level; 2] = [Level::Modular, Level::Monolithic];

fn vote_table_csv(t: &VoteTable) -> Table {
    let mut out = Table::new(&["level", "votes", "tie_votes"]);
    for l in &t.levels {
        out.rows.push(vec![l.to_string(), t.votes[l].to_string(), t.tie_votes[l].to_string()]);
    }
    out
}

#[derive(Clone, Debug)]
pub struct ReportBundle {
    pub votes_full: VoteTable,
    pub votes_restricted: VoteTable,
    pub perf_vs_r: Table,
    pub metrics_vs_r: Table,
    pub metrics_by_model: Table,
    pub curves: Table,
    pub summary: String,
}

pub fn aggregate_report(records: &[RunRecord]) -> Result<ReportBundle> {
    if records.is_empty() {
        return Err(Error::invalid("no records to aggregate"));
    }
    let groups = vote_groups(records);
    let votes_full = ranking_votes(&groups, &Level::HIERARCHY);
    let votes_restricted = ranking_votes(&groups, &RESTRICTED_LEVELS);

    let mut summary = String::new();
    let count = |s: RunStatus| records.iter().filter(|r| r.status == s).count();
    writeln!(summary, "runs: {} ({} ok, {} diverged, {} skipped)", records.len(), count(RunStatus::Ok), count(RunStatus::Diverged), count(RunStatus::Skipped)).ok();
    for (title, t) in [("full comparison", &votes_full), ("modular vs monolithic", &votes_restricted)] {
        writeln!(summary, "\nvotes, {title}: {} groups, {} skipped", t.groups, t.skipped.len()).ok();
        for l in &t.levels {
            writeln!(summary, "  {:<12} {:>4} ({} on ties)", l.to_string(), t.votes[l], t.tie_votes[l]).ok();
        }
    }
    let perf = perf_vs_r(records);
    writeln!(summary, "\nin-distribution performance (mean +- std over tasks and seeds):").ok();
    let shift_col = perf.column("shift").expect("shift column");
    for row in perf.rows.iter().filter(|r| r[shift_col] == "id") {
        let num = |s: &str| s.parse::<f64>().map(|v| format!("{v:.4}")).unwrap_or_else(|_| "-".into());
        writeln!(summary, "  {} {} R={} {:<12} {} +- {} (n={})", row[0], row[1], row[2], row[3], num(&row[5]), num(&row[6]), row[7]).ok();
    }

    Ok(ReportBundle {
        votes_full,
        votes_restricted,
        perf_vs_r: perf,
        metrics_vs_r: metrics_vs_r(records),
        metrics_by_model: metrics_by_model(records),
        curves: curves(records),
        summary,
    })
}

/// Writes every table of the bundle as CSV plus `summary.txt` into `dir`.
pub fn write_report(bundle: &ReportBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let files = [
        ("votes_full.csv", vote_table_csv(&bundle.votes_full)),
        ("votes_restricted.csv", vote_table_csv(&bundle.votes_restricted)),
        ("perf_vs_R.csv", bundle.perf_vs_r.clone()),
        ("metrics_vs_R.csv", bundle.metrics_vs_r.clone()),
        ("metrics_by_model.csv", bundle.metrics_by_model.clone()),
        ("train_curve.csv", bundle.curves.clone()),
    ];
    for (name, table) in files {
        fs::write(dir.join(name), table.to_csv())?;
    }
    fs::write(dir.join("summary.txt"), &bundle.summary)?;
    Ok(())
}

pub const FIGURES: [&str; 4] = ["perf_vs_R", "metrics_vs_R", "metrics_by_model", "train_curve"];

/// Series for one figure. Records must come from a single (family, mode)
/// setting, since performance units differ between them.
pub fn plot_data(records: &[RunRecord], figure: &str) -> Result<Table> {
    let table = match figure {
        "perf_vs_R" => perf_vs_r(records),
        "metrics_vs_R" => metrics_vs_r(records),
        "metrics_by_model" => metrics_by_model(records),
        "train_curve" => curves(records),
        other => return Err(Error::invalid(format!("unknown figure '{other}'; known figures: {}", FIGURES.join(", ")))),
    };
    let settings: BTreeSet<Setting> = records.iter().map(setting).collect();
    if settings.len() > 1 {
        return Err(Error::invalid(format!(
            "records span {} family/mode settings; select one (e.g. --family mlp --mode classification)",
            settings.len()
        )));
    }
    let mut out = table.without(&["family", "mode", "n"]);
    // Rows without data are gaps in a report table but not plottable points.
    let mean = out.column("mean").expect("mean column");
    out.rows.retain(|r| !r[mean].is_empty());
    Ok(out)
}
