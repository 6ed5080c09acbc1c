//! Sweep orchestration, result persistence, aggregation and the oracle
//! verification suite.

mod config;
mod report;
mod run;
mod verify;

pub use config::{SweepConfig, TrainOverrides};
pub use report::{
    aggregate_report, plot_data, summarize, vote_groups, write_report, ReportBundle, Summary, Table, FIGURES, RESTRICTED_LEVELS,
};
pub use run::{
    enumerate_runs, execute_run, load_records, rerun, run_one, run_sweep, RunCoords, RunRecord, RunStatus, SweepOutcome, RESULTS_FILE,
};
pub use verify::{data_laws, random_stochastic, verify, CheckResult, VerifyOptions};
