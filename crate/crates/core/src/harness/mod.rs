//! Config-driven experiments: training into run directories, re-evaluation,
//! cross-run reports and the gradient-check suite.

pub mod config;
pub mod gradsuite;
pub mod report;
pub mod run;

pub use config::{DataSource, ExperimentConfig, Precision, Preset};
pub use gradsuite::{check_names, run_gradcheck_suite, CheckOutcome, SuiteReport};
pub use report::{build_report, report_rows_from_csv, report_runs, report_to_csv, report_to_text, Report, ReportRow, Stat};
pub use run::{eval, load_run, train, verify_run, EvalSummary, LoadedRun, RunInfo, TrainSummary};

/// Caps the evaluation thread pool. Only the first call has an effect.
pub fn configure_threads(n: usize) -> crate::Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| crate::Error::Config(format!("thread pool: {e}")))
}
