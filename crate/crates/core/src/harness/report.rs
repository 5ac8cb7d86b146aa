//! Comparison tables over finished runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::{read_json, RunInfo, CONFIG_FILE, METRICS_FILE, RUN_FILE};
use crate::error::{Error, Result};
use crate::metrics::MetricsSummary;
use crate::trainer::Mode;

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub mode: Mode,
    pub seed: u64,
    pub metrics: MetricsSummary,
}

/// Mean and sample standard deviation of one metric over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(v: &[f64]) -> Option<Self> {
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        Some(Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub mode: Mode,
    pub runs: usize,
    pub average_accuracy: Stat,
    pub forgetting: Option<Stat>,
    pub upper_bound_gap: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    /// Expected orderings that the data contradicts.
    pub violations: Vec<String>,
    /// Non-fatal problems, such as runs with differing settings.
    pub warnings: Vec<String>,
}

pub const REPORT_CSV_HEADER: &str = "mode,runs,a_mean,a_std,f_mean,f_std,gap_mean,gap_std";

pub fn load_record(dir: &Path) -> Result<(RunRecord, ExperimentConfig)> {
    let cfg: ExperimentConfig = read_json(&dir.join(CONFIG_FILE))?;
    let info: RunInfo = read_json(&dir.join(RUN_FILE))?;
    let metrics: MetricsSummary = read_json(&dir.join(METRICS_FILE))?;
    Ok((RunRecord { dir: dir.to_path_buf(), mode: cfg.train.mode, seed: info.seed, metrics }, cfg))
}

/// Settings that must agree for runs to be comparable.
fn comparable_key(cfg: &ExperimentConfig) -> Result<String> {
    let mut c = cfg.clone();
    c.name.clear();
    c.seeds.clear();
    c.train.mode = Mode::Hprompts;
    Ok(serde_json::to_string(&c)?)
}

pub fn build_report(records: &[RunRecord]) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no runs to report".into()));
    }
    let mut by_mode: BTreeMap<Mode, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        by_mode.entry(r.mode).or_default().push(r);
    }
    let mut report = Report::default();
    for mode in Mode::ALL {
        let Some(rs) = by_mode.get(&mode) else { continue };
        let a: Vec<f64> = rs.iter().map(|r| r.metrics.average_accuracy).collect();
        let f: Vec<f64> = rs.iter().filter_map(|r| r.metrics.forgetting).collect();
        let g: Vec<f64> = rs.iter().filter_map(|r| r.metrics.upper_bound_gap).collect();
        report.rows.push(ReportRow {
            mode,
            runs: rs.len(),
            average_accuracy: Stat::of(&a).expect("non-empty group"),
            forgetting: Stat::of(&f),
            upper_bound_gap: Stat::of(&g),
        });
    }
    let row = |m: Mode| report.rows.iter().find(|r| r.mode == m);
    let mut violations = Vec::new();
    // Accuracy should rise from the baseline through each added component.
    let present: Vec<&ReportRow> = Mode::ALL.iter().filter_map(|&m| row(m)).collect();
    for w in present.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let strict = lo.mode == Mode::Ftseq;
        let bad = if strict {
            lo.average_accuracy.mean >= hi.average_accuracy.mean
        } else {
            lo.average_accuracy.mean > hi.average_accuracy.mean
        };
        if bad {
            violations.push(format!(
                "mean accuracy of {} ({:.4}) is not {} {} ({:.4})",
                lo.mode,
                lo.average_accuracy.mean,
                if strict { "below" } else { "at most" },
                hi.mode,
                hi.average_accuracy.mean
            ));
        }
    }
    if let (Some(ft), Some(hp)) = (row(Mode::Ftseq), row(Mode::Hprompts)) {
        if let (Some(f_ft), Some(f_hp)) = (ft.forgetting, hp.forgetting) {
            if f_ft.mean <= f_hp.mean {
                violations.push(format!(
                    "forgetting of ftseq ({:.4}) is not above hprompts ({:.4})",
                    f_ft.mean, f_hp.mean
                ));
            }
        }
    }
    report.violations = violations;
    Ok(report)
}

/// Loads every run directory and builds the report, warning about runs
/// whose settings differ beyond mode and seed.
pub fn report_runs(dirs: &[PathBuf]) -> Result<Report> {
    let mut records = Vec::new();
    let mut keys: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for d in dirs {
        let (rec, cfg) = load_record(d)?;
        keys.entry(comparable_key(&cfg)?).or_default().push(d.display().to_string());
        records.push(rec);
    }
    let mut report = build_report(&records)?;
    if keys.len() > 1 {
        let groups: Vec<String> = keys.values().map(|v| format!("[{}]", v.join(", "))).collect();
        report.warnings.push(format!("runs use incompatible settings: {}", groups.join(" vs ")));
    }
    Ok(report)
}

fn fmt_opt(s: Option<f64>) -> String {
    s.map(|v| format!("{v}")).unwrap_or_default()
}

pub fn report_to_csv(r: &Report) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for row in &r.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            row.mode,
            row.runs,
            row.average_accuracy.mean,
            row.average_accuracy.std,
            fmt_opt(row.forgetting.map(|s| s.mean)),
            fmt_opt(row.forgetting.map(|s| s.std)),
            fmt_opt(row.upper_bound_gap.map(|s| s.mean)),
            fmt_opt(row.upper_bound_gap.map(|s| s.std)),
        );
    }
    out
}

pub fn report_rows_from_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_CSV_HEADER) {
        return Err(Error::InvalidArgument("report CSV header mismatch".into()));
    }
    let num = |s: &str| -> Result<f64> {
        s.parse().map_err(|_| Error::InvalidArgument(format!("bad number {s:?} in report CSV")))
    };
    let pair = |m: &str, s: &str| -> Result<Option<Stat>> {
        if m.is_empty() {
            Ok(None)
        } else {
            Ok(Some(Stat { mean: num(m)?, std: num(s)? }))
        }
    };
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 8 {
                return Err(Error::InvalidArgument(format!("report CSV row {l:?} has {} fields", f.len())));
            }
            Ok(ReportRow {
                mode: f[0].parse()?,
                runs: f[1].parse().map_err(|_| Error::InvalidArgument(format!("bad run count {:?}", f[1])))?,
                average_accuracy: Stat { mean: num(f[2])?, std: num(f[3])? },
                forgetting: pair(f[4], f[5])?,
                upper_bound_gap: pair(f[6], f[7])?,
            })
        })
        .collect()
}

/// Human-readable table; accuracies rendered as percentages.
pub fn report_to_text(r: &Report) -> String {
    let pct = |s: Option<Stat>| match s {
        Some(s) => format!("{:6.2} ± {:5.2}", 100.0 * s.mean, 100.0 * s.std),
        None => format!("{:>14}", "n/a"),
    };
    let mut out = String::new();
    let _ = writeln!(out, "{:<10} {:>4}  {:>14}  {:>14}  {:>14}", "mode", "runs", "A_T (%)", "F_T (%)", "gap (%)");
    for row in &r.rows {
        let _ = writeln!(
            out,
            "{:<10} {:>4}  {}  {}  {}",
            row.mode.as_str(),
            row.runs,
            pct(Some(row.average_accuracy)),
            pct(row.forgetting),
            pct(row.upper_bound_gap)
        );
    }
    for w in &r.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    for v in &r.violations {
        let _ = writeln!(out, "ordering violation: {v}");
    }
    out
}
