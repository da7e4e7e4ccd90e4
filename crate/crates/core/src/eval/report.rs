//! Report artifacts: an aligned text table, a per-task CSV and a JSON document
//! holding the full report (config snapshot included).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::ExperimentReport;
use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 8] = ["dataset", "level", "k", "variant", "task_id", "accuracy", "tune_epochs", "seconds"];

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

fn write_csv(reports: &[&ExperimentReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(CSV_HEADER).map_err(|e| csv_err(path, e))?;
    for r in reports {
        for t in &r.tasks {
            w.write_record([
                r.dataset.clone(),
                r.level.to_string(),
                r.k.to_string(),
                r.variant.to_string(),
                t.task_id.to_string(),
                format!("{:.6}", t.accuracy),
                t.tune_epochs.to_string(),
                format!("{:.6}", t.seconds),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Aligned summary table, one row per report.
pub fn summary_table(reports: &[&ExperimentReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:<6} {:>3} {:<14} {:>6} {:>9} {:>8} {:>10}",
        "dataset", "level", "k", "variant", "tasks", "mean(%)", "std(%)", "seconds"
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{:<12} {:<6} {:>3} {:<14} {:>6} {:>9.2} {:>8.2} {:>10.2}",
            r.dataset,
            r.level,
            r.k,
            r.variant,
            r.tasks.len(),
            100.0 * r.mean,
            100.0 * r.std,
            r.wall_clock_seconds
        );
    }
    s
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Contract(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes `report.txt`, `report.csv` and `report.json` into `dir`.
pub fn write_report_artifacts(report: &ExperimentReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    fs::write(dir.join("report.txt"), summary_table(&[report])).map_err(|e| Error::io(dir, e))?;
    write_csv(&[report], &dir.join("report.csv"))?;
    write_json(report, &dir.join("report.json"))
}

/// One artifact set per sweep value under `dir/<axis>_<value>/`, plus a
/// combined summary table.
pub fn write_sweep_artifacts(axis: &str, results: &[(usize, ExperimentReport)], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for (value, report) in results {
        write_report_artifacts(report, dir.join(format!("{axis}_{value}")))?;
    }
    let refs: Vec<&ExperimentReport> = results.iter().map(|(_, r)| r).collect();
    fs::write(dir.join("summary.txt"), summary_table(&refs)).map_err(|e| Error::io(dir, e))
}

#[cfg(test)]
mod tests {
    use super::super::{Level, TaskOutcome};
    use super::*;
    use crate::prompt::Variant;

    #[test]
    fn csv_has_one_row_per_task() {
        let report = ExperimentReport {
            dataset: "toy".into(),
            level: Level::Graph,
            k: 5,
            variant: Variant::Prompt,
            tasks: (0..3)
                .map(|i| TaskOutcome {
                    task_id: i,
                    accuracy: 0.5,
                    tune_epochs: 4,
                    selected_epoch: 2,
                    test_size: 10,
                    seconds: 0.01,
                })
                .collect(),
            mean: 0.5,
            std: 0.0,
            wall_clock_seconds: 0.1,
            config: serde_json::Value::Null,
            seed: 1,
        };
        let dir = tempfile::tempdir().unwrap();
        write_report_artifacts(&report, dir.path()).unwrap();
        let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "dataset,level,k,variant,task_id,accuracy,tune_epochs,seconds");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("toy,graph,5,prompt,0,0.500000,4,"));
        let back: ExperimentReport =
            serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back, report);
        assert!(fs::read_to_string(dir.path().join("report.txt")).unwrap().contains("50.00"));
    }
}
