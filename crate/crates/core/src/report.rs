//! Metric tables, per-run artifacts and cross-seed summaries.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::TaskSchedule;
use crate::error::{Error, Result};
use crate::evaluation::{ClassifierMetrics, RunMetrics};
use crate::protocol::RunReport;

pub const METRIC_COLUMNS: [&str; 8] = [
    "task_id",
    "n_classes_seen",
    "acc_cnn",
    "acc_nme",
    "ACC_cnn",
    "ACC_nme",
    "FOR_cnn",
    "FOR_nme",
];

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_default()
}

/// CSV with one row per task. `acc_*` is the accuracy over every seen class
/// after the task; `FOR_*` is empty for the initial task.
pub fn metric_table(metrics: &RunMetrics, schedule: &TaskSchedule) -> String {
    let mut out = METRIC_COLUMNS.join(",");
    out.push('\n');
    let acc_cnn = metrics.cnn.acc.average_accuracies();
    let acc_nme = metrics.nme.acc.average_accuracies();
    let for_cnn = metrics.cnn.acc.average_forgettings();
    let for_nme = metrics.nme.acc.average_forgettings();
    for k in 0..metrics.num_tasks() {
        let _ = writeln!(
            out,
            "{k},{},{:.4},{:.4},{:.4},{:.4},{},{}",
            schedule.classes_seen(k),
            metrics.cnn.overall[k],
            metrics.nme.overall[k],
            acc_cnn[k],
            acc_nme[k],
            opt(for_cnn[k]),
            opt(for_nme[k]),
        );
    }
    out
}

/// Accuracy matrix with every derived quantity, for machine consumption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierExport {
    pub accuracy: Vec<Vec<f64>>,
    pub overall: Vec<f64>,
    pub average_accuracy: Vec<f64>,
    pub forgetting: Vec<Vec<f64>>,
    pub average_forgetting: Vec<Option<f64>>,
}

impl From<&ClassifierMetrics> for ClassifierExport {
    fn from(m: &ClassifierMetrics) -> Self {
        Self {
            accuracy: m.acc.rows().to_vec(),
            overall: m.overall.clone(),
            average_accuracy: m.acc.average_accuracies(),
            forgetting: m.acc.forgetting_matrix(),
            average_forgetting: m.acc.average_forgettings(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsExport {
    pub seed: u64,
    pub class_order: Vec<usize>,
    pub group_sizes: Vec<usize>,
    pub cnn: ClassifierExport,
    pub nme: ClassifierExport,
}

impl MetricsExport {
    pub fn new(report: &RunReport) -> Self {
        Self {
            seed: report.seed,
            class_order: report.schedule.class_order.clone(),
            group_sizes: report.schedule.group_sizes(),
            cnn: (&report.metrics.cnn).into(),
            nme: (&report.metrics.nme).into(),
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `metrics.csv`, `metrics.json` and `report.json` into `dir`.
pub fn write_run_artifacts(report: &RunReport, dir: &Path) -> Result<()> {
    write(&dir.join("metrics.csv"), metric_table(&report.metrics, &report.schedule))?;
    let export = serde_json::to_string_pretty(&MetricsExport::new(report)).expect("serializable");
    write(&dir.join("metrics.json"), export)?;
    let full = serde_json::to_string_pretty(report).expect("serializable");
    write(&dir.join("report.json"), full)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation; zero for a single value.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub final_acc_cnn: f64,
    pub final_acc_nme: f64,
    pub final_for_cnn: Option<f64>,
    pub final_for_nme: Option<f64>,
}

/// Cross-seed summary of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub group_sizes: Vec<usize>,
    pub seeds: Vec<SeedResult>,
    /// Mean and std over seeds of `ACC_k`, per task.
    pub acc_cnn: Vec<MeanStd>,
    pub acc_nme: Vec<MeanStd>,
    /// Mean and std over seeds of `FOR_k`; `None` for the initial task.
    pub for_cnn: Vec<Option<MeanStd>>,
    pub for_nme: Vec<Option<MeanStd>>,
}

impl RunSummary {
    pub fn final_acc_cnn(&self) -> Option<MeanStd> {
        self.acc_cnn.last().copied()
    }

    pub fn final_acc_nme(&self) -> Option<MeanStd> {
        self.acc_nme.last().copied()
    }

    pub fn final_for_cnn(&self) -> Option<MeanStd> {
        self.for_cnn.last().copied().flatten()
    }

    pub fn final_for_nme(&self) -> Option<MeanStd> {
        self.for_nme.last().copied().flatten()
    }
}

pub fn summarize(label: &str, reports: &[RunReport]) -> Result<RunSummary> {
    let first = reports.first().ok_or_else(|| Error::Evaluation("no runs to summarise".into()))?;
    let group_sizes = first.schedule.group_sizes();
    if reports.iter().any(|r| r.schedule.group_sizes() != group_sizes) {
        return Err(Error::Evaluation("runs have different task splits".into()));
    }
    let tasks = group_sizes.len();
    let per_task = |f: &dyn Fn(&RunReport, usize) -> Option<f64>| -> Vec<Option<MeanStd>> {
        (0..tasks)
            .map(|k| {
                let vals: Vec<f64> = reports.iter().filter_map(|r| f(r, k)).collect();
                MeanStd::of(&vals)
            })
            .collect()
    };
    let acc = |m: fn(&RunMetrics) -> &ClassifierMetrics| {
        per_task(&|r, k| m(&r.metrics).acc.average_accuracies().get(k).copied())
            .into_iter()
            .map(|v| v.expect("every task has an accuracy"))
            .collect::<Vec<_>>()
    };
    let forg = |m: fn(&RunMetrics) -> &ClassifierMetrics| {
        per_task(&|r, k| m(&r.metrics).acc.average_forgettings().get(k).copied().flatten())
    };
    let seeds = reports
        .iter()
        .map(|r| SeedResult {
            seed: r.seed,
            final_acc_cnn: *r.metrics.cnn.acc.average_accuracies().last().expect("tasks"),
            final_acc_nme: *r.metrics.nme.acc.average_accuracies().last().expect("tasks"),
            final_for_cnn: r.metrics.cnn.acc.average_forgettings().last().copied().flatten(),
            final_for_nme: r.metrics.nme.acc.average_forgettings().last().copied().flatten(),
        })
        .collect();
    Ok(RunSummary {
        label: label.to_owned(),
        group_sizes,
        seeds,
        acc_cnn: acc(|m| &m.cnn),
        acc_nme: acc(|m| &m.nme),
        for_cnn: forg(|m| &m.cnn),
        for_nme: forg(|m| &m.nme),
    })
}

fn cell(v: Option<MeanStd>) -> String {
    match v {
        Some(v) => format!("{:.2} ± {:.2}", v.mean, v.std),
        None => "-".into(),
    }
}

/// Final-task table: one row per configuration, CNN and NME columns.
pub fn summary_text(summaries: &[&RunSummary]) -> String {
    let width = summaries.iter().map(|s| s.label.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>15}  {:>15}  {:>15}  {:>15}",
        "config", "ACC CNN", "ACC NME", "FOR CNN", "FOR NME"
    );
    for s in summaries {
        let _ = writeln!(
            out,
            "{:<width$}  {:>15}  {:>15}  {:>15}  {:>15}",
            s.label,
            cell(s.final_acc_cnn()),
            cell(s.final_acc_nme()),
            cell(s.final_for_cnn()),
            cell(s.final_for_nme()),
        );
    }
    out
}

/// Per-task means over seeds, in the metric-table layout.
pub fn summary_table(summary: &RunSummary) -> String {
    let mut out = String::from(
        "task_id,n_classes_seen,ACC_cnn_mean,ACC_cnn_std,ACC_nme_mean,ACC_nme_std,FOR_cnn_mean,FOR_cnn_std,FOR_nme_mean,FOR_nme_std\n",
    );
    let mut seen = 0;
    for k in 0..summary.group_sizes.len() {
        seen += summary.group_sizes[k];
        let pair = |v: Option<MeanStd>| match v {
            Some(v) => format!("{:.4},{:.4}", v.mean, v.std),
            None => ",".into(),
        };
        let _ = writeln!(
            out,
            "{k},{seen},{},{},{},{}",
            pair(Some(summary.acc_cnn[k])),
            pair(Some(summary.acc_nme[k])),
            pair(summary.for_cnn[k]),
            pair(summary.for_nme[k]),
        );
    }
    out
}

/// Writes `summary.json`, `summary.csv` and `summary.txt` into `dir`.
pub fn write_summary(summary: &RunSummary, dir: &Path) -> Result<()> {
    write(&dir.join("summary.json"), serde_json::to_string_pretty(summary).expect("serializable"))?;
    write(&dir.join("summary.csv"), summary_table(summary))?;
    write(&dir.join("summary.txt"), summary_text(&[summary]))
}

pub fn read_summary(dir: &Path) -> Result<RunSummary> {
    let path = dir.join("summary.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e))
}
