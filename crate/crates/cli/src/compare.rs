use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use vcil::report::{read_summary, MeanStd, RunSummary};

use crate::plot;

fn mean(v: Option<MeanStd>) -> Option<f64> {
    v.map(|v| v.mean)
}

fn fmt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_default()
}

fn delta(a: Option<f64>, base: Option<f64>) -> Option<f64> {
    Some(a? - base?)
}

/// Final metrics of each run in argument order, with differences to the first.
pub fn comparison_table(runs: &[(String, RunSummary)]) -> String {
    let mut out = String::from(
        "run,seeds,ACC_cnn,ACC_nme,FOR_cnn,FOR_nme,dACC_cnn,dACC_nme,dFOR_cnn,dFOR_nme\n",
    );
    let finals = |s: &RunSummary| {
        [
            mean(s.final_acc_cnn()),
            mean(s.final_acc_nme()),
            mean(s.final_for_cnn()),
            mean(s.final_for_nme()),
        ]
    };
    let base = finals(&runs[0].1);
    for (name, summary) in runs {
        let row = finals(summary);
        let cells: Vec<String> = row.iter().map(|v| fmt(*v)).collect();
        let deltas: Vec<String> = row.iter().zip(&base).map(|(a, b)| fmt(delta(*a, *b))).collect();
        let _ = writeln!(out, "{name},{},{},{}", summary.seeds.len(), cells.join(","), deltas.join(","));
    }
    out
}

fn run_name(dir: &Path) -> String {
    dir.canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| dir.display().to_string())
}

pub fn compare(dirs: &[PathBuf], out: &Path) -> Result<ExitCode> {
    if dirs.len() < 2 {
        bail!("compare needs at least two run directories");
    }
    let mut runs = Vec::new();
    for dir in dirs {
        let summary = read_summary(dir).with_context(|| format!("reading run {}", dir.display()))?;
        runs.push((run_name(dir), summary));
    }
    let reference = &runs[0].1.group_sizes;
    for (dir, (_, s)) in dirs.iter().zip(&runs) {
        if &s.group_sizes != reference {
            bail!(
                "{} splits classes as {:?}, {} as {:?}; schedules are not comparable",
                dir.display(),
                s.group_sizes,
                dirs[0].display(),
                reference
            );
        }
    }
    let out_canon = out.canonicalize().ok();
    if dirs.iter().any(|d| d.canonicalize().ok() == out_canon && out_canon.is_some()) {
        bail!("--out must not be one of the compared run directories");
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut labelled: Vec<RunSummary> = Vec::new();
    for (name, s) in &runs {
        labelled.push(RunSummary { label: name.clone(), ..s.clone() });
    }
    let table = comparison_table(&runs);
    fs::write(out.join("comparison.csv"), &table)?;
    let refs: Vec<&RunSummary> = labelled.iter().collect();
    plot::accuracy_curves(&refs, &out.join("accuracy.png"))?;
    print!("{}", vcil::report::summary_text(&refs));
    println!("wrote {}", out.join("comparison.csv").display());
    Ok(ExitCode::SUCCESS)
}
