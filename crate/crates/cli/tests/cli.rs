use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn vcil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vcil"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

const TINY: &str = r#"
num_classes = 4
train_per_class = 4
test_per_class = 2
height = 8
width = 8
initial_classes = 2
classes_per_stage = 1
frames = 4
sparse_frames = 2
budget_bytes_per_class = 1536
initial_epochs = 2
finetune_epochs = 1
batch_size = 4
widths = [4, 8]
"#;

fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    // keys in `extra` replace the same keys in the base config
    let keys: Vec<&str> = extra.lines().filter_map(|l| l.split('=').next()).map(str::trim).collect();
    let base: Vec<&str> = TINY.lines().filter(|l| !keys.iter().any(|k| !k.is_empty() && l.starts_with(&format!("{k} ")))).collect();
    let path = dir.join(name);
    fs::write(&path, format!("{}\n{extra}", base.join("\n"))).unwrap();
    path
}

fn run(tmp: &TempDir, name: &str, extra: &str, seeds: &str) -> PathBuf {
    let cfg = write_config(tmp.path(), &format!("{name}.toml"), extra);
    let out = tmp.path().join(name);
    let o = vcil(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seeds", seeds]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.clone(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn validate_accepts_and_rejects_with_field_names() {
    let tmp = TempDir::new().unwrap();
    let good = write_config(tmp.path(), "good.toml", "");
    assert!(vcil(&["validate", good.to_str().unwrap()]).status.success());

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, TINY.replace("sparse_frames = 2", "sparse_frames = 3")).unwrap();
    let o = vcil(&["validate", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sparse_frames"));
}

#[test]
fn invalid_config_is_rejected_before_training() {
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, format!("{}\nseeds = []\n", TINY.replace("frames = 4\nsparse_frames = 2", "frames = 8\nsparse_frames = 3"))).unwrap();
    let out = tmp.path().join("out");
    let o = vcil(&["run", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("sparse_frames") && err.contains("seeds"), "{err}");
    assert!(!out.exists());
}

#[test]
fn run_writes_per_seed_artifacts_and_summary() {
    let tmp = TempDir::new().unwrap();
    let out = run(&tmp, "sparse", "", "1,2");
    for seed in [1, 2] {
        let dir = out.join(format!("seed_{seed}"));
        let table = fs::read_to_string(dir.join("metrics.csv")).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], "task_id,n_classes_seen,acc_cnn,acc_nme,ACC_cnn,ACC_nme,FOR_cnn,FOR_nme");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0,2,") && lines[1].ends_with(",,"));
        assert!(lines[3].starts_with("2,4,"));
        assert!(dir.join("metrics.json").is_file());
        assert!(dir.join("epochs.csv").is_file());
        assert!(dir.join("memory/store.json").is_file());
        for k in 0..3 {
            assert!(dir.join(format!("checkpoints/task_{k}.bin")).is_file());
            assert!(dir.join(format!("checkpoints/task_{k}.json")).is_file());
        }
    }
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    let last = summary.lines().last().unwrap();
    assert!(last.split(',').all(|c| !c.is_empty()), "final FOR present: {last}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(json["seeds"].as_array().unwrap().len(), 2);
    assert!(out.join("accuracy.png").is_file());
}

#[test]
fn repeated_runs_produce_identical_tables() {
    let tmp = TempDir::new().unwrap();
    let a = run(&tmp, "a", "", "7");
    let b = run(&tmp, "b", "", "7");
    for f in ["metrics.csv", "metrics.json", "epochs.csv"] {
        assert_eq!(fs::read(a.join("seed_7").join(f)).unwrap(), fs::read(b.join("seed_7").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn compare_tables_runs_in_argument_order_without_touching_them() {
    let tmp = TempDir::new().unwrap();
    let sparse = run(&tmp, "sparse", "", "3");
    let dense = run(&tmp, "dense", "baseline_mode = true\n", "3");
    let third = run(&tmp, "third", "alignment = \"uniform\"\n", "3");
    let before: Vec<_> = [&sparse, &dense, &third].iter().map(|d| snapshot(d)).collect();
    let out = tmp.path().join("cmp");
    let o = vcil(&[
        "compare",
        dense.to_str().unwrap(),
        sparse.to_str().unwrap(),
        third.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("comparison.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert!(rows[0].contains("dACC_cnn") && rows[0].contains("dFOR_nme"));
    let names: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(names, vec!["dense", "sparse", "third"]);
    // the first run is the reference, so its deltas are zero
    assert!(rows[1].ends_with("0.0000,0.0000,0.0000,0.0000"));
    assert!(out.join("accuracy.png").is_file());
    let after: Vec<_> = [&sparse, &dense, &third].iter().map(|d| snapshot(d)).collect();
    assert_eq!(before, after);
}

#[test]
fn compare_rejects_single_dir_and_incompatible_schedules() {
    let tmp = TempDir::new().unwrap();
    let a = run(&tmp, "a", "", "1");
    assert!(!vcil(&["compare", a.to_str().unwrap()]).status.success());
    let b = run(&tmp, "b", "classes_per_stage = 2\n", "1");
    let o = vcil(&["compare", a.to_str().unwrap(), b.to_str().unwrap(), "--out", tmp.path().join("c").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("not comparable"));
}

#[test]
fn export_dataset_writes_loadable_frames() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "");
    let dir = tmp.path().join("frames");
    let o = vcil(&["export-dataset", cfg.to_str().unwrap(), dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let classes = fs::read_dir(&dir).unwrap().count();
    assert_eq!(classes, 4);

    // the exported directory feeds straight back into a run
    let ingest = write_config(tmp.path(), "ingest.toml", &format!("data_root = {:?}\n", dir.to_str().unwrap()));
    let out = tmp.path().join("ingested");
    let o = vcil(&["run", ingest.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seeds", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("seed_5/metrics.csv").is_file());
}
