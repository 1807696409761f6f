//! Acceptance gate. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run with `cargo test -p vcil-core --test acceptance`.

mod common;

use std::time::Instant;

use common::{acc_oracle, for_oracle, forgetting_oracle, herding_oracle, random_matrix, scalar_sequence, scalars};
use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcil::config::ExperimentConfig;
use vcil::evaluation::{average_accuracy, average_forgetting, forgetting, AccuracyMatrix};
use vcil::memory::{align_repeated, align_uniform, capacity, herding_select, sparse_extract};
use vcil::protocol::{drive_base_train, run_incremental_experiment, EpochStats, ExperimentData, StagePlan};
use vcil::report::{metric_table, summarize};
use vcil::{Alignment, BackboneConfig, ExemplarStore, Distillation, FrameSequence, ModelState, RunReport};

const SEEDS: [u64; 3] = [1000, 1993, 2021];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..100 {
        let tasks = rng.random_range(1..=8);
        let rows = random_matrix(&mut rng, tasks);
        let acc = AccuracyMatrix::from_rows(rows.clone()).unwrap();
        for k in 0..tasks {
            worst = worst.max((average_accuracy(&rows[k]).unwrap() - acc_oracle(&rows, k)).abs());
            for j in 0..k {
                worst = worst.max((forgetting(&acc, k, j).unwrap() - forgetting_oracle(&rows, k, j)).abs());
            }
            match (k, average_forgetting(&acc, k)) {
                (0, Err(_)) => {}
                (0, Ok(v)) => return outcome(false, format!("FOR_0 defined as {v}")),
                (_, r) => worst = worst.max((r.unwrap() - for_oracle(&rows, k)).abs()),
            }
            checked += 1;
        }
    }
    outcome(worst <= 1e-12, format!("{checked} rows, max deviation {worst:e}"))
}

fn letters(n: usize) -> (FrameSequence, Vec<Array4<f32>>) {
    // frame i is a distinct random image, standing for A, B, C, ...
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let frames = Array4::from_shape_simple_fn((n, 3, 4, 4), || rng.random_range(0.0f32..1.0));
    let parts = (0..n).map(|i| frames.select(ndarray::Axis(0), &[i])).collect();
    (FrameSequence::new(frames, 0, "letters").unwrap(), parts)
}

fn alignment_exactness() -> Outcome {
    let mut failures = Vec::new();
    let (ab, parts) = letters(2);
    let stack = |idx: &[usize]| -> Array4<f32> {
        ndarray::concatenate(ndarray::Axis(0), &idx.iter().map(|&i| parts[i].view()).collect::<Vec<_>>()).unwrap()
    };
    if align_repeated(&ab, 4).unwrap().frames() != stack(&[0, 0, 1, 1]) {
        failures.push("[A,B] -> [A,A,B,B]");
    }
    if align_repeated(&ab, 8).unwrap().frames() != stack(&[0, 0, 0, 0, 1, 1, 1, 1]) {
        failures.push("[A,B] -> 4xA 4xB");
    }
    let mid = (&parts[0] + &parts[1]) / 2.0;
    let want = ndarray::concatenate(ndarray::Axis(0), &[parts[0].view(), mid.view(), parts[1].view(), parts[1].view()]).unwrap();
    let got = align_uniform(&ab, 4).unwrap();
    if got.frames().iter().zip(want.iter()).any(|(a, b)| (a - b).abs() > 1e-7) {
        failures.push("[A,B] -> [A,(A+B)/2,B,B]");
    }
    // scalar frames 0..3 scaled into the pixel range by 1/4
    let got = scalars(&align_uniform(&scalar_sequence(&[0.0, 0.25, 0.5, 0.75], 0), 8).unwrap());
    let want = [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.0];
    if got.iter().zip(want).any(|(g, w)| g * 4.0 != w) {
        failures.push("scalar uniform example");
    }
    let constant = scalar_sequence(&[0.3; 4], 0);
    if scalars(&align_uniform(&constant, 8).unwrap()).iter().any(|v| *v != 0.3) {
        failures.push("constant input");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let t = [1usize, 2, 4, 8, 16][rng.random_range(0..5)];
        let values: Vec<f32> = (0..t).map(|_| rng.random_range(0.0..=1.0)).collect();
        let seq = scalar_sequence(&values, 0);
        for sparse in (1..=t).filter(|s| t.is_multiple_of(*s)) {
            let stored = sparse_extract(&seq, sparse).unwrap();
            for out in [align_uniform(&stored, t).unwrap(), align_repeated(&stored, t).unwrap()] {
                if out.len() != t || out.frames().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    failures.push("length or range property");
                }
            }
        }
        let full = sparse_extract(&seq, t).unwrap();
        if align_uniform(&full, t).unwrap().frames() != seq.frames()
            || align_repeated(&full, t).unwrap().frames() != seq.frames()
        {
            failures.push("identity when stored frames equal input frames");
        }
    }
    failures.dedup();
    outcome(failures.is_empty(), if failures.is_empty() { "worked examples and 100 random sequences".into() } else { failures.join(", ") })
}

fn budget_law() -> Outcome {
    let fb = 3 * 112 * 112;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    if capacity(40 * fb, 8, fb) != 5 || capacity(40 * fb, 4, fb) != 10 {
        return outcome(false, "40 frames of budget does not give 5 dense / 10 sparse videos");
    }
    // bytes actually held by filled stores, on a small frame size
    let small = 3 * 8 * 8;
    let videos: Vec<FrameSequence> = (0..12)
        .map(|i| FrameSequence::new(Array4::from_elem((8, 3, 8, 8), 0.5f32), 0, format!("v{i}")).unwrap())
        .collect();
    let mut used = Vec::new();
    for sparse_frames in [8, 4] {
        let mut store = ExemplarStore::new(8, sparse_frames, small, 40 * small, true).unwrap();
        let kept = store.insert_class(0, &videos).unwrap();
        used.push((kept, store.bytes_used(0)));
    }
    if used != [(5, 40 * small), (10, 40 * small)] {
        return outcome(false, format!("stored (videos, bytes) {used:?}"));
    }
    for _ in 0..50 {
        // budgets that hold a whole number of dense videos
        let videos = rng.random_range(0..200);
        let budget = videos * 8 * fb;
        let dense = capacity(budget, 8, fb);
        let sparse = capacity(budget, 4, fb);
        if dense != videos || sparse != 2 * dense || dense * 8 * fb != sparse * 4 * fb {
            return outcome(false, format!("budget {budget}: {dense} dense vs {sparse} sparse"));
        }
    }
    outcome(true, "5x8 == 10x4 frames; 50 random budgets double exactly")
}

fn early_break() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..200 {
        let n = rng.random_range(2..=60);
        let cap = n / 2;
        let initial: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..100.0)).collect();
        let threshold = initial.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let len = rng.random_range(cap..=cap + 5);
        let incremental: Vec<f64> = (0..len)
            .map(|_| if rng.random_bool(0.1) { threshold + rng.random_range(0.0..1.0) } else { rng.random_range(0.0..threshold) })
            .collect();
        let expected = incremental.iter().take(cap).position(|a| *a >= threshold).map_or(cap, |e| e + 1);

        let mut plan = StagePlan::new(n, 30, true);
        let script = |accs: &[f64]| {
            let accs = accs.to_vec();
            move |e: usize| Ok(EpochStats { loss: 0.0, accuracy: accs[e] })
        };
        let first = drive_base_train(&mut plan, 0, true, script(&initial)).unwrap();
        if first.epochs.len() != n || plan.threshold() != Some(threshold) {
            return outcome(false, format!("case {case}: initial task ran {} of {n} epochs", first.epochs.len()));
        }
        let log = drive_base_train(&mut plan, 1, false, script(&incremental)).unwrap();
        if log.epochs.len() != expected {
            return outcome(false, format!("case {case}: stopped after {} epochs, expected {expected}", log.epochs.len()));
        }
    }
    outcome(true, "200 scripted sequences")
}

fn gradient_check() -> Outcome {
    let cfg = BackboneConfig {
        frames: 4,
        channels: 3,
        height: 8,
        width: 8,
        widths: vec![4, 6, 8],
        head_init_scale: 0.3,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = ModelState::new(cfg.clone(), &mut rng).unwrap();
    model.expand_head(2, &mut rng).unwrap();
    model.take_snapshot();
    model.expand_head(2, &mut rng).unwrap();
    let batch: Vec<FrameSequence> = (0..4)
        .map(|i| {
            let f = Array4::from_shape_simple_fn((4, 3, 8, 8), || rng.random_range(0.0f32..1.0));
            FrameSequence::new(f, i, "g").unwrap()
        })
        .collect();
    model.train_step(&batch, None, 0.5).unwrap();
    let distill = Some(Distillation::default());
    let (_, grads) = model.loss_and_gradient(&batch, distill).unwrap();
    let analytic = grads.flatten();
    let candidates: Vec<usize> = (0..analytic.len()).filter(|&i| analytic[i].abs() > 1e-6).collect();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let coords = 20;
    for pick in rand::seq::index::sample(&mut rng, candidates.len(), coords) {
        let i = candidates[pick];
        let orig = model.params().get(i).unwrap();
        model.params_mut().set(i, orig + eps);
        let plus = model.training_loss(&batch, distill).unwrap();
        model.params_mut().set(i, orig - eps);
        let minus = model.training_loss(&batch, distill).unwrap();
        model.params_mut().set(i, orig);
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max((numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()));
    }
    outcome(worst <= 1e-4, format!("{coords} coordinates, max relative error {worst:.2e}"))
}

fn herding() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..50 {
        let n = rng.random_range(1..=20);
        let d = rng.random_range(1..=8);
        let m = rng.random_range(1..=n + 2);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mean: Vec<f64> = (0..d).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n as f64).collect();
        let array = Array2::from_shape_vec((n, d), rows.concat()).unwrap();
        let got = herding_select(array.view(), &mean, m).unwrap();
        let want = herding_oracle(&rows, &mean, m);
        if got != want {
            return outcome(false, format!("case {case}: {got:?} vs {want:?}"));
        }
    }
    outcome(true, "50 random sets, n <= 20, d <= 8")
}

/// Desk-scale setting for the sparse-vs-dense comparison.
fn comparison_config() -> ExperimentConfig {
    ExperimentConfig {
        num_classes: 10,
        initial_classes: 2,
        classes_per_stage: 2,
        frames: 8,
        sparse_frames: 4,
        alignment: Alignment::Repeated,
        early_break: true,
        train_per_class: 30,
        test_per_class: 20,
        learning_rate: 0.1,
        batch_size: 8,
        ..Default::default()
    }
}

fn run_all(config: &ExperimentConfig) -> Vec<RunReport> {
    let data = ExperimentData::from_config(config).unwrap();
    SEEDS.iter().map(|&s| run_incremental_experiment(config, &data, s, None).unwrap()).collect()
}

fn directional(sparse: &[RunReport], dense: &[RunReport]) -> Outcome {
    let mut wins = 0;
    let mut lines = Vec::new();
    for (s, d) in sparse.iter().zip(dense) {
        let acc = |r: &RunReport| *r.metrics.cnn.acc.average_accuracies().last().unwrap();
        let forg = |r: &RunReport| r.metrics.cnn.acc.average_forgettings().last().copied().flatten().unwrap();
        let ok = forg(s) <= forg(d) && acc(s) >= acc(d) - 2.0;
        wins += ok as usize;
        lines.push(format!(
            "seed {}: ACC {:.1} vs {:.1}, FOR {:.1} vs {:.1}{}",
            s.seed,
            acc(s),
            acc(d),
            forg(s),
            forg(d),
            if ok { "" } else { " (miss)" }
        ));
    }
    outcome(wins >= 2, format!("{wins}/3 seeds; {}", lines.join("; ")))
}

fn determinism(config: &ExperimentConfig, reference: &RunReport) -> Outcome {
    let data = ExperimentData::from_config(config).unwrap();
    let again = run_incremental_experiment(config, &data, reference.seed, None).unwrap();
    let a = metric_table(&reference.metrics, &reference.schedule);
    let b = metric_table(&again.metrics, &again.schedule);
    outcome(a == b && again == *reference, format!("seed {} repeated", reference.seed))
}

fn discipline(reports: &[RunReport]) -> Outcome {
    for r in reports {
        if let Err(e) = r.verify_discipline() {
            return outcome(false, format!("seed {}: {e}", r.seed));
        }
    }
    outcome(true, format!("{} full runs audited", reports.len()))
}

fn main() {
    let mut results: Vec<(&str, Outcome, f64)> = Vec::new();
    fn timed(results: &mut Vec<(&str, Outcome, f64)>, name: &'static str, f: &mut dyn FnMut() -> Outcome) {
        let start = Instant::now();
        let o = f();
        results.push((name, o, start.elapsed().as_secs_f64()));
    }
    timed(&mut results, "1 metric oracles", &mut metric_oracles);
    timed(&mut results, "2 alignment exactness", &mut alignment_exactness);
    timed(&mut results, "3 budget law", &mut budget_law);
    timed(&mut results, "4 early break", &mut early_break);
    timed(&mut results, "5 gradient check", &mut gradient_check);
    timed(&mut results, "6 herding oracle", &mut herding);

    let sparse_cfg = comparison_config();
    let dense_cfg = ExperimentConfig { baseline_mode: true, ..sparse_cfg.clone() };
    let start = Instant::now();
    let sparse = run_all(&sparse_cfg);
    let dense = run_all(&dense_cfg);
    let elapsed = start.elapsed().as_secs_f64();
    for (label, runs) in [("sparse", &sparse), ("dense", &dense)] {
        let s = summarize(label, runs).unwrap();
        eprint!("{}", vcil::report::summary_text(&[&s]));
    }
    let mut o = directional(&sparse, &dense);
    if elapsed > 900.0 {
        o = outcome(false, format!("{} (took {elapsed:.0}s, over 15 min)", o.detail));
    }
    results.push(("7 sparse vs dense", o, elapsed));
    timed(&mut results, "8 determinism", &mut || determinism(&sparse_cfg, &sparse[0]));
    let all: Vec<RunReport> = sparse.iter().chain(&dense).cloned().collect();
    timed(&mut results, "9 protocol discipline", &mut || discipline(&all));

    let mut failed = 0;
    for (name, o, secs) in &results {
        println!("{} [{name}] {} ({secs:.2}s)", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += !o.pass as usize;
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
