//! The incremental run: per task, Base Train on new data plus aligned replay,
//! memory-set construction, Fine Tune on all memory sets, evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{save_checkpoint, Distillation, ModelState};
use crate::config::ExperimentConfig;
use crate::dataset::{
    generate_synthetic_dataset, load_frame_directory, make_schedule, FrameSequence, SyntheticSpec,
    TaskSchedule,
};
use crate::error::{Error, Result};
use crate::evaluation::{class_means, predict_cnn, predict_nme, RunMetrics, SparseInference};
use crate::memory::{build_memory_set, save_store, Alignment, ExemplarStore};

/// Epoch budgets and the Early Break threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    /// Epochs of the initial task's Base Train.
    pub initial_epochs: usize,
    pub finetune_epochs: usize,
    pub early_break: bool,
    threshold: Option<f64>,
}

impl StagePlan {
    pub fn new(initial_epochs: usize, finetune_epochs: usize, early_break: bool) -> Self {
        Self { initial_epochs, finetune_epochs, early_break, threshold: None }
    }

    /// `floor(N / 2)`.
    pub fn incremental_cap(&self) -> usize {
        self.initial_epochs / 2
    }

    /// Best training accuracy of the initial task, once recorded.
    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    fn set_threshold(&mut self, value: f64) -> Result<()> {
        if self.threshold.is_some() {
            return Err(Error::Protocol("Early Break threshold is already set".into()));
        }
        self.threshold = Some(value);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    BaseTrain,
    FineTune,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::BaseTrain => "base_train",
            Stage::FineTune => "fine_tune",
        })
    }
}

/// Loss and training accuracy (percent) of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub task: usize,
    pub stage: Stage,
    pub epochs: Vec<EpochStats>,
    /// True when Early Break ended the stage before its cap.
    pub stopped_early: bool,
}

/// Runs Base Train epochs with the stopping rule, independent of how an
/// epoch is trained.
///
/// The initial task runs exactly `N` epochs and records its best accuracy as
/// the threshold. Later tasks run at most `floor(N / 2)` epochs and stop at
/// the end of the first epoch whose accuracy reaches the threshold. With
/// Early Break disabled, later tasks run `N` epochs.
pub fn drive_base_train<F>(plan: &mut StagePlan, task: usize, is_initial: bool, mut run_epoch: F) -> Result<EpochLog>
where
    F: FnMut(usize) -> Result<EpochStats>,
{
    let mut log = EpochLog { task, stage: Stage::BaseTrain, epochs: Vec::new(), stopped_early: false };
    if is_initial {
        for e in 0..plan.initial_epochs {
            log.epochs.push(run_epoch(e)?);
        }
        let best = log.epochs.iter().map(|s| s.accuracy).fold(f64::NEG_INFINITY, f64::max);
        plan.set_threshold(best)?;
        return Ok(log);
    }
    let threshold = plan.threshold.ok_or_else(|| {
        Error::Protocol(format!("task {task} Base Train started before the threshold was set"))
    })?;
    let cap = if plan.early_break { plan.incremental_cap() } else { plan.initial_epochs };
    for e in 0..cap {
        let stats = run_epoch(e)?;
        log.epochs.push(stats);
        if plan.early_break && stats.accuracy >= threshold {
            log.stopped_early = e + 1 < cap;
            break;
        }
    }
    Ok(log)
}

/// Fine Tune always runs exactly `finetune_epochs` epochs.
pub fn drive_fine_tune<F>(plan: &StagePlan, task: usize, mut run_epoch: F) -> Result<EpochLog>
where
    F: FnMut(usize) -> Result<EpochStats>,
{
    let epochs = (0..plan.finetune_epochs).map(&mut run_epoch).collect::<Result<Vec<_>>>()?;
    Ok(EpochLog { task, stage: Stage::FineTune, epochs, stopped_early: false })
}

/// Where a training sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    /// Current task's data at full frame count.
    New,
    /// Aligned exemplar from the memory store.
    Replay,
}

/// Classes and sample counts actually fed to one stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageAudit {
    pub task: usize,
    pub stage: Option<Stage>,
    pub new_classes: BTreeSet<usize>,
    pub replay_classes: BTreeSet<usize>,
    pub new_samples: usize,
    pub replay_samples: usize,
}

impl StageAudit {
    fn new(task: usize, stage: Stage) -> Self {
        Self { task, stage: Some(stage), ..Default::default() }
    }

    fn record(&mut self, provenance: Provenance, class: usize) {
        match provenance {
            Provenance::New => {
                self.new_classes.insert(class);
                self.new_samples += 1;
            }
            Provenance::Replay => {
                self.replay_classes.insert(class);
                self.replay_samples += 1;
            }
        }
    }
}

/// Optimisation settings shared by both stages of a task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_grad_norm: Option<f64>,
    pub distillation: Option<Distillation>,
    pub alignment: Alignment,
}

fn train_epoch(
    model: &mut ModelState,
    pool: &[(Provenance, FrameSequence)],
    order: &[usize],
    settings: &TrainSettings,
    audit: &mut StageAudit,
) -> Result<EpochStats> {
    let distill = settings.distillation.filter(|_| model.prev_snapshot().is_some());
    let mut loss = 0.0;
    let mut accuracy = 0.0;
    let mut batches = 0;
    for chunk in order.chunks(settings.batch_size) {
        let batch: Vec<FrameSequence> = chunk
            .iter()
            .map(|&i| {
                let (p, s) = &pool[i];
                audit.record(*p, s.label());
                s.clone()
            })
            .collect();
        let report = model.train_step_clipped(&batch, distill, settings.learning_rate, settings.max_grad_norm)?;
        loss += report.loss;
        accuracy += 100.0 * report.correct as f64 / report.count as f64;
        batches += 1;
    }
    if batches == 0 {
        return Err(Error::Protocol("epoch with no training samples".into()));
    }
    Ok(EpochStats { loss: loss / batches as f64, accuracy: accuracy / batches as f64 })
}

/// Base Train of one task on `task_data` (full frames) plus aligned replay of
/// every stored exemplar. Returns the epoch log and the stage audit.
#[allow(clippy::too_many_arguments)]
pub fn run_base_train(
    model: &mut ModelState,
    task: usize,
    task_data: &[FrameSequence],
    store: &ExemplarStore,
    plan: &mut StagePlan,
    is_initial: bool,
    settings: &TrainSettings,
    rng: &mut ChaCha8Rng,
) -> Result<(EpochLog, StageAudit)> {
    let mut pool: Vec<(Provenance, FrameSequence)> =
        task_data.iter().map(|s| (Provenance::New, s.clone())).collect();
    pool.extend(store.aligned(settings.alignment)?.into_iter().map(|s| (Provenance::Replay, s)));
    if pool.is_empty() {
        return Err(Error::Protocol(format!("task {task} has no Base Train data")));
    }
    let mut audit = StageAudit::new(task, Stage::BaseTrain);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let log = drive_base_train(plan, task, is_initial, |_| {
        order.shuffle(rng);
        train_epoch(model, &pool, &order, settings, &mut audit)
    })?;
    Ok((log, audit))
}

/// Fine Tune on aligned exemplars only, class-balanced.
///
/// With equal per-class counts each epoch is a permutation of the store;
/// otherwise samples are drawn with probability inversely proportional to
/// their class size, so every class contributes equally in expectation.
pub fn run_fine_tune(
    model: &mut ModelState,
    task: usize,
    store: &ExemplarStore,
    plan: &StagePlan,
    settings: &TrainSettings,
    rng: &mut ChaCha8Rng,
) -> Result<(EpochLog, StageAudit)> {
    if store.is_empty() {
        return Err(Error::Protocol(format!("task {task} Fine Tune has an empty memory store")));
    }
    let pool: Vec<(Provenance, FrameSequence)> =
        store.aligned(settings.alignment)?.into_iter().map(|s| (Provenance::Replay, s)).collect();
    let weights = fine_tune_weights(store);
    let balanced = weights.iter().all(|w| *w == weights[0]);
    let sampler = WeightedIndex::new(&weights)
        .map_err(|e| Error::Protocol(format!("class balancing failed: {e}")))?;
    let mut audit = StageAudit::new(task, Stage::FineTune);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let log = drive_fine_tune(plan, task, |_| {
        if balanced {
            order.shuffle(rng);
        } else {
            order.iter_mut().for_each(|o| *o = sampler.sample(rng));
        }
        train_epoch(model, &pool, &order, settings, &mut audit)
    })?;
    Ok((log, audit))
}

/// Per-exemplar sampling weight `1 / n_class`, in store order.
pub fn fine_tune_weights(store: &ExemplarStore) -> Vec<f64> {
    store
        .classes()
        .flat_map(|c| {
            let n = store.class(c).len();
            std::iter::repeat_n(1.0 / n as f64, n)
        })
        .collect()
}

/// Teacher identity check for one incremental task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub task: usize,
    /// Digest of the distillation teacher used during this task.
    pub teacher_digest: String,
    /// Digest of the model at the end of the previous task's Fine Tune.
    pub previous_fine_tune_digest: String,
}

/// Train/test split with labels in the dataset's own class ids.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub num_classes: usize,
    pub train: Vec<FrameSequence>,
    pub test: Vec<FrameSequence>,
}

impl ExperimentData {
    /// Synthetic data or an ingested frame directory, split per class: the
    /// first `train_per_class` videos train, the last `test_per_class` test.
    pub fn from_config(config: &ExperimentConfig) -> Result<Self> {
        let (num_classes, all) = match &config.data_root {
            None => {
                let spec = SyntheticSpec {
                    num_classes: config.num_classes,
                    samples_per_class: config.train_per_class + config.test_per_class,
                    frames: config.frames,
                    channels: config.channels,
                    height: config.height,
                    width: config.width,
                    seed: config.dataset_seed,
                };
                (config.num_classes, generate_synthetic_dataset(&spec)?)
            }
            Some(root) => {
                let dir = load_frame_directory(root, config.frames)?;
                if dir.class_names.len() != config.num_classes {
                    return Err(Error::Config(format!(
                        "{} has {} classes, config says {}",
                        root.display(),
                        dir.class_names.len(),
                        config.num_classes
                    )));
                }
                (dir.class_names.len(), dir.sequences)
            }
        };
        let mut per_class: BTreeMap<usize, Vec<FrameSequence>> = BTreeMap::new();
        for s in all {
            per_class.entry(s.label()).or_default().push(s);
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (class, videos) in per_class {
            if videos.len() <= config.test_per_class {
                return Err(Error::Config(format!(
                    "class {class} has {} videos, needs more than test_per_class = {}",
                    videos.len(),
                    config.test_per_class
                )));
            }
            let split = videos.len() - config.test_per_class;
            let n_train = split.min(config.train_per_class);
            let mut it = videos.into_iter();
            train.extend(it.by_ref().take(split).take(n_train));
            test.extend(it.skip(split.saturating_sub(n_train)));
        }
        Ok(Self { num_classes, train, test })
    }
}

/// Everything a single-seed run produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub schedule: TaskSchedule,
    pub metrics: RunMetrics,
    pub threshold: Option<f64>,
    pub epoch_logs: Vec<EpochLog>,
    pub audits: Vec<StageAudit>,
    pub snapshots: Vec<SnapshotRecord>,
    /// Exemplars stored per head index.
    pub memory_counts: BTreeMap<usize, usize>,
}

impl RunReport {
    /// Stage data-access rules and teacher identity over the whole run.
    pub fn verify_discipline(&self) -> Result<()> {
        let bounds: Vec<(usize, usize)> = (0..self.schedule.num_tasks())
            .map(|k| {
                let end = self.schedule.classes_seen(k);
                (end - self.schedule.groups[k].len(), end)
            })
            .collect();
        let fail = |msg: String| Err(Error::Protocol(msg));
        for a in &self.audits {
            let (start, end) = bounds[a.task];
            match a.stage {
                Some(Stage::BaseTrain) => {
                    if a.new_samples == 0 || a.new_classes.iter().any(|c| *c < start || *c >= end) {
                        return fail(format!(
                            "task {} Base Train saw new-data classes {:?} outside {start}..{end}",
                            a.task, a.new_classes
                        ));
                    }
                    if a.replay_classes.iter().any(|c| *c >= start) {
                        return fail(format!(
                            "task {} Base Train replayed classes {:?} not from earlier tasks",
                            a.task, a.replay_classes
                        ));
                    }
                }
                Some(Stage::FineTune) => {
                    if a.new_samples != 0 {
                        return fail(format!("task {} Fine Tune used non-exemplar data", a.task));
                    }
                    if a.replay_classes.iter().any(|c| *c >= end) {
                        return fail(format!(
                            "task {} Fine Tune replayed unseen classes {:?}",
                            a.task, a.replay_classes
                        ));
                    }
                }
                None => return fail(format!("task {} audit without a stage", a.task)),
            }
        }
        for s in &self.snapshots {
            if s.teacher_digest != s.previous_fine_tune_digest {
                return fail(format!(
                    "task {} distilled from a model other than task {}'s Fine Tune result",
                    s.task,
                    s.task - 1
                ));
            }
        }
        if self.snapshots.len() + 1 != self.schedule.num_tasks().max(1) {
            return fail("missing snapshot records".into());
        }
        Ok(())
    }
}

fn relabel(data: &[FrameSequence], schedule: &TaskSchedule) -> Result<Vec<FrameSequence>> {
    data.iter()
        .map(|s| {
            let idx = schedule.head_index(s.label()).ok_or_else(|| {
                Error::Config(format!("label {} is not in the class schedule", s.label()))
            })?;
            Ok(s.clone().with_label(idx))
        })
        .collect()
}

fn accuracy(predictions: &[usize], samples: &[&FrameSequence]) -> f64 {
    let hits = predictions.iter().zip(samples).filter(|(p, s)| **p == s.label()).count();
    100.0 * hits as f64 / samples.len() as f64
}

/// Runs the whole class-incremental protocol for one seed. The seed fixes the
/// class order, the initialisation and every shuffle. When `out_dir` is given,
/// per-task checkpoints, the epoch log and the final memory store are written
/// there.
pub fn run_incremental_experiment(
    config: &ExperimentConfig,
    data: &ExperimentData,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<RunReport> {
    config.validate()?;
    let config = config.effective();
    let schedule =
        make_schedule(data.num_classes, config.initial_classes, config.classes_per_stage, seed)?;
    let train = relabel(&data.train, &schedule)?;
    let test = relabel(&data.test, &schedule)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut model = ModelState::new(config.backbone(), &mut rng)?;
    let mut store = ExemplarStore::new(
        config.frames,
        config.sparse_frames,
        config.frame_bytes(),
        config.budget_bytes_per_class,
        config.quantize_exemplars,
    )?;
    let mut plan = StagePlan::new(config.initial_epochs, config.finetune_epochs, config.early_break);
    let sparse = config.sparse_inference.then_some(SparseInference {
        sparse_frames: config.sparse_frames,
        alignment: config.alignment,
    });

    let mut metrics = RunMetrics::default();
    let mut epoch_logs = Vec::new();
    let mut audits = Vec::new();
    let mut snapshots = Vec::new();
    let mut memory_counts = BTreeMap::new();
    let mut previous_digest: Option<String> = None;

    for (k, group) in schedule.groups.iter().enumerate() {
        let end = schedule.classes_seen(k);
        let start = end - group.len();
        model.expand_head(group.len(), &mut rng)?;
        let settings = TrainSettings {
            learning_rate: if k == 0 {
                config.learning_rate
            } else {
                config.incremental_learning_rate.unwrap_or(config.learning_rate)
            },
            batch_size: config.batch_size,
            max_grad_norm: config.max_grad_norm,
            distillation: (config.distill_lambda > 0.0).then(|| config.distillation()),
            alignment: config.alignment,
        };
        if let Some(prev) = &previous_digest {
            let teacher = model.prev_snapshot().map(|p| p.digest()).unwrap_or_default();
            snapshots.push(SnapshotRecord {
                task: k,
                teacher_digest: teacher,
                previous_fine_tune_digest: prev.clone(),
            });
        }

        let task_train: Vec<FrameSequence> =
            train.iter().filter(|s| (start..end).contains(&s.label())).cloned().collect();
        let (log, audit) =
            run_base_train(&mut model, k, &task_train, &store, &mut plan, k == 0, &settings, &mut rng)?;
        log::info!(
            "seed {seed} task {k}: base train {} epochs (last acc {:.1})",
            log.epochs.len(),
            log.epochs.last().map_or(0.0, |e| e.accuracy)
        );
        epoch_logs.push(log);
        audits.push(audit);

        let classes: Vec<usize> = (start..end).collect();
        let stored = build_memory_set(&mut store, &task_train, |s| model.embed(s), &classes)?;
        memory_counts.extend(stored);

        let (log, audit) = run_fine_tune(&mut model, k, &store, &plan, &settings, &mut rng)?;
        epoch_logs.push(log);
        audits.push(audit);
        let digest = model.params().digest();
        model.take_snapshot();
        previous_digest = Some(digest);

        let seen: Vec<&FrameSequence> = test.iter().filter(|s| s.label() < end).collect();
        let seen_owned: Vec<FrameSequence> = seen.iter().map(|s| (*s).clone()).collect();
        let cnn = predict_cnn(&model, &seen_owned, sparse)?;
        let means = class_means(&model, &store, config.alignment)?;
        let nme = predict_nme(&model, &means, &seen_owned, sparse)?;
        let mut cnn_row = Vec::with_capacity(k + 1);
        let mut nme_row = Vec::with_capacity(k + 1);
        for j in 0..=k {
            let hi = schedule.classes_seen(j);
            let lo = hi - schedule.groups[j].len();
            let idx: Vec<usize> =
                (0..seen.len()).filter(|&i| (lo..hi).contains(&seen[i].label())).collect();
            let subset: Vec<&FrameSequence> = idx.iter().map(|&i| seen[i]).collect();
            if subset.is_empty() {
                return Err(Error::Evaluation(format!("task {j} has no test samples")));
            }
            let pick = |p: &[usize]| idx.iter().map(|&i| p[i]).collect::<Vec<_>>();
            cnn_row.push(accuracy(&pick(&cnn), &subset));
            nme_row.push(accuracy(&pick(&nme), &subset));
        }
        metrics.cnn.acc.push_row(cnn_row)?;
        metrics.nme.acc.push_row(nme_row)?;
        metrics.cnn.overall.push(accuracy(&cnn, &seen));
        metrics.nme.overall.push(accuracy(&nme, &seen));

        if let Some(dir) = out_dir {
            save_checkpoint(&model, &dir.join("checkpoints"), &format!("task_{k}"))?;
        }
    }

    let report = RunReport {
        seed,
        schedule,
        metrics,
        threshold: plan.threshold(),
        epoch_logs,
        audits,
        snapshots,
        memory_counts,
    };
    if let Some(dir) = out_dir {
        write_epoch_log(&report, &dir.join("epochs.csv"))?;
        save_store(&store, &dir.join("memory"))?;
    }
    Ok(report)
}

fn write_epoch_log(report: &RunReport, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "task,stage,epoch,loss,train_acc").expect("write to vec");
    for log in &report.epoch_logs {
        for (e, s) in log.epochs.iter().enumerate() {
            writeln!(out, "{},{},{},{:.6},{:.4}", log.task, log.stage, e + 1, s.loss, s.accuracy)
                .expect("write to vec");
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scripted(accs: &[f64]) -> impl FnMut(usize) -> Result<EpochStats> + '_ {
        |e| Ok(EpochStats { loss: 1.0, accuracy: accs[e.min(accs.len() - 1)] })
    }

    #[test]
    fn initial_task_runs_all_epochs_and_sets_threshold() {
        let mut plan = StagePlan::new(50, 30, true);
        let accs: Vec<f64> = (0..50).map(|e| if e == 10 { 99.0 } else { 100.0 * (e % 7) as f64 / 7.0 }).collect();
        let log = drive_base_train(&mut plan, 0, true, scripted(&accs)).unwrap();
        assert_eq!(log.epochs.len(), 50);
        assert_eq!(plan.threshold(), Some(99.0));
        assert!(drive_base_train(&mut plan, 0, true, scripted(&accs)).is_err());
    }

    #[test]
    fn incremental_stops_at_first_crossing() {
        let mut plan = StagePlan::new(50, 30, true);
        plan.set_threshold(80.0).unwrap();
        let log = drive_base_train(&mut plan, 1, false, scripted(&[60.0, 72.0, 81.0, 90.0])).unwrap();
        assert_eq!(log.epochs.len(), 3);
        assert!(log.stopped_early);

        let mut zero = StagePlan::new(50, 30, true);
        zero.set_threshold(0.0).unwrap();
        assert_eq!(drive_base_train(&mut zero, 1, false, scripted(&[0.0])).unwrap().epochs.len(), 1);

        let never = drive_base_train(&mut plan, 2, false, scripted(&[10.0])).unwrap();
        assert_eq!(never.epochs.len(), 25);
        assert!(!never.stopped_early);
    }

    #[test]
    fn incremental_without_threshold_is_an_error() {
        let mut plan = StagePlan::new(10, 5, true);
        assert!(matches!(
            drive_base_train(&mut plan, 1, false, scripted(&[1.0])),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn disabled_early_break_runs_full_budget() {
        let mut plan = StagePlan::new(10, 5, false);
        plan.set_threshold(0.0).unwrap();
        assert_eq!(drive_base_train(&mut plan, 1, false, scripted(&[100.0])).unwrap().epochs.len(), 10);
    }

    #[test]
    fn fine_tune_never_exits_early() {
        let plan = StagePlan::new(50, 30, true);
        let log = drive_fine_tune(&plan, 0, scripted(&[100.0])).unwrap();
        assert_eq!(log.epochs.len(), 30);
    }
}
