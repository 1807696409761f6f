//! Test-time classifiers (softmax head and nearest mean of exemplars) and
//! the accuracy/forgetting metrics over a lower-triangular accuracy matrix.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{argmax, ModelState};
use crate::dataset::FrameSequence;
use crate::error::{Error, Result};
use crate::memory::{align, normalize, sparse_extract, Alignment, ExemplarStore};

/// Decimate each test video to `sparse_frames` and re-align before inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparseInference {
    pub sparse_frames: usize,
    pub alignment: Alignment,
}

fn prepare(seq: &FrameSequence, sparse: Option<SparseInference>) -> Result<FrameSequence> {
    match sparse {
        None => Ok(seq.clone()),
        Some(s) => align(&sparse_extract(seq, s.sparse_frames)?, seq.len(), s.alignment),
    }
}

fn percent(predictions: &[usize], test_set: &[FrameSequence]) -> Result<f64> {
    if test_set.is_empty() {
        return Err(Error::Evaluation("empty test set".into()));
    }
    let hits = predictions.iter().zip(test_set).filter(|(p, s)| **p == s.label()).count();
    Ok(100.0 * hits as f64 / test_set.len() as f64)
}

/// Top-1 predictions of the softmax head.
pub fn predict_cnn(
    model: &ModelState,
    test_set: &[FrameSequence],
    sparse: Option<SparseInference>,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(test_set.len());
    for seq in test_set {
        if seq.label() >= model.num_classes() {
            return Err(Error::Evaluation(format!(
                "test label {} is not covered by a head of width {}",
                seq.label(),
                model.num_classes()
            )));
        }
        let input = prepare(seq, sparse)?;
        let logits = model.forward_sequences(std::slice::from_ref(&input))?.logits;
        out.push(argmax(logits.row(0).as_slice().expect("contiguous row")).expect("non-empty head"));
    }
    Ok(out)
}

pub fn classify_cnn(
    model: &ModelState,
    test_set: &[FrameSequence],
    sparse: Option<SparseInference>,
) -> Result<f64> {
    percent(&predict_cnn(model, test_set, sparse)?, test_set)
}

/// Unit-normalised mean of the unit-normalised aligned-exemplar embeddings, per class.
pub fn class_means(
    model: &ModelState,
    store: &ExemplarStore,
    alignment: Alignment,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mut means = BTreeMap::new();
    for class in store.classes() {
        let exemplars = store.aligned_class(class, alignment)?;
        if exemplars.is_empty() {
            continue;
        }
        let mut mean = vec![0.0; model.feature_dim()];
        for e in &exemplars {
            for (m, f) in mean.iter_mut().zip(normalize(model.embed(e)?)) {
                *m += f;
            }
        }
        let n = exemplars.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        means.insert(class, normalize(mean));
    }
    Ok(means)
}

/// Class whose mean is closest in Euclidean distance; ties go to the smaller id.
pub fn nearest_mean(means: &BTreeMap<usize, Vec<f64>>, feature: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (&class, mean) in means {
        let d: f64 = mean.iter().zip(feature).map(|(m, f)| (m - f) * (m - f)).sum();
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((class, d));
        }
    }
    best.map(|(c, _)| c)
}

pub fn predict_nme(
    model: &ModelState,
    means: &BTreeMap<usize, Vec<f64>>,
    test_set: &[FrameSequence],
    sparse: Option<SparseInference>,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(test_set.len());
    for seq in test_set {
        if !means.contains_key(&seq.label()) {
            return Err(Error::Evaluation(format!(
                "class {} has no exemplars for the nearest-mean classifier",
                seq.label()
            )));
        }
        let feature = normalize(model.embed(&prepare(seq, sparse)?)?);
        out.push(nearest_mean(means, &feature).expect("at least one class mean"));
    }
    Ok(out)
}

pub fn classify_nme(
    model: &ModelState,
    store: &ExemplarStore,
    alignment: Alignment,
    test_set: &[FrameSequence],
    sparse: Option<SparseInference>,
) -> Result<f64> {
    let means = class_means(model, store, alignment)?;
    percent(&predict_nme(model, &means, test_set, sparse)?, test_set)
}

/// Lower-triangular matrix of accuracies `a[k][j]` in percent, `j <= k`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    /// Appends row `k`, which must hold exactly `k + 1` values in `[0, 100]`.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let k = self.rows.len();
        if row.len() != k + 1 {
            return Err(Error::Evaluation(format!(
                "row {k} needs {} entries, got {}",
                k + 1,
                row.len()
            )));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=100.0).contains(*v)) {
            return Err(Error::Evaluation(format!("accuracy {v} outside [0, 100]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row(&self, k: usize) -> Option<&[f64]> {
        self.rows.get(k).map(Vec::as_slice)
    }

    pub fn get(&self, k: usize, j: usize) -> Option<f64> {
        self.rows.get(k).and_then(|r| r.get(j)).copied()
    }

    /// `ACC_k` for every task.
    pub fn average_accuracies(&self) -> Vec<f64> {
        self.rows.iter().map(|r| average_accuracy(r).expect("rows are non-empty")).collect()
    }

    /// `FOR_k` for every task; `None` for the initial task.
    pub fn average_forgettings(&self) -> Vec<Option<f64>> {
        (0..self.rows.len()).map(|k| average_forgetting(self, k).ok()).collect()
    }

    /// Row `k` holds `f[k][j]` for `j < k`.
    pub fn forgetting_matrix(&self) -> Vec<Vec<f64>> {
        (0..self.rows.len())
            .map(|k| (0..k).map(|j| forgetting(self, k, j).expect("j < k")).collect())
            .collect()
    }
}

/// Arithmetic mean of one row of the accuracy matrix.
pub fn average_accuracy(row: &[f64]) -> Result<f64> {
    if row.is_empty() {
        return Err(Error::Evaluation("average accuracy of an empty row".into()));
    }
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

/// `f[k][j] = max_{l in j..k} a[l][j] - a[k][j]`; negative when accuracy improved.
pub fn forgetting(acc: &AccuracyMatrix, k: usize, j: usize) -> Result<f64> {
    if j >= k {
        return Err(Error::Evaluation(format!("forgetting needs j < k, got j={j}, k={k}")));
    }
    let current = acc
        .get(k, j)
        .ok_or_else(|| Error::Evaluation(format!("a[{k}][{j}] is not defined")))?;
    let best = (j..k)
        .map(|l| acc.get(l, j))
        .try_fold(f64::NEG_INFINITY, |m, v| v.map(|v| m.max(v)))
        .ok_or_else(|| Error::Evaluation(format!("column {j} is incomplete before row {k}")))?;
    Ok(best - current)
}

/// Mean of `f[k][j]` over every earlier task `j < k`.
pub fn average_forgetting(acc: &AccuracyMatrix, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Evaluation("average forgetting is undefined for the initial task".into()));
    }
    let total = (0..k).map(|j| forgetting(acc, k, j)).sum::<Result<f64>>()?;
    Ok(total / k as f64)
}

/// Accuracy matrix plus the overall accuracy on all seen classes after each task.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub acc: AccuracyMatrix,
    /// Accuracy over the union of all seen test sets after task `k`.
    pub overall: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub cnn: ClassifierMetrics,
    pub nme: ClassifierMetrics,
}

impl RunMetrics {
    pub fn num_tasks(&self) -> usize {
        self.cnn.acc.num_tasks()
    }
}
