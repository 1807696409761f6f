//! Exemplar memory: herding selection, sparse frame extraction under a
//! per-class byte budget, and frame alignment back to the network input length.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array4, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{uniform_indices, FrameSequence};
use crate::error::{Error, Result};

/// How stored sparse frames are expanded back to `F` frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    /// Evenly weighted blends between consecutive stored frames.
    Uniform,
    /// Each stored frame repeated `F / F_bar` times.
    Repeated,
    /// No expansion; only valid when nothing was dropped.
    None,
}

impl std::fmt::Display for Alignment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Alignment::Uniform => "uniform",
            Alignment::Repeated => "repeated",
            Alignment::None => "none",
        })
    }
}

/// Bytes charged for one stored frame: one byte per channel pixel.
pub fn frame_bytes(channels: usize, height: usize, width: usize) -> usize {
    channels * height * width
}

/// How many videos of `sparse_frames` frames fit in `budget` bytes.
pub fn capacity(budget: usize, sparse_frames: usize, frame_bytes: usize) -> usize {
    budget / (sparse_frames * frame_bytes)
}

/// Greedy herding: at every step add the candidate that brings the running
/// mean of the selected features closest to `class_mean`.
///
/// Returns `min(m, n)` distinct indices in selection order. Ties go to the
/// smallest index.
pub fn herding_select(features: ArrayView2<'_, f64>, class_mean: &[f64], m: usize) -> Result<Vec<usize>> {
    let (n, d) = features.dim();
    if d == 0 {
        return Err(Error::Memory("herding needs features with at least one dimension".into()));
    }
    if n == 0 || m == 0 {
        return Err(Error::Memory(format!("herding needs n >= 1 and m >= 1, got n={n}, m={m}")));
    }
    if class_mean.len() != d {
        return Err(Error::Shape(format!(
            "class mean has {} dimensions, features have {d}",
            class_mean.len()
        )));
    }
    let mut selected = Vec::with_capacity(m.min(n));
    let mut taken = vec![false; n];
    let mut running = vec![0.0; d];
    for step in 1..=m.min(n) {
        let inv = 1.0 / step as f64;
        let mut best: Option<(usize, f64)> = None;
        for (i, row) in features.axis_iter(Axis(0)).enumerate() {
            if taken[i] {
                continue;
            }
            let dist: f64 = class_mean
                .iter()
                .zip(&running)
                .zip(row.iter())
                .map(|((mu, s), f)| {
                    let diff = mu - (s + f) * inv;
                    diff * diff
                })
                .sum();
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((i, dist));
            }
        }
        let (pick, _) = best.expect("an untaken candidate remains");
        taken[pick] = true;
        for (s, f) in running.iter_mut().zip(features.row(pick)) {
            *s += f;
        }
        selected.push(pick);
    }
    Ok(selected)
}

/// Keeps `sparse_frames` frames at `floor(i * T / sparse_frames)`.
pub fn sparse_extract(video: &FrameSequence, sparse_frames: usize) -> Result<FrameSequence> {
    if sparse_frames == 0 || sparse_frames > video.len() {
        return Err(Error::Memory(format!(
            "cannot keep {sparse_frames} of {} frames of `{}`",
            video.len(),
            video.source_id()
        )));
    }
    Ok(video.select_frames(&uniform_indices(video.len(), sparse_frames)))
}

fn expansion(sparse: &FrameSequence, frames: usize) -> Result<usize> {
    let stored = sparse.len();
    if frames == 0 || !frames.is_multiple_of(stored) {
        return Err(Error::Memory(format!(
            "{frames} frames is not a multiple of the {stored} stored frames"
        )));
    }
    Ok(frames / stored)
}

/// Blends `r = F / F_bar` evenly weighted frames from each stored frame
/// towards the next; the tail after the last stored frame repeats it.
///
/// For `r = 2`: `I1, (I1 + I2) / 2, I2, ..., I_last, I_last`.
pub fn align_uniform(sparse: &FrameSequence, frames: usize) -> Result<FrameSequence> {
    let r = expansion(sparse, frames)?;
    let src = sparse.frames();
    let (c, h, w) = sparse.frame_shape();
    let mut out = Array4::<f32>::zeros((frames, c, h, w));
    let stored = sparse.len();
    for i in 0..stored {
        let a = src.index_axis(Axis(0), i);
        let b = src.index_axis(Axis(0), (i + 1).min(stored - 1));
        for s in 0..r {
            let weight = s as f32 / r as f32;
            let mut dst = out.index_axis_mut(Axis(0), i * r + s);
            if i + 1 == stored || s == 0 {
                dst.assign(&a);
            } else {
                ndarray::Zip::from(&mut dst)
                    .and(&a)
                    .and(&b)
                    .for_each(|d, &x, &y| *d = x + weight * (y - x));
            }
        }
    }
    Ok(FrameSequence::from_parts(out, sparse.label(), sparse.source_id().to_owned()))
}

/// Repeats each stored frame `F / F_bar` times.
pub fn align_repeated(sparse: &FrameSequence, frames: usize) -> Result<FrameSequence> {
    let r = expansion(sparse, frames)?;
    let indices: Vec<usize> = (0..frames).map(|t| t / r).collect();
    Ok(sparse.select_frames(&indices))
}

pub fn align(sparse: &FrameSequence, frames: usize, alignment: Alignment) -> Result<FrameSequence> {
    match alignment {
        Alignment::Uniform => align_uniform(sparse, frames),
        Alignment::Repeated => align_repeated(sparse, frames),
        Alignment::None if sparse.len() == frames => Ok(sparse.clone()),
        Alignment::None => Err(Error::Memory(format!(
            "alignment `none` cannot expand {} frames to {frames}",
            sparse.len()
        ))),
    }
}

fn quantize(seq: FrameSequence) -> FrameSequence {
    let label = seq.label();
    let id = seq.source_id().to_owned();
    let frames = seq.into_frames().mapv(|v| (v * 255.0).round() / 255.0);
    FrameSequence::from_parts(frames, label, id)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredExemplar {
    pub sequence: FrameSequence,
    /// Frame indices kept from the source video.
    pub frame_indices: Vec<usize>,
}

/// Per-class sparse exemplar sets under a per-class byte budget.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarStore {
    frames: usize,
    sparse_frames: usize,
    frame_bytes: usize,
    budget_per_class: usize,
    quantize: bool,
    per_class: BTreeMap<usize, Vec<StoredExemplar>>,
}

impl ExemplarStore {
    pub fn new(
        frames: usize,
        sparse_frames: usize,
        frame_bytes: usize,
        budget_per_class: usize,
        quantize: bool,
    ) -> Result<Self> {
        if sparse_frames == 0 || frames == 0 || !frames.is_multiple_of(sparse_frames) {
            return Err(Error::Config(format!(
                "stored frame count {sparse_frames} must divide the input frame count {frames}"
            )));
        }
        if frame_bytes == 0 {
            return Err(Error::Config("frame_bytes must be >= 1".into()));
        }
        Ok(Self {
            frames,
            sparse_frames,
            frame_bytes,
            budget_per_class,
            quantize,
            per_class: BTreeMap::new(),
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn sparse_frames(&self) -> usize {
        self.sparse_frames
    }

    pub fn frame_bytes(&self) -> usize {
        self.frame_bytes
    }

    pub fn budget_per_class(&self) -> usize {
        self.budget_per_class
    }

    pub fn quantized(&self) -> bool {
        self.quantize
    }

    /// Maximum number of videos stored for any one class.
    pub fn capacity_per_class(&self) -> usize {
        capacity(self.budget_per_class, self.sparse_frames, self.frame_bytes)
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.per_class.keys().copied()
    }

    pub fn contains_class(&self, class: usize) -> bool {
        self.per_class.contains_key(&class)
    }

    pub fn class(&self, class: usize) -> &[StoredExemplar] {
        self.per_class.get(&class).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn bytes_used(&self, class: usize) -> usize {
        self.class(class).len() * self.sparse_frames * self.frame_bytes
    }

    pub fn total_exemplars(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_exemplars() == 0
    }

    /// Stores `ranked` (full-length videos, best first) for `class`, keeping
    /// as many as the budget allows. Returns the number stored.
    pub fn insert_class(&mut self, class: usize, ranked: &[FrameSequence]) -> Result<usize> {
        if self.per_class.contains_key(&class) {
            return Err(Error::Memory(format!("class {class} already has a memory set")));
        }
        let keep = self.capacity_per_class().min(ranked.len());
        if keep == 0 {
            log::warn!(
                "budget of {} bytes holds no {}-frame exemplar for class {class}",
                self.budget_per_class,
                self.sparse_frames
            );
        }
        let mut stored = Vec::with_capacity(keep);
        for video in &ranked[..keep] {
            if video.frame_len() != self.frame_bytes {
                return Err(Error::Shape(format!(
                    "`{}` has {} values per frame, store charges {} bytes per frame",
                    video.source_id(),
                    video.frame_len(),
                    self.frame_bytes
                )));
            }
            if video.label() != class {
                return Err(Error::Memory(format!(
                    "`{}` is labelled {}, not {class}",
                    video.source_id(),
                    video.label()
                )));
            }
            let frame_indices = uniform_indices(video.len(), self.sparse_frames);
            let mut sequence = sparse_extract(video, self.sparse_frames)?;
            if self.quantize {
                sequence = quantize(sequence);
            }
            stored.push(StoredExemplar { sequence, frame_indices });
        }
        self.per_class.insert(class, stored);
        Ok(keep)
    }

    /// Every stored exemplar aligned to `F` frames, grouped by class id.
    pub fn aligned(&self, alignment: Alignment) -> Result<Vec<FrameSequence>> {
        self.per_class
            .values()
            .flatten()
            .map(|e| align(&e.sequence, self.frames, alignment))
            .collect()
    }

    pub fn aligned_class(&self, class: usize, alignment: Alignment) -> Result<Vec<FrameSequence>> {
        self.class(class).iter().map(|e| align(&e.sequence, self.frames, alignment)).collect()
    }
}

/// Builds memory sets for `class_ids` from `task_data`.
///
/// Features are L2-normalised before herding against their class mean.
pub fn build_memory_set<F>(
    store: &mut ExemplarStore,
    task_data: &[FrameSequence],
    mut features_fn: F,
    class_ids: &[usize],
) -> Result<BTreeMap<usize, usize>>
where
    F: FnMut(&FrameSequence) -> Result<Vec<f64>>,
{
    if let Some(dup) = class_ids.iter().find(|c| store.contains_class(**c)) {
        return Err(Error::Memory(format!("class {dup} already has a memory set")));
    }
    let mut stored = BTreeMap::new();
    for &class in class_ids {
        let candidates: Vec<&FrameSequence> =
            task_data.iter().filter(|s| s.label() == class).collect();
        if candidates.is_empty() {
            return Err(Error::Memory(format!("no training videos for class {class}")));
        }
        let cap = store.capacity_per_class();
        let ranked: Vec<FrameSequence> = if cap == 0 {
            Vec::new()
        } else {
            let mut rows = Vec::with_capacity(candidates.len());
            for c in &candidates {
                rows.push(normalize(features_fn(c)?));
            }
            let d = rows[0].len();
            let features = ndarray::Array2::from_shape_vec(
                (rows.len(), d),
                rows.iter().flatten().copied().collect(),
            )
            .map_err(|_| Error::Shape("feature rows differ in length".into()))?;
            let mean: Vec<f64> =
                features.mean_axis(Axis(0)).expect("non-empty candidates").to_vec();
            herding_select(features.view(), &mean, cap)?
                .into_iter()
                .map(|i| candidates[i].clone())
                .collect()
        };
        stored.insert(class, store.insert_class(class, &ranked)?);
    }
    Ok(stored)
}

pub(crate) fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Aligned exemplars split into batches; every exemplar appears exactly once.
pub fn replay_batches(
    store: &ExemplarStore,
    alignment: Alignment,
    batch_size: usize,
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<Vec<Vec<FrameSequence>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut all = store.aligned(alignment)?;
    if let Some(rng) = rng {
        all.shuffle(rng);
    }
    Ok(all.chunks(batch_size).map(<[FrameSequence]>::to_vec).collect())
}

pub const STORE_FORMAT: &str = "vcil-exemplars";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct StoreHeader {
    format: String,
    version: u32,
    frames: usize,
    sparse_frames: usize,
    frame_bytes: usize,
    budget_per_class: usize,
    quantized: bool,
    classes: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassManifest {
    class: usize,
    exemplars: Vec<ExemplarEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ExemplarEntry {
    source_id: String,
    label: usize,
    frame_indices: Vec<usize>,
    /// `[T, C, H, W]` of the stored sequence.
    shape: [usize; 4],
    blob: String,
}

/// Writes `store.json`, then per class `class_NNNN/manifest.json` and one blob
/// per exemplar: `u8` pixel codes when quantised, little-endian `f32` otherwise.
pub fn save_store(store: &ExemplarStore, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = StoreHeader {
        format: STORE_FORMAT.into(),
        version: STORE_VERSION,
        frames: store.frames,
        sparse_frames: store.sparse_frames,
        frame_bytes: store.frame_bytes,
        budget_per_class: store.budget_per_class,
        quantized: store.quantize,
        classes: store.classes().collect(),
    };
    write_json(&dir.join("store.json"), &header)?;
    for (&class, exemplars) in &store.per_class {
        let class_dir = dir.join(format!("class_{class:04}"));
        fs::create_dir_all(&class_dir).map_err(|e| Error::io(&class_dir, e))?;
        let mut entries = Vec::new();
        for (i, e) in exemplars.iter().enumerate() {
            let blob = format!("{i:04}.bin");
            let bytes: Vec<u8> = if store.quantize {
                e.sequence.frames().iter().map(|v| (v * 255.0).round() as u8).collect()
            } else {
                e.sequence.frames().iter().flat_map(|v| v.to_le_bytes()).collect()
            };
            let path = class_dir.join(&blob);
            fs::write(&path, bytes).map_err(|err| Error::io(&path, err))?;
            let s = e.sequence.frames().shape();
            entries.push(ExemplarEntry {
                source_id: e.sequence.source_id().to_owned(),
                label: e.sequence.label(),
                frame_indices: e.frame_indices.clone(),
                shape: [s[0], s[1], s[2], s[3]],
                blob,
            });
        }
        write_json(&class_dir.join("manifest.json"), &ClassManifest { class, exemplars: entries })?;
    }
    Ok(())
}

pub fn load_store(dir: &Path) -> Result<ExemplarStore> {
    let header: StoreHeader = read_json(&dir.join("store.json"))?;
    if header.format != STORE_FORMAT || header.version != STORE_VERSION {
        return Err(Error::format(
            dir.join("store.json"),
            format!("unsupported store {} v{}", header.format, header.version),
        ));
    }
    let mut store = ExemplarStore::new(
        header.frames,
        header.sparse_frames,
        header.frame_bytes,
        header.budget_per_class,
        header.quantized,
    )?;
    for class in header.classes {
        let class_dir = dir.join(format!("class_{class:04}"));
        let manifest: ClassManifest = read_json(&class_dir.join("manifest.json"))?;
        let mut exemplars = Vec::new();
        for e in manifest.exemplars {
            let path = class_dir.join(&e.blob);
            let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
            let values: Vec<f32> = if header.quantized {
                bytes.iter().map(|&b| f32::from(b) / 255.0).collect()
            } else {
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                    .collect()
            };
            let [t, c, h, w] = e.shape;
            let frames = Array4::from_shape_vec((t, c, h, w), values)
                .map_err(|_| Error::format(&path, "blob size does not match shape"))?;
            let sequence = FrameSequence::new(frames, e.label, e.source_id)?;
            exemplars.push(StoredExemplar { sequence, frame_indices: e.frame_indices });
        }
        if exemplars.len() > store.capacity_per_class()
            || exemplars.iter().any(|e| e.sequence.len() != store.sparse_frames)
        {
            return Err(Error::format(&class_dir, "memory set violates the store budget"));
        }
        store.per_class.insert(class, exemplars);
    }
    Ok(store)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}
