//! Video samples, the synthetic motif generator, frame-directory ingestion and
//! the seeded class schedule.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One video sample: frames laid out as `(T, C, H, W)` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Array4<f32>,
    label: usize,
    source_id: String,
}

impl FrameSequence {
    pub fn new(frames: Array4<f32>, label: usize, source_id: impl Into<String>) -> Result<Self> {
        let source_id = source_id.into();
        if frames.shape().contains(&0) {
            return Err(Error::Shape(format!(
                "sequence `{source_id}` has an empty dimension: {:?}",
                frames.shape()
            )));
        }
        if let Some(v) = frames.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Shape(format!(
                "sequence `{source_id}` has pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self { frames, label, source_id })
    }

    /// Skips validation; callers guarantee the frame invariants.
    pub(crate) fn from_parts(frames: Array4<f32>, label: usize, source_id: String) -> Self {
        debug_assert!(!frames.is_empty());
        Self { frames, label, source_id }
    }

    pub fn frames(&self) -> &Array4<f32> {
        &self.frames
    }

    pub fn into_frames(self) -> Array4<f32> {
        self.frames
    }

    /// Number of frames `T`.
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(C, H, W)` of every frame.
    pub fn frame_shape(&self) -> (usize, usize, usize) {
        let s = self.frames.shape();
        (s[1], s[2], s[3])
    }

    pub fn frame_len(&self) -> usize {
        let (c, h, w) = self.frame_shape();
        c * h * w
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = label;
        self
    }

    /// New sequence made of the frames at `indices`, in order.
    pub fn select_frames(&self, indices: &[usize]) -> FrameSequence {
        let frames = self.frames.select(Axis(0), indices);
        FrameSequence::from_parts(frames, self.label, self.source_id.clone())
    }
}

/// Indices `floor(i * len / count)` for `i in 0..count`.
pub fn uniform_indices(len: usize, count: usize) -> Vec<usize> {
    (0..count).map(|i| i * len / count).collect()
}

/// Parameters of the synthetic moving-motif dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
enum ShapeKind {
    Square,
    Disk,
    Cross,
}

#[derive(Debug, Clone)]
struct Motif {
    shape: ShapeKind,
    color: Vec<f64>,
    /// Velocity in pixels per frame.
    velocity: (f64, f64),
    stripe_freq: f64,
}

/// Generates `num_classes * samples_per_class` sequences, class-major.
///
/// Classes come in pairs that share shape and colour and move in opposite
/// directions; the second member of a pair also carries a different stripe
/// frequency. Appearance and motion therefore both carry label information,
/// and dropping frames blurs the motion cue without removing it.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<Vec<FrameSequence>> {
    let SyntheticSpec { num_classes, samples_per_class, frames, channels, height, width, seed } =
        *spec;
    if num_classes < 2 {
        return Err(Error::Config(format!("num_classes must be >= 2, got {num_classes}")));
    }
    for (name, v) in [
        ("samples_per_class", samples_per_class),
        ("frames", frames),
        ("channels", channels),
        ("height", height),
        ("width", width),
    ] {
        if v == 0 {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = height.max(width) as f64 / 16.0;
    let pairs = num_classes.div_ceil(2);
    let mut motifs = Vec::with_capacity(num_classes);
    for pair in 0..pairs {
        let shape = match pair % 3 {
            0 => ShapeKind::Square,
            1 => ShapeKind::Disk,
            _ => ShapeKind::Cross,
        };
        let color: Vec<f64> = (0..channels).map(|_| rng.random_range(0.35..1.0)).collect();
        let angle = 2.0 * PI * (pair as f64 + rng.random_range(0.0..0.5)) / pairs as f64;
        let speed = scale * rng.random_range(0.8..1.3);
        let base = (speed * angle.cos(), speed * angle.sin());
        motifs.push(Motif { shape, color: color.clone(), velocity: base, stripe_freq: 0.0 });
        motifs.push(Motif { shape, color, velocity: (-base.0, -base.1), stripe_freq: 1.6 });
    }
    motifs.truncate(num_classes);

    let radius = (height.min(width) as f64 / 5.0).max(1.5);
    let mut out = Vec::with_capacity(num_classes * samples_per_class);
    for (label, motif) in motifs.iter().enumerate() {
        for s in 0..samples_per_class {
            let start = (rng.random_range(0.0..width as f64), rng.random_range(0.0..height as f64));
            let jitter = rng.random_range(0.85..1.15);
            let v = (motif.velocity.0 * jitter, motif.velocity.1 * jitter);
            let phase = rng.random_range(0.0..2.0 * PI);
            let color: Vec<f64> = motif
                .color
                .iter()
                .map(|c| (c + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0))
                .collect();

            let mut data = Array4::<f32>::zeros((frames, channels, height, width));
            for t in 0..frames {
                let cx = start.0 + v.0 * t as f64;
                let cy = start.1 + v.1 * t as f64;
                for y in 0..height {
                    let dy = wrap(y as f64 - cy, height as f64);
                    for x in 0..width {
                        let dx = wrap(x as f64 - cx, width as f64);
                        let inside = match motif.shape {
                            ShapeKind::Square => dx.abs() <= radius && dy.abs() <= radius,
                            ShapeKind::Disk => dx * dx + dy * dy <= radius * radius,
                            ShapeKind::Cross => {
                                dx.abs() <= radius
                                    && dy.abs() <= radius
                                    && (dx.abs() <= radius / 3.0 || dy.abs() <= radius / 3.0)
                            }
                        };
                        let stripe = 0.75 + 0.25 * (motif.stripe_freq * (dx + dy) + phase).cos();
                        for (ch, &c) in color.iter().enumerate() {
                            let noise: f64 = rng.random_range(0.0..0.08);
                            let value = if inside { (c * stripe).max(noise) } else { noise };
                            data[[t, ch, y, x]] = value.clamp(0.0, 1.0) as f32;
                        }
                    }
                }
            }
            out.push(FrameSequence::from_parts(data, label, format!("syn-c{label:03}-s{s:04}")));
        }
    }
    Ok(out)
}

/// Signed toroidal offset in `[-period/2, period/2)`.
fn wrap(d: f64, period: f64) -> f64 {
    (d + period / 2.0).rem_euclid(period) - period / 2.0
}

/// Sequences ingested from a frame directory, with the class-id mapping.
#[derive(Debug, Clone)]
pub struct FrameDirectory {
    /// `class_names[id]` is the directory name of class `id`.
    pub class_names: Vec<String>,
    pub sequences: Vec<FrameSequence>,
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut entries = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() == want_dirs {
            entries.push(path);
        }
    }
    entries.sort();
    Ok(entries)
}

fn is_frame_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Reads `root/<class>/<video>/<frame>.{png,jpg}`.
///
/// Class ids follow the lexicographic order of class directory names. Every
/// video is subsampled to `frames` frames with [`uniform_indices`]; frames are
/// decoded as RGB and scaled to `[0, 1]`.
pub fn load_frame_directory(root: &Path, frames: usize) -> Result<FrameDirectory> {
    if frames == 0 {
        return Err(Error::Config("frames must be >= 1".into()));
    }
    let mut class_names = Vec::new();
    let mut sequences = Vec::new();
    let mut frame_dims: Option<(u32, u32)> = None;

    for (label, class_dir) in sorted_entries(root, true)?.into_iter().enumerate() {
        let class_name = class_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let videos = sorted_entries(&class_dir, true)?;
        if videos.is_empty() {
            return Err(Error::EmptyClass(class_name));
        }
        for video in videos {
            let files: Vec<PathBuf> =
                sorted_entries(&video, false)?.into_iter().filter(|p| is_frame_file(p)).collect();
            if files.is_empty() {
                return Err(Error::Format {
                    path: video.clone(),
                    message: "video directory contains no frames".into(),
                });
            }
            let picks = uniform_indices(files.len(), frames);
            let mut decoded = Vec::with_capacity(frames);
            for &i in &picks {
                let path = &files[i];
                let img = image::open(path)
                    .map_err(|e| Error::Decode { path: path.clone(), message: e.to_string() })?
                    .to_rgb8();
                let dims = img.dimensions();
                match frame_dims {
                    None => frame_dims = Some(dims),
                    Some(d) if d != dims => {
                        return Err(Error::Shape(format!(
                            "{} is {}x{}, expected {}x{}",
                            path.display(),
                            dims.0,
                            dims.1,
                            d.0,
                            d.1
                        )))
                    }
                    Some(_) => {}
                }
                decoded.push(img);
            }
            let (w, h) = frame_dims.expect("at least one frame decoded");
            let (w, h) = (w as usize, h as usize);
            let mut data = Array4::<f32>::zeros((frames, 3, h, w));
            for (t, img) in decoded.iter().enumerate() {
                for (x, y, px) in img.enumerate_pixels() {
                    for ch in 0..3 {
                        data[[t, ch, y as usize, x as usize]] = px.0[ch] as f32 / 255.0;
                    }
                }
            }
            let video_name = video.file_name().unwrap_or_default().to_string_lossy();
            sequences.push(FrameSequence::from_parts(
                data,
                label,
                format!("{class_name}/{video_name}"),
            ));
        }
        class_names.push(class_name);
    }
    Ok(FrameDirectory { class_names, sequences })
}

/// Writes sequences as `root/class_NNN/<source>/frame_TTTT.png`.
///
/// Only 3-channel sequences can be exported. Pixel values are rounded to
/// 8 bits, so a reload reproduces them within `1/255`.
pub fn export_frame_directory(sequences: &[FrameSequence], root: &Path) -> Result<()> {
    for (i, seq) in sequences.iter().enumerate() {
        let (c, h, w) = seq.frame_shape();
        if c != 3 {
            return Err(Error::Shape(format!(
                "sequence `{}` has {c} channels; only RGB sequences can be exported",
                seq.source_id()
            )));
        }
        let video: String = seq
            .source_id()
            .chars()
            .map(|ch| if ch.is_ascii_alphanumeric() || ch == '-' || ch == '_' { ch } else { '_' })
            .collect();
        let dir = root.join(format!("class_{:03}", seq.label())).join(format!("{i:05}_{video}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for t in 0..seq.len() {
            let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let px = |ch: usize| {
                    (seq.frames()[[t, ch, y as usize, x as usize]] * 255.0).round() as u8
                };
                image::Rgb([px(0), px(1), px(2)])
            });
            let path = dir.join(format!("frame_{t:04}.png"));
            img.save(&path).map_err(|e| Error::format(&path, e))?;
        }
    }
    Ok(())
}

/// Seeded class ordering split into the initial task and equal-size stages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    pub class_order: Vec<usize>,
    pub groups: Vec<Vec<usize>>,
    pub seed: u64,
}

impl TaskSchedule {
    pub fn num_tasks(&self) -> usize {
        self.groups.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_order.len()
    }

    /// Number of classes seen once task `k` has arrived.
    pub fn classes_seen(&self, k: usize) -> usize {
        self.groups[..=k].iter().map(Vec::len).sum()
    }

    /// Position of `class` in the class order, i.e. its head index.
    pub fn head_index(&self, class: usize) -> Option<usize> {
        self.class_order.iter().position(|&c| c == class)
    }

    /// Group sizes, used to check that two runs are comparable.
    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    /// True when the groups are pairwise disjoint and cover exactly `0..num_classes`.
    pub fn is_partition(&self) -> bool {
        let mut seen = HashSet::new();
        for &c in self.groups.iter().flatten() {
            if c >= self.num_classes() || !seen.insert(c) {
                return false;
            }
        }
        seen.len() == self.num_classes()
    }
}

pub fn make_schedule(
    num_classes: usize,
    initial: usize,
    per_stage: usize,
    seed: u64,
) -> Result<TaskSchedule> {
    if initial == 0 || initial > num_classes {
        return Err(Error::Config(format!(
            "initial class count {initial} must be in 1..={num_classes}"
        )));
    }
    if per_stage == 0 {
        return Err(Error::Config("classes per stage must be >= 1".into()));
    }
    let rest = num_classes - initial;
    if !rest.is_multiple_of(per_stage) {
        return Err(Error::Config(format!(
            "{rest} incremental classes do not divide into stages of {per_stage}"
        )));
    }
    let mut class_order: Vec<usize> = (0..num_classes).collect();
    class_order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut groups = vec![class_order[..initial].to_vec()];
    groups.extend(class_order[initial..].chunks(per_stage).map(<[usize]>::to_vec));
    Ok(TaskSchedule { class_order, groups, seed })
}
