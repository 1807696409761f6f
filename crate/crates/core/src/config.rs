//! Flat key/value experiment configuration (TOML).
//!
//! Every key is optional and falls back to the default shown by
//! `ExperimentConfig::default()`. Unknown keys are rejected.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, Distillation};
use crate::error::{Error, Result};
use crate::memory::{frame_bytes, Alignment};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Frame-directory dataset; the synthetic generator is used when absent.
    pub data_root: Option<PathBuf>,
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub dataset_seed: u64,

    pub initial_classes: usize,
    pub classes_per_stage: usize,

    /// Frames the network consumes (`F`).
    pub frames: usize,
    /// Frames stored per exemplar video (`F_bar`).
    pub sparse_frames: usize,
    pub alignment: Alignment,
    pub budget_bytes_per_class: usize,
    pub quantize_exemplars: bool,

    /// Epochs of the initial task's Base Train (`N`).
    pub initial_epochs: usize,
    pub finetune_epochs: usize,
    pub early_break: bool,
    /// Dense exemplars, no Early Break, dense inference.
    pub baseline_mode: bool,
    pub sparse_inference: bool,

    pub learning_rate: f64,
    /// Learning rate for every stage after the initial task; defaults to `learning_rate`.
    pub incremental_learning_rate: Option<f64>,
    pub batch_size: usize,
    /// Gradients with a larger Euclidean norm are rescaled to it; unset disables clipping.
    pub max_grad_norm: Option<f64>,

    pub distill_lambda: f64,
    pub distill_temperature: f64,

    pub widths: Vec<usize>,
    pub shift_fraction: f64,
    pub head_init_scale: f64,

    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_root: None,
            num_classes: 10,
            train_per_class: 30,
            test_per_class: 20,
            channels: 3,
            height: 16,
            width: 16,
            dataset_seed: 7,
            initial_classes: 2,
            classes_per_stage: 2,
            frames: 8,
            sparse_frames: 4,
            alignment: Alignment::Repeated,
            budget_bytes_per_class: 40 * frame_bytes(3, 16, 16),
            quantize_exemplars: true,
            initial_epochs: 50,
            finetune_epochs: 30,
            early_break: true,
            baseline_mode: false,
            sparse_inference: true,
            learning_rate: 0.1,
            incremental_learning_rate: None,
            batch_size: 8,
            max_grad_norm: Some(5.0),
            distill_lambda: 1.0,
            distill_temperature: 2.0,
            widths: vec![8, 16, 64],
            shift_fraction: 0.25,
            head_init_scale: 1e-2,
            seeds: vec![1000, 1993, 2021],
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// One field-level validation failure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The configuration actually run: baseline mode forces dense exemplars,
    /// no alignment, no Early Break and dense inference.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        if c.baseline_mode {
            c.sparse_frames = c.frames;
            c.alignment = Alignment::None;
            c.early_break = false;
            c.sparse_inference = false;
        }
        c
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            frames: self.frames,
            channels: self.channels,
            height: self.height,
            width: self.width,
            widths: self.widths.clone(),
            shift_fraction: self.shift_fraction,
            shift_before_block: 1,
            head_init_scale: self.head_init_scale,
        }
    }

    pub fn distillation(&self) -> Distillation {
        Distillation { lambda: self.distill_lambda, temperature: self.distill_temperature }
    }

    pub fn frame_bytes(&self) -> usize {
        frame_bytes(self.channels, self.height, self.width)
    }

    /// All field-level problems, empty when the configuration is runnable.
    pub fn issues(&self) -> Vec<ConfigIssue> {
        let mut issues = Vec::new();
        let mut check = |ok: bool, field: &'static str, message: String| {
            if !ok {
                issues.push(ConfigIssue { field, message });
            }
        };
        let c = self.effective();
        check(c.num_classes >= 2, "num_classes", "must be >= 2".into());
        check(c.train_per_class >= 1, "train_per_class", "must be >= 1".into());
        check(c.test_per_class >= 1, "test_per_class", "must be >= 1".into());
        check(
            c.initial_classes >= 1 && c.initial_classes <= c.num_classes,
            "initial_classes",
            format!("must be in 1..={}", c.num_classes),
        );
        check(c.classes_per_stage >= 1, "classes_per_stage", "must be >= 1".into());
        if c.classes_per_stage >= 1 && c.initial_classes <= c.num_classes {
            let rest = c.num_classes - c.initial_classes;
            check(
                rest.is_multiple_of(c.classes_per_stage),
                "classes_per_stage",
                format!("{rest} incremental classes do not split into stages of {}", c.classes_per_stage),
            );
        }
        check(c.frames >= 1, "frames", "must be >= 1".into());
        check(
            c.sparse_frames >= 1 && c.frames.is_multiple_of(c.sparse_frames.max(1)),
            "sparse_frames",
            format!("must divide frames ({}), got {}", c.frames, c.sparse_frames),
        );
        check(
            c.alignment != Alignment::None || c.sparse_frames == c.frames,
            "alignment",
            "`none` requires sparse_frames == frames".into(),
        );
        check(c.initial_epochs >= 1, "initial_epochs", "must be >= 1".into());
        check(
            !c.early_break || c.initial_epochs >= 2,
            "initial_epochs",
            "Early Break needs at least 2 initial epochs".into(),
        );
        check(c.finetune_epochs >= 1, "finetune_epochs", "must be >= 1".into());
        check(
            c.learning_rate.is_finite() && c.learning_rate >= 0.0,
            "learning_rate",
            "must be finite and >= 0".into(),
        );
        if let Some(lr) = c.incremental_learning_rate {
            check(
                lr.is_finite() && lr >= 0.0,
                "incremental_learning_rate",
                "must be finite and >= 0".into(),
            );
        }
        check(c.batch_size >= 1, "batch_size", "must be >= 1".into());
        if let Some(n) = c.max_grad_norm {
            check(n.is_finite() && n > 0.0, "max_grad_norm", "must be finite and > 0".into());
        }
        check(
            c.distill_lambda.is_finite() && c.distill_lambda >= 0.0,
            "distill_lambda",
            "must be finite and >= 0".into(),
        );
        check(
            c.distill_temperature.is_finite() && c.distill_temperature > 0.0,
            "distill_temperature",
            "must be > 0".into(),
        );
        check(!c.seeds.is_empty(), "seeds", "must list at least one seed".into());
        if let Err(e) = c.backbone().validate() {
            check(false, "widths", e.to_string());
        }
        issues
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(
                issues.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "),
            ))
        }
    }
}
