//! Class-incremental video classification with sparse exemplar memory.
//!
//! Each task first trains on its new classes plus aligned replay of earlier
//! exemplars (Base Train), then stores a herding-selected, frame-decimated
//! memory set for its classes and fine-tunes on all memory sets (Fine Tune).
//! Incremental Base Train stops early once training accuracy reaches the best
//! accuracy of the initial task.

pub mod backbone;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod memory;
pub mod protocol;
pub mod report;

pub use backbone::{BackboneConfig, BatchLogits, Distillation, ModelState};
pub use config::ExperimentConfig;
pub use dataset::{FrameSequence, TaskSchedule};
pub use error::{Error, Result};
pub use evaluation::{AccuracyMatrix, RunMetrics};
pub use memory::{Alignment, ExemplarStore};
pub use protocol::{run_incremental_experiment, ExperimentData, RunReport, StagePlan};
