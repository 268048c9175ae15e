//! Desk-scale zero-shot transfer experiments: generate a bilingual task,
//! train a classifier on the source language, evaluate on the target.

pub mod model;
pub mod sweep;
pub mod task;
pub mod train;

pub use model::{ClassifierHead, FeatureSystem, Model, ModelTrace, SystemInputs};
pub use sweep::{ablation, build_model, layer_sweep, run_configs, run_row, RowConfig, SweepReport, SweepRow, SweepSettings};
pub use task::{generate_task, GeneratedTask, SyntheticTaskSpec, DEFAULT_INVARIANCE};
pub use train::{batches, evaluate, evaluate_indices, predict, score, train, F1Counts, Metrics, TrainConfig, TrainOutcome};
