//! Experiment orchestration: configs, training regimes, checkpoints,
//! metrics logs, ablation grids and plots.

mod checkpoint;
mod config;
mod dataset;
mod grid;
mod metrics;
mod plot;
mod runner;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION, MAGIC};
pub use config::{
    apply_override, parse_value, set_path, DatasetConfig, DetConfig, EvalConfig, ExperimentConfig, MaConfig,
    LrDrop, OptimizerConfig, Regime,
};
pub use dataset::{load_pairs, prepare, prepare_dataset, prepare_split, Split, PreparedSample, PreparedSet, TEST_INDEX_OFFSET};
pub use grid::{run_ablation_grid, write_grid_csv, GridAxis, GridOutcome, GridRow, GridSpec, RunStatus};
pub use metrics::{eval_records, read_metrics_csv, write_metrics_csv, MetricsRecord, RecordKind};
pub use plot::{plot_grid_bars, plot_training_curves};
pub use runner::{evaluate, run_eval, run_training, EvalModality, OutputPaths, TrainOutcome};
