//! Optimization, checkpointing and the ablation driver.

mod ablation;
mod checkpoint;
mod config;
mod optim;
mod trainer;

pub use ablation::{
    count_parameters, grid_csv, grid_table, preset_rows, run_ablation_grid, GridResult, GridRow, GridSpec, CSV_HEADER,
};
pub use checkpoint::{Checkpoint, StoredParam};
pub use config::{parse_entries, DataConfig, DataSource, Entry, OptimConfig, TrainConfig, KEYS};
pub use optim::{group_multiplier, lr_at, optimizer_step, AdamState};
pub use trainer::{evaluate, load_data, schedule, train, EpochRecord, RunOptions, TrainData, TrainOutcome};
