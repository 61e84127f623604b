//! Configuration, checkpoints, metrics files, plots and the commands of the
//! `ladd` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod csv;
pub mod plots;

pub use checkpoint::{
    dataset_checkpoint, dataset_from, denoiser_checkpoint, denoiser_from, distiller_checkpoint, heads_from,
    restore_distiller, restore_trainer, trainer_checkpoint, Checkpoint, Header, TensorEntry, MAGIC, VERSION,
};
pub use commands::{execute, run_dir, Command};
pub use config::RunConfig;
pub use csv::{metrics_csv, parse_metrics, read_metrics, write_metrics, METRICS_HEADER};
pub use plots::{emit_plots, plot_rows};
