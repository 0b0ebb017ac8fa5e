//! Checkpoints, metrics logs, configuration files, and images.

pub mod checkpoint;
pub mod config;
pub mod image;
pub mod metrics;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{config_hash, load_config, parse_config};
pub use metrics::{read_metrics, MetricsRecord, MetricsWriter};
