//! Representation-gap probing, run comparison, and step benchmarks.

pub mod bench;
pub mod compare;
pub mod gap;

pub use bench::{bench_model, bench_step, BenchOptions, BenchRecord};
pub use compare::{compare_records, compare_runs, Comparison, PairedStep};
pub use gap::{layer_gap_probe, GapProbe, GapReport};
