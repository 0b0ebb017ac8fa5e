//! Forward-step latency of the same trunk in a low- and a high-compression
//! latent space. Pass an image size as the first argument (default 128).

use dcgen::diagnostics::{bench_model, BenchOptions};
use dcgen::pipeline::PipelineConfig;

fn main() -> dcgen::Result<()> {
    let size = std::env::args()
        .nth(1)
        .map_or(Ok(128), |s| s.parse())
        .expect("image size");
    let cfg = PipelineConfig::default();
    let arch = cfg.dit_config(cfg.latent.low)?;
    let opts = BenchOptions {
        batch: 1,
        repeats: 5,
        warmup: 2,
    };
    let mut times = Vec::new();
    for spec in [cfg.latent.low, cfg.latent.high] {
        let r = bench_model(&arch, spec, size, opts, 0)?;
        println!(
            "{spec}: {} tokens, {:.2} ms/step, {:.0} samples/min",
            r.tokens,
            r.step_time_s * 1e3,
            r.samples_per_min
        );
        times.push(r.step_time_s);
    }
    println!("speedup {:.2}x", times[0] / times[1]);
    Ok(())
}
