//! Token counts per latent space and resolution.

use dcgen::{token_count, LatentSpec};

fn main() -> dcgen::Result<()> {
    let specs = ["f8p2", "f8p1", "f16p1", "f32p1", "f64p1"];
    let sizes = [256, 512, 1024, 2048, 4096];
    print!("{:>8}", "");
    for s in specs {
        print!("{s:>10}");
    }
    println!();
    for size in sizes {
        print!("{size:>8}");
        for s in specs {
            let spec: LatentSpec = s.parse()?;
            print!("{:>10}", token_count(size, size, &spec)?);
        }
        println!();
    }
    Ok(())
}
