//! Trains (or loads from the cache) the standard bundles used by the
//! experiments: LDM seeds 0 and 1 and the pixel-space model.

use std::time::Instant;

use latentshield::lab::{cache_root, BundleRecipe, PixelRecipe};

fn main() -> latentshield::Result<()> {
    let root = cache_root();
    println!("cache: {}", root.display());
    for seed in [0, 1] {
        let t0 = Instant::now();
        let b = BundleRecipe::standard(seed).load_or_train(&root)?;
        println!(
            "ldm seed {seed}: recon rmse {:?}, denoiser val loss {:?} ({:.1}s)",
            b.meta.recon_rmse,
            b.meta.denoiser_val_loss,
            t0.elapsed().as_secs_f64()
        );
    }
    let t0 = Instant::now();
    let p = PixelRecipe::standard(0).load_or_train(&root)?;
    println!(
        "pixel dm: denoiser val loss {:?} ({:.1}s)",
        p.meta.denoiser_val_loss,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}
