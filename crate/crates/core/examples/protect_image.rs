//! Protects one synthetic image with every method and writes the results
//! (image, delta, sidecar) under the given directory.
//!
//!     cargo run --example protect_image -- out/protect

use std::path::PathBuf;

use latentshield::attacks::{pgd_protect, AttackConfig, Method};
use latentshield::data::{save_png, Dataset, DatasetSpec};
use latentshield::lab::{cache_root, BundleRecipe};

fn main() -> latentshield::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "protect-out".into()));
    let bundle = BundleRecipe::standard(0).load_or_train(&cache_root())?;
    let x = Dataset::generate(&DatasetSpec {
        per_class: 1,
        resolution: 32,
        seed: 7,
        variant: Default::default(),
    })
    .images
    .remove(2);
    std::fs::create_dir_all(&out)?;
    save_png(&x, &out.join("original.png"))?;
    for m in Method::ALL {
        let cfg = AttackConfig::for_method(m);
        let r = pgd_protect(&x, &bundle, &cfg)?;
        r.save(&out, m.name(), &cfg)?;
        let last = r.loss_trace.last().copied();
        println!(
            "{m:<12} max|delta| {:.4}  {:.2} ms/iter  final loss {:?}",
            r.delta.max_abs(),
            r.grad_seconds_per_iter * 1e3,
            last
        );
    }
    Ok(())
}
