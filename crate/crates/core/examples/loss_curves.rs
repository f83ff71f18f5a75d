//! Compares the semantic-loss trajectory of full-gradient AdvDM with its SDS
//! counterpart on a fixed grid of timesteps, and their cost per iteration.

use latentshield::attacks::{AttackConfig, Method};
use latentshield::data::{Dataset, DatasetSpec};
use latentshield::diagnostics::loss_curve_compare;
use latentshield::lab::{cache_root, BundleRecipe};

fn main() -> latentshield::Result<()> {
    let bundle = BundleRecipe::standard(0).load_or_train(&cache_root())?;
    let data = Dataset::generate(&DatasetSpec {
        per_class: 1,
        resolution: 32,
        seed: 9,
        variant: Default::default(),
    });
    let iters = 50;
    let full = AttackConfig {
        iters,
        ..AttackConfig::for_method(Method::Advdm)
    };
    let sds = AttackConfig {
        iters,
        ..AttackConfig::for_method(Method::SdsPlus)
    };
    let curves = loss_curve_compare(&data.images[..4], &bundle, &full, &sds, &[100, 300, 500, 700, 900], 0)?;
    for (i, (f, s)) in curves.full.iter().zip(&curves.sds).enumerate().step_by(10) {
        println!("iter {i:>3}: full {f:.4}  sds {s:.4}");
    }
    println!(
        "max relative divergence {:.3}; {:.2} vs {:.2} ms/iter (ratio {:.2})",
        curves.divergence,
        curves.full_seconds_per_iter * 1e3,
        curves.sds_seconds_per_iter * 1e3,
        curves.speed_ratio()
    );
    Ok(())
}
