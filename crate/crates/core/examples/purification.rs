//! Applies the three purification defenses to an SDS(-) protected image and
//! reports how much of the edit disruption survives each one.

use latentshield::attacks::{pgd_protect, AttackConfig, Method};
use latentshield::data::{Dataset, DatasetSpec};
use latentshield::eval::metrics::{ia_score, psnr, FeatureExtractor};
use latentshield::eval::purify::Purification;
use latentshield::eval::EditProtocol;
use latentshield::lab::{cache_root, BundleRecipe};

fn main() -> latentshield::Result<()> {
    let bundle = BundleRecipe::standard(0).load_or_train(&cache_root())?;
    let fx = FeatureExtractor::new(&bundle);
    let x = Dataset::generate(&DatasetSpec {
        per_class: 1,
        resolution: 32,
        seed: 5,
        variant: Default::default(),
    })
    .images
    .remove(4);
    let x_adv = pgd_protect(&x, &bundle, &AttackConfig::for_method(Method::SdsMinus))?.x_adv;
    let edit = EditProtocol::new(0.3, 0);
    let reference = edit.reference(&x, &bundle, 0)?;
    let score = |img: &latentshield::Tensor| -> latentshield::Result<f64> { ia_score(&edit.probe(img, &bundle, 0)?, &reference, &fx) };
    println!("clean       ia {:.3}", score(&x)?);
    println!("protected   ia {:.3}", score(&x_adv)?);
    for p in Purification::defaults() {
        let y = p.apply(&x_adv)?;
        println!("{:<11} ia {:.3}  psnr vs clean {:.1} dB", p.name(), score(&y)?, psnr(&y, &x)?);
    }
    Ok(())
}
