//! Runs the three mimicry threats on a clean image and on its AdvDM-protected
//! counterpart: SDEdit at the two evaluation strengths, inpainting of the
//! right half, and generation from an embedding inverted on four images.

use latentshield::attacks::{pgd_protect, AttackConfig, Method};
use latentshield::data::{Dataset, DatasetSpec};
use latentshield::diffusion::Cond;
use latentshield::eval::metrics::{ia_score, FeatureExtractor};
use latentshield::lab::{cache_root, BundleRecipe};
use latentshield::threats::{generate, inpaint, invert_embedding, sdedit, DEFAULT_STRENGTHS};
use latentshield::Tensor;

fn main() -> latentshield::Result<()> {
    let bundle = BundleRecipe::standard(0).load_or_train(&cache_root())?;
    let fx = FeatureExtractor::new(&bundle);
    let data = Dataset::generate(&DatasetSpec {
        per_class: 4,
        resolution: 32,
        seed: 11,
        variant: Default::default(),
    });
    let x = &data.images[0];
    let x_adv = pgd_protect(x, &bundle, &AttackConfig::for_method(Method::Advdm))?.x_adv;

    for s in DEFAULT_STRENGTHS {
        let clean = sdedit(x, &bundle, s, 100, &Cond::None, 1)?;
        let again = sdedit(x, &bundle, s, 100, &Cond::None, 2)?;
        let prot = sdedit(&x_adv, &bundle, s, 100, &Cond::None, 2)?;
        println!(
            "sdedit {s}: clean-vs-clean {:.3}, protected-vs-clean {:.3}",
            ia_score(&again, &clean, &fx)?,
            ia_score(&prot, &clean, &fx)?
        );
    }

    let mask = Tensor::new(&[1, 1, 32, 32], (0..1024).map(|i| if i % 32 >= 16 { 1.0 } else { 0.0 }).collect())?;
    let a = inpaint(x, &mask, &bundle, &Cond::None, 50, 3)?.image;
    let b = inpaint(&x_adv, &mask, &bundle, &Cond::None, 50, 3)?.image;
    println!("inpaint: protected-vs-clean {:.3}", ia_score(&b, &a, &fx)?);

    let class = data.labels[0];
    let set: Vec<Tensor> = data.class_indices(class).iter().map(|&i| data.images[i].clone()).collect();
    let (emb, trace) = invert_embedding(&set, &bundle, 300, 5e-3, 0)?;
    let samples = generate(&bundle, &Cond::Embedding(emb), 4, 50, 0)?;
    println!(
        "inversion on class {class}: loss {:.4} -> {:.4}; {} samples, first vs input {:.3}",
        trace.loss[0],
        trace.loss.last().unwrap(),
        samples.len(),
        ia_score(&samples[0], x, &fx)?
    );
    Ok(())
}
