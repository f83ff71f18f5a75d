//! Measures how much a 16/255 pixel perturbation grows inside the encoder,
//! per method and per sub-dataset, and prints the pooled medians.

use latentshield::attacks::{protect_batch, AttackConfig, Method};
use latentshield::data::{Dataset, DatasetSpec, Domain};
use latentshield::diagnostics::{budget_ratio, BudgetRatioReport, BudgetRatioRow};
use latentshield::lab::{cache_root, BundleRecipe};

fn main() -> latentshield::Result<()> {
    let bundle = BundleRecipe::standard(0).load_or_train(&cache_root())?;
    let data = Dataset::generate(&DatasetSpec {
        per_class: 2,
        resolution: 32,
        seed: 21,
        variant: Default::default(),
    });
    let mut rows = Vec::new();
    for m in [Method::Advdm, Method::Photoguard, Method::Mist] {
        let cfg = AttackConfig {
            iters: 40,
            ..AttackConfig::for_method(m)
        };
        for (i, r) in protect_batch(&data.images, &bundle, &cfg, 1)?.iter().enumerate() {
            rows.push(BudgetRatioRow {
                image: i,
                domain: Domain::of_class(data.labels[i]),
                method: m,
                value: budget_ratio(&data.images[i], &r.x_adv, &bundle)?,
            });
        }
    }
    let report = BudgetRatioReport::new(rows, 1.0);
    for m in [Method::Advdm, Method::Photoguard, Method::Mist] {
        let s = report.pooled(m).expect("rows for every method");
        println!("{m:<11} median dz/dx {:.2} over {} images", s.median.unwrap_or(f64::NAN), s.count);
    }
    print!("{}", report.histogram_csv());
    Ok(())
}
