//! Protects a handful of images with two methods, edits them, and writes the
//! metric tables (`metrics.csv`, `quality.csv`, `aggregates.csv`,
//! `summary.json`) to the given directory.

use std::path::PathBuf;

use latentshield::attacks::{protect_batch, AttackConfig, Method};
use latentshield::data::{Dataset, DatasetSpec};
use latentshield::eval::metrics::FeatureExtractor;
use latentshield::eval::report::{build_report, EditMetric, ReportInput};
use latentshield::eval::EditProtocol;
use latentshield::lab::{cache_root, BundleRecipe};

fn main() -> latentshield::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "report-out".into()));
    let bundle = BundleRecipe::standard(0).load_or_train(&cache_root())?;
    let fx = FeatureExtractor::new(&bundle);
    let data = Dataset::generate(&DatasetSpec {
        per_class: 1,
        resolution: 32,
        seed: 3,
        variant: Default::default(),
    });
    let mut protected = Vec::new();
    for m in [Method::Advdm, Method::SdsMinus] {
        let runs = protect_batch(&data.images, &bundle, &AttackConfig::for_method(m), 1)?;
        protected.push((
            m.name().to_string(),
            runs.iter().map(|r| r.x_adv.clone()).collect(),
            runs.iter().map(|r| r.grad_seconds_per_iter).collect(),
        ));
    }
    let ids = (0..data.len()).map(|i| format!("img_{i:05}")).collect();
    let protocols = [EditProtocol::new(0.2, 0), EditProtocol::new(0.3, 0)];
    let input = ReportInput::assemble(ids, data.images.clone(), protected, &bundle, &protocols, 1)?;
    // eight images are too few for the Frechet distance, which is reported missing
    let report = build_report(&input, &EditMetric::ALL, &fx, 4)?;
    for f in report.save(&out)? {
        println!("wrote {}", f.display());
    }
    print!("{}", report.aggregates_csv());
    Ok(())
}
