//! The report files are compared against `tests/golden/` with numbers
//! masked, so headers, column order, row keys and JSON layout are pinned
//! while float values may differ across SIMD code paths. Set
//! `LATENTSHIELD_BLESS=1` to rewrite the golden copies.

mod common;

use std::fs;
use std::path::Path;

use common::*;
use latentshield::eval::metrics::FeatureExtractor;
use latentshield::eval::report::{build_report, EditMetric, MethodRun, ReportInput, CLEAN};
use latentshield::Tensor;

fn input() -> ReportInput {
    let mut r = rng(77);
    let mut img = || Tensor::rand_uniform(&[1, 1, 8, 8], 0.0, 1.0, &mut r);
    let n = 3;
    let strengths = vec![0.2, 0.3];
    let originals: Vec<Tensor> = (0..n).map(|_| img()).collect();
    let reference_edits = strengths.iter().map(|_| (0..n).map(|_| img()).collect()).collect();
    let methods = [CLEAN, "advdm", "sds_minus"]
        .iter()
        .map(|m| MethodRun {
            name: m.to_string(),
            protected: (0..n).map(|_| img()).collect(),
            seconds_per_iter: vec![0.25; n],
            edits: strengths.iter().map(|_| (0..n).map(|_| img()).collect()).collect(),
        })
        .collect();
    ReportInput {
        image_ids: (0..n).map(|i| format!("img_{i:05}")).collect(),
        originals,
        strengths,
        reference_edits,
        methods,
    }
}

fn mask(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Number(_) => *v = serde_json::Value::String("#".into()),
        serde_json::Value::Array(a) => a.iter_mut().for_each(mask),
        serde_json::Value::Object(o) => o.values_mut().for_each(mask),
        _ => {}
    }
}

fn layout(name: &str, text: &str) -> String {
    if name.ends_with(".json") {
        let mut v: serde_json::Value = serde_json::from_str(text).unwrap();
        mask(&mut v);
        return serde_json::to_string_pretty(&v).unwrap();
    }
    text.lines()
        .map(|l| {
            l.split(',')
                .map(|f| if f.parse::<f64>().is_ok() { "#" } else { f })
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn report_files_match_the_golden_copies() {
    let fx = FeatureExtractor::new(&tiny_bundle(5));
    let rep = build_report(&input(), &EditMetric::ALL, &fx, 2).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    rep.save(tmp.path()).unwrap();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let bless = std::env::var_os("LATENTSHIELD_BLESS").is_some();
    for name in ["metrics.csv", "quality.csv", "aggregates.csv", "summary.json"] {
        let got = fs::read_to_string(tmp.path().join(name)).unwrap();
        if bless {
            fs::write(golden.join(name), &got).unwrap();
            continue;
        }
        let want = fs::read_to_string(golden.join(name)).unwrap();
        assert_eq!(got.lines().next(), want.lines().next(), "{name} header");
        assert_eq!(layout(name, &got), layout(name, &want), "{name} differs from its golden copy");
    }
}
