use std::fs;
use std::path::Path;
use std::process::Command;

use latentshield::cli::{run_stage, ExperimentConfig, RunManifest, RunOptions, Stage, StageStatus};
use latentshield::models::Architecture;
use serde_json::json;

fn write_config(dir: &Path, extra: serde_json::Value) -> std::path::PathBuf {
    let mut cfg = json!({
        "schema_version": 1,
        "seed": 3,
        "output_dir": "run",
        "dataset": { "per_class": 64, "resolution": 8 },
        "model": {
            "arch": Architecture::tiny(),
            "autoencoder": { "epochs": 2, "rmse_threshold": 1.0 },
            "denoiser": { "epochs": 2 }
        },
        "protect_images": 3,
        "attacks": [
            { "method": "advdm", "iters": 3 },
            { "method": "sds_minus", "iters": 3 },
            { "method": "photoguard", "iters": 0 }
        ],
        "edits": [ { "kind": "sdedit", "strength": 0.2, "steps": 10 } ],
        "min_samples": 1
    });
    if let (Some(base), Some(more)) = (cfg.as_object_mut(), extra.as_object()) {
        for (k, v) in more {
            base.insert(k.clone(), v.clone());
        }
    }
    let p = dir.join("experiment.json");
    fs::write(&p, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    p
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_latentshield"))
}

fn run_all(cfg: &ExperimentConfig) {
    for s in Stage::ALL {
        let out = run_stage(cfg, s, &RunOptions::default()).unwrap();
        assert!(!out.cached, "{} unexpectedly cached", s.name());
    }
}

#[test]
fn pipeline_runs_end_to_end_and_caches() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::load(&write_config(tmp.path(), json!({}))).unwrap();
    run_all(&cfg);

    let out = tmp.path().join("run");
    let manifest = RunManifest::load(&out).unwrap().unwrap();
    assert_eq!(manifest.stages.len(), 7);
    for rec in manifest.stages.values() {
        assert_eq!(rec.status, StageStatus::Complete);
        for a in &rec.artifacts {
            assert!(out.join(a).exists(), "{} missing", a.display());
        }
    }

    // zero iterations leave the image untouched
    let x = latentshield::data::load_png(&out.join("data/img_00000.png")).unwrap();
    let p = latentshield::data::load_png(&out.join("protect/photoguard/img_00000.png")).unwrap();
    assert_eq!(x, p);
    let delta = latentshield::data::load_npy(&out.join("protect/photoguard/img_00000_delta.npy")).unwrap();
    assert_eq!(delta.max_abs(), 0.0);

    let metrics = fs::read_to_string(out.join("evaluate/metrics.csv")).unwrap();
    // 3 images x (clean + 3 methods) x 4 metrics x 1 strength
    assert_eq!(metrics.lines().count(), 1 + 3 * 4 * 4);
    let report = fs::read_to_string(out.join("report/report.md")).unwrap();
    assert!(report.contains("feature-based analog"));

    // every file on disk is listed in the manifest
    let listed: std::collections::BTreeSet<_> = manifest
        .stages
        .values()
        .flat_map(|r| r.artifacts.iter().map(|a| out.join(a)))
        .collect();
    for s in Stage::ALL {
        for entry in walk(&out.join(s.dir())) {
            assert!(listed.contains(&entry), "orphan {}", entry.display());
        }
    }

    for s in Stage::ALL {
        let again = run_stage(&cfg, s, &RunOptions::default()).unwrap();
        assert!(again.cached, "{} reran", s.name());
    }
    let manifest = RunManifest::load(&out).unwrap().unwrap();
    assert!(manifest.stages.values().all(|r| r.cached));

    let forced = run_stage(&cfg, Stage::Report, &RunOptions { force: true, jobs: 1 }).unwrap();
    assert!(!forced.cached);
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    if let Ok(rd) = fs::read_dir(dir) {
        for e in rd.flatten() {
            let p = e.path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
    }
    out
}

#[test]
fn identical_configs_give_identical_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        run_all(&ExperimentConfig::load(&write_config(d.path(), json!({}))).unwrap());
    }
    for f in [
        "protect/advdm/img_00001.png",
        "protect/sds_minus/img_00002_delta.npy",
        "model/ldm.lsc",
        "evaluate/metrics.csv",
        "evaluate/quality.csv",
        "diagnose/budget_ratio.csv",
    ] {
        let x = fs::read(a.path().join("run").join(f)).unwrap();
        let y = fs::read(b.path().join("run").join(f)).unwrap();
        if f.ends_with("quality.csv") {
            // the last column holds wall-clock timings
            let strip = |s: &[u8]| {
                String::from_utf8_lossy(s)
                    .lines()
                    .map(|l| l.rsplit_once(',').map_or(l, |p| p.0).to_string())
                    .collect::<Vec<_>>()
            };
            assert_eq!(strip(&x), strip(&y), "{f}");
        } else {
            assert!(x == y, "{f} differs");
        }
    }
}

#[test]
fn binary_reports_structured_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), json!({}));

    let out = bin().args(["protect", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let doc: serde_json::Value = serde_json::from_str(stderr.lines().next().unwrap()).unwrap();
    assert_eq!(doc["error"]["kind"], "missing_artifact");

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"schema_version": 1, "output_dir": "x", "dataset": {"per_class": 1}, "colour": 1}"#).unwrap();
    let out = bin().args(["gen-data", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let doc: serde_json::Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).lines().next().unwrap()).unwrap();
    assert_eq!(doc["error"]["kind"], "config");
    assert!(doc["error"]["message"].as_str().unwrap().contains("colour"));

    let out = bin().args(["gen-data", "--jobs", "2", "--seed", "9", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = bin().args(["gen-data", "--seed", "9", "--config"]).arg(&cfg).output().unwrap();
    assert!(String::from_utf8_lossy(&out.stdout).contains("cached"));

    // a different seed would overwrite the dataset
    let out = bin().args(["gen-data", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["gen-data", "--force", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success());
}

#[test]
fn empty_dataset_writes_an_empty_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::load(&write_config(tmp.path(), json!({ "dataset": { "per_class": 0, "resolution": 8 } }))).unwrap();
    run_stage(&cfg, Stage::GenData, &RunOptions::default()).unwrap();
    let m: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("run/data/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["entries"].as_array().unwrap().len(), 0);
    assert_eq!(fs::read_dir(tmp.path().join("run/data")).unwrap().count(), 1);
}

#[test]
fn config_schema_is_checked_before_work() {
    let tmp = tempfile::tempdir().unwrap();
    let p = write_config(tmp.path(), json!({ "schema_version": 2 }));
    assert!(matches!(ExperimentConfig::load(&p), Err(latentshield::Error::Config(_))));
    let p = write_config(tmp.path(), json!({ "attacks": [{ "method": "glaze" }] }));
    assert!(ExperimentConfig::load(&p).is_err());
    let p = write_config(tmp.path(), json!({ "attacks": [{ "method": "mist", "textural_weight": 0.0 }] }));
    assert!(matches!(ExperimentConfig::load(&p), Err(latentshield::Error::InconsistentConfig(_))));
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn bundled_example_config_loads() {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/experiment.json");
    let cfg = ExperimentConfig::load(&p).unwrap();
    assert_eq!(cfg.attacks.len(), 7);
    assert_eq!(cfg.edits.len(), 2);
}
