//! End-to-end acceptance checks on the standard desk-scale bundles. Each
//! check prints one `PASS`/`FAIL` line to stdout, bypassing capture.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use common::*;
use latentshield::attacks::*;
use latentshield::data::{Domain, save_npy, save_png};
use latentshield::diagnostics::*;
use latentshield::diffusion::Cond;
use latentshield::eval::metrics::high_frequency_energy;
use latentshield::eval::purify::Purification;
use latentshield::eval::report::{build_report, EditMetric, ReportInput, CLEAN};
use latentshield::eval::EditProtocol;
use latentshield::models::checkpoint::{checkpoint_bytes, load_checkpoint, save_checkpoint};
use latentshield::models::LatentModel;
use latentshield::lab::{cache_root, BundleRecipe};
use latentshield::Tensor;
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

const BUDGET: f64 = 16.0 / 255.0;
const EDIT_STRENGTH: f64 = 0.3;
const STRENGTHS: [f64; 2] = [0.2, 0.3];

fn verdict(name: &str, pass: bool, detail: String) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    let _ = out.flush();
    assert!(pass, "{name}: {detail}");
}

fn images() -> &'static [Tensor] {
    &lab().images.images
}

/// Every method run on every held-out image with bundle A.
fn protections() -> &'static BTreeMap<Method, Vec<ProtectionResult>> {
    static P: OnceLock<BTreeMap<Method, Vec<ProtectionResult>>> = OnceLock::new();
    P.get_or_init(|| {
        Method::ALL
            .into_iter()
            .map(|m| {
                let cfg = AttackConfig::for_method(m);
                (m, protect_batch(images(), &lab().a, &cfg, 1).expect("protection"))
            })
            .collect()
    })
}

fn adversarial(m: Method) -> Vec<Tensor> {
    protections()[&m].iter().map(|r| r.x_adv.clone()).collect()
}

/// Probe-seed edits of the clean images and of every method's outputs at
/// both strengths, plus the clean reference edits.
fn report_input() -> &'static ReportInput {
    static R: OnceLock<ReportInput> = OnceLock::new();
    R.get_or_init(|| {
        let protected = Method::ALL
            .into_iter()
            .map(|m| {
                let secs = protections()[&m].iter().map(|r| r.grad_seconds_per_iter).collect();
                (m.name().to_string(), adversarial(m), secs)
            })
            .collect();
        let ids = (0..images().len()).map(|i| format!("img_{i:05}")).collect();
        let protocols: Vec<EditProtocol> = STRENGTHS.iter().map(|&s| EditProtocol::new(s, 0)).collect();
        ReportInput::assemble(ids, images().to_vec(), protected, &lab().a, &protocols, 1).expect("edits")
    })
}

fn run<'a>(input: &'a ReportInput, name: &str) -> &'a latentshield::eval::report::MethodRun {
    input.methods.iter().find(|r| r.name == name).expect("method run")
}

/// One-sided paired t-test p-value for `mean(a - b) < 0`.
fn paired_p_below(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let m = mean(&d);
    let sd = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let t = m / (sd / n.sqrt());
    StudentsT::new(0.0, 1.0, n - 1.0).unwrap().cdf(t)
}

#[test]
fn gradients_match_finite_differences() {
    let start = Instant::now();
    let b = tiny_bundle(1);
    let (e, d, n) = b.param_counts();
    let x = Tensor::rand_uniform(&[1, 1, 8, 8], 0.2, 0.8, &mut rng(2));
    let eps = Tensor::randn(b.encode(&x).shape(), &mut rng(3));
    let y = latentshield::data::default_target_pattern(8);
    let full = full_semantic_gradient(&b, &x, 400, &eps, &Cond::None).unwrap();
    let (_, tex) = textural_gradient(&b, &x, &y).unwrap();
    let h = 1e-5;
    let mut r = rng(4);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let dir = Tensor::randn(x.shape(), &mut r);
        let dir = dir.scale(1.0 / dir.norm());
        let fd = |f: &dyn Fn(&Tensor) -> f64| (f(&x.axpby(1.0, &dir, h)) - f(&x.axpby(1.0, &dir, -h))) / (2.0 * h);
        let s = fd(&|v| semantic_loss(&b, v, 400, &eps, &Cond::None).unwrap());
        let t = fd(&|v| textural_loss(&b, v, &y).unwrap());
        worst = worst.max(rel_err(s, full.grad.dot(&dir))).max(rel_err(t, tex.dot(&dir)));
    }
    let secs = start.elapsed().as_secs_f64();
    let params = e + d + n;
    verdict(
        "gradient correctness",
        worst < expect("/gradient_rel_err") && params < 10_000 && secs < 60.0,
        format!("max relative error {worst:.2e} over 20 probes, {params} parameters, {secs:.1}s"),
    );
}

#[test]
fn sds_is_half_the_full_gradient_for_identity_jacobian() {
    let c = Tensor::randn(&[1, 2, 2, 2], &mut rng(5)).scale(0.3);
    let m = LinearModel::new(Box::new(ShiftDenoiser { c }), 6);
    let x = Tensor::rand_uniform(&[1, 1, 8, 8], 0.0, 1.0, &mut rng(7));
    let mut worst: f64 = 0.0;
    for (k, t) in [0, 100, 500, 999].into_iter().enumerate() {
        let eps = Tensor::randn(&[1, 2, 2, 2], &mut rng(8 + k as u64));
        let full = full_semantic_gradient(&m, &x, t, &eps, &Cond::None).unwrap();
        let sds = sds_gradient(&m, &x, t, &eps, &Cond::None).unwrap();
        worst = worst.max(sds.grad.sub(&full.grad.scale(0.5)).max_abs() / full.grad.max_abs());
    }
    verdict(
        "sds structural relation",
        worst <= expect("/sds_relation_tol"),
        format!("max |sds - full/2| / max|full| = {worst:.2e}"),
    );
}

#[test]
fn sds_matches_the_full_loss_curve_at_lower_cost() {
    let start = Instant::now();
    let full = AttackConfig::for_method(Method::Advdm);
    let sds = AttackConfig::for_method(Method::SdsPlus);
    let n = expect("/loss_curve_images") as usize;
    let curves = loss_curve_compare(&images()[..n], &lab().a, &full, &sds, &[100, 300, 500, 700, 900], 7).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let ratio = curves.speed_ratio();
    verdict(
        "sds free lunch",
        curves.divergence < expect("/loss_curve_divergence") && ratio <= expect("/sds_speed_ratio") && secs < 600.0,
        format!(
            "divergence {:.3}, loss {:.4} -> full {:.4} / sds {:.4}, time ratio {ratio:.2} ({:.2} vs {:.2} ms/iter), {n} images, {secs:.0}s",
            curves.divergence,
            curves.full[0],
            curves.full.last().unwrap(),
            curves.sds.last().unwrap(),
            curves.sds_seconds_per_iter * 1e3,
            curves.full_seconds_per_iter * 1e3,
        ),
    );
}

#[test]
fn encoder_amplifies_pixel_budgets() {
    let start = Instant::now();
    let l = lab();
    let mut rows = Vec::new();
    for m in [Method::Advdm, Method::Photoguard, Method::Mist] {
        for (i, r) in protections()[&m].iter().enumerate() {
            rows.push(BudgetRatioRow {
                image: i,
                domain: Domain::of_class(l.images.labels[i]),
                method: m,
                value: budget_ratio(&images()[i], &r.x_adv, &l.a).unwrap(),
            });
        }
    }
    let report = BudgetRatioReport::new(rows, 1.0);
    let dir = tempfile::tempdir().unwrap();
    report.save(dir.path()).unwrap();
    let hist = std::fs::read_to_string(dir.path().join("budget_ratio_hist.csv")).unwrap();
    let domains_in_hist = Domain::ALL.iter().filter(|d| hist.contains(&format!(",{},", d.name()))).count();
    let medians: Vec<(Method, f64, usize)> = [Method::Advdm, Method::Photoguard, Method::Mist]
        .into_iter()
        .map(|m| {
            let s = report.pooled(m).unwrap();
            (m, s.median.unwrap_or(f64::NAN), s.count - s.undefined)
        })
        .collect();
    let secs = start.elapsed().as_secs_f64();
    let floor = expect("/budget_ratio_median");
    verdict(
        "encoder bottleneck",
        medians.iter().all(|(_, med, n)| *med > floor && *n >= 64) && domains_in_hist == Domain::ALL.len() && secs < 1800.0,
        format!(
            "median dz/dx {} (floor {floor}), histograms for {domains_in_hist} sub-datasets",
            medians.iter().map(|(m, v, n)| format!("{m} {v:.2} (n={n})")).collect::<Vec<_>>().join(", ")
        ),
    );
}

#[test]
fn latent_attacks_barely_move_the_edit() {
    let l = lab();
    let n = 32;
    let edit = EditProtocol::new(EDIT_STRENGTH, 0);
    let cfg = RobustnessConfig {
        budgets: vec![0.5],
        ..Default::default()
    };
    let latent = denoiser_robustness_probe(&l.a, &images()[..n], &cfg, &edit, &l.fx, 1).unwrap();
    let pixel = pixel_attack_similarity(&l.a, &images()[..n], &adversarial(Method::Advdm)[..n], &edit, &l.fx, 1).unwrap();
    let row = &latent[0];
    verdict(
        "denoiser robustness",
        row.similarity > pixel,
        format!(
            "latent budget 0.5 similarity {:.3} (loss {:.4} -> {:.4}) vs pixel advdm 16/255 similarity {pixel:.3}, {n} images",
            row.similarity, row.loss_clean, row.loss_attacked
        ),
    );
}

#[test]
fn edits_reflect_the_corrupted_latent() {
    let l = lab();
    let edit = EditProtocol::new(EDIT_STRENGTH, 0);
    let n = images().len();
    let baseline: Vec<f64> = (0..n).map(|i| roundtrip_reflection(&images()[i], &l.a, &edit, i, &l.fx).unwrap()).collect();
    let base = mean(&baseline);
    let margin = expect("/reflection_margin");
    let mut parts = Vec::new();
    let mut pass = n >= 64;
    for m in Method::ALL {
        let adv = adversarial(m);
        let v: Vec<f64> = (0..n).map(|i| roundtrip_reflection(&adv[i], &l.a, &edit, i, &l.fx).unwrap()).collect();
        let mv = mean(&v);
        pass &= mv >= base - margin;
        parts.push(format!("{m} {mv:.3}"));
    }
    verdict(
        "round-trip reflection",
        pass,
        format!("baseline {base:.3} (margin {margin}); {} over {n} images", parts.join(", ")),
    );
}

#[test]
fn descent_protections_blur_the_edit() {
    let input = report_input();
    let s = STRENGTHS.iter().position(|&v| v == EDIT_STRENGTH).unwrap();
    let hf = |name: &str| -> Vec<f64> { run(input, name).edits[s].iter().map(high_frequency_energy).collect() };
    let clean = hf(CLEAN);
    let plus = hf(Method::SdsPlus.name());
    let alpha = expect("/blur_alpha");
    let mut pass = clean.len() >= 64;
    let mut parts = vec![format!("clean {:.3e}", mean(&clean)), format!("sds_plus {:.3e}", mean(&plus))];
    for m in [Method::SdsMinus, Method::AdvdmMinus] {
        let v = hf(m.name());
        let p = paired_p_below(&v, &clean);
        pass &= p < alpha && mean(&v) < mean(&plus);
        parts.push(format!("{m} {:.3e} (p={p:.1e})", mean(&v)));
    }
    verdict("descent blur", pass, format!("mean high-frequency energy: {}", parts.join(", ")));
}

#[test]
fn every_iterate_stays_in_budget() {
    let start = Instant::now();
    let b = tiny_bundle(40);
    let target = latentshield::data::default_target_pattern(8);
    let tol = expect("/budget_tolerance");
    let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig {
        failure_persistence: None,
        ..ProptestConfig::with_cases(200)
    });
    let worst = std::cell::Cell::new(0.0f64);
    let strategy = (0usize..7, 1usize..12, 0.2f64..4.0, any::<u64>());
    let result = runner.run(&strategy, |(m, iters, step_ratio, seed)| {
        let x = Tensor::rand_uniform(&[1, 1, 8, 8], 0.0, 1.0, &mut rng(seed)).map(|v| if v < 0.1 { 0.0 } else if v > 0.9 { 1.0 } else { v });
        let cfg = AttackConfig {
            step: BUDGET * step_ratio / 4.0,
            iters,
            seed,
            ..AttackConfig::for_method(Method::ALL[m])
        };
        let mut ok = true;
        let mut local: f64 = 0.0;
        let mut hook = |_: usize, xi: &Tensor| {
            local = local.max(xi.sub(&x).max_abs());
            ok &= xi.data().iter().all(|v| (0.0..=1.0).contains(v));
        };
        pgd_protect_with(&x, &b, &cfg, Some(&target), Some(&mut hook)).unwrap();
        prop_assert!(ok && local <= BUDGET + tol);
        worst.set(worst.get().max(local));
        Ok(())
    });
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "budget and projection invariants",
        result.is_ok() && secs < 300.0,
        format!("200 configs, worst |x_t - x| = {:.6} (budget {BUDGET:.6}), {secs:.1}s{}", worst.get(), result.err().map_or(String::new(), |e| format!(", {e}"))),
    );
}

#[test]
fn protections_lower_alignment_and_raise_frechet_distance() {
    let l = lab();
    let input = report_input();
    let rep = build_report(input, &EditMetric::ALL, &l.fx, 32).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for &s in &STRENGTHS {
        let get = |m: &str, metric: &str| rep.aggregate(m, metric, Some(s)).and_then(|a| a.mean).unwrap_or(f64::NAN);
        let (ia0, fd0) = (get(CLEAN, "ia_score"), get(CLEAN, "frechet_distance"));
        parts.push(format!("s={s}: clean ia {ia0:.3} fd {fd0:.3}"));
        for m in Method::ALL {
            let (ia, fd) = (get(m.name(), "ia_score"), get(m.name(), "frechet_distance"));
            pass &= ia < ia0 && fd > fd0;
            parts.push(format!("{m} {ia:.3}/{fd:.3}"));
        }
    }
    verdict("protection ordering", pass, parts.join(", "));
}

#[test]
fn purification_only_partly_removes_protection() {
    let l = lab();
    let edit = EditProtocol::new(EDIT_STRENGTH, 0);
    let rep = purification_probe(images(), &adversarial(Method::SdsMinus), &l.a, &Purification::defaults(), &edit, &l.fx, 1).unwrap();
    let pass = rep.purified.iter().all(|(_, v)| 0.0 < *v && *v < rep.protected);
    let parts: Vec<String> = rep.purified.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
    verdict(
        "purification partiality",
        pass,
        format!(
            "sds_minus protection score: clean 0, protected {:.4}, purified {} over {} images",
            rep.protected,
            parts.join(", "),
            rep.images
        ),
    );
}

#[test]
fn pixel_diffusion_resists_the_attack() {
    let l = lab();
    let n = 32;
    let edit = EditProtocol::new(EDIT_STRENGTH, 0);
    let rep = pixel_dm_attack_probe(&l.pixel, &images()[..n], BUDGET, 100, &edit, &l.fx, 11, 1).unwrap();
    let floor = expect("/pixel_probe_ratio");
    verdict(
        "pixel diffusion attack failure",
        rep.ratio() >= floor,
        format!(
            "attacked similarity {:.3} vs clean {:.3}, ratio {:.3} (floor {floor}), {n} images",
            rep.attacked_similarity,
            rep.clean_similarity,
            rep.ratio()
        ),
    );
}

#[test]
fn protection_transfers_to_an_independent_bundle() {
    let l = lab();
    let n = 32;
    let edit = EditProtocol::new(EDIT_STRENGTH, 0);
    let floor = expect("/transfer_retention");
    let mut parts = Vec::new();
    let mut pass = true;
    for m in [Method::Advdm, Method::Mist, Method::SdsMinus] {
        let t = transfer_probe(&images()[..n], &adversarial(m)[..n], &l.a, &l.b, &edit, &l.fx, 1).unwrap();
        pass &= t.retention() >= floor;
        parts.push(format!("{m} native {:.3} transfer {:.3} ({:.0}%)", t.native, t.transfer, 100.0 * t.retention()));
    }
    verdict("transfer", pass, format!("{} over {n} images (floor {:.0}%)", parts.join(", "), floor * 100.0));
}

#[test]
fn runs_and_checkpoints_are_byte_identical() {
    let l = lab();
    let xs = &images()[..3];
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut csv = Vec::new();
    for d in &dirs {
        for m in [Method::Mist, Method::SdsMinus] {
            let cfg = AttackConfig {
                iters: 5,
                ..AttackConfig::for_method(m)
            };
            for (i, r) in protect_batch(xs, &l.a, &cfg, 1).unwrap().iter().enumerate() {
                save_png(&r.x_adv, &d.path().join(format!("{m}_{i}.png"))).unwrap();
                save_npy(&r.delta, &d.path().join(format!("{m}_{i}_delta.npy"))).unwrap();
            }
        }
        let adv: Vec<Tensor> = (0..3).map(|i| latentshield::data::load_png(&d.path().join(format!("mist_{i}.png"))).unwrap()).collect();
        let input = ReportInput::assemble(
            (0..3).map(|i| i.to_string()).collect(),
            xs.to_vec(),
            vec![("mist".into(), adv, vec![0.0; 3])],
            &l.a,
            &[EditProtocol {
                strength: 0.2,
                steps: 20,
                seed: 0,
            }],
            1,
        )
        .unwrap();
        csv.push(build_report(&input, &EditMetric::ALL, &l.fx, 1).unwrap().metrics_csv());
    }
    let mut same_files = true;
    for e in std::fs::read_dir(dirs[0].path()).unwrap().flatten() {
        same_files &= std::fs::read(e.path()).unwrap() == std::fs::read(dirs[1].path().join(e.file_name())).unwrap();
    }

    let path = BundleRecipe::standard(0).checkpoint_path(&cache_root());
    let on_disk = std::fs::read(&path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let copy = dirs[0].path().join("copy.lsc");
    save_checkpoint(&loaded, &copy).unwrap();
    let round_trip = checkpoint_bytes(&loaded).unwrap() == on_disk && std::fs::read(&copy).unwrap() == on_disk;
    verdict(
        "determinism and persistence",
        same_files && csv[0] == csv[1] && round_trip,
        format!("protected images and deltas identical: {same_files}, metric CSVs identical: {}, checkpoint round trip bitwise: {round_trip}", csv[0] == csv[1]),
    );
}
