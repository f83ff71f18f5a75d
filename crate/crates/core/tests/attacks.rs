mod common;

use common::*;
use latentshield::attacks::*;
use latentshield::diffusion::{Cond, NoisePredictor, NoiseSchedule};
use latentshield::autograd::{Graph, Var};
use latentshield::models::LatentModel;
use latentshield::{Error, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn image(seed: u64, res: usize) -> Tensor {
    Tensor::rand_uniform(&[1, 1, res, res], 0.2, 0.8, &mut rng(seed))
}

fn unit_rms(shape: &[usize], seed: u64) -> Tensor {
    let e = Tensor::randn(shape, &mut rng(seed));
    e.scale(1.0 / e.mean_sq().sqrt())
}

/// Central differences of `f` along 20 random unit directions.
fn check_directional(f: impl Fn(&Tensor) -> f64, x: &Tensor, grad: &Tensor, seed: u64) {
    let h = 1e-5;
    let mut r = rng(seed);
    for probe in 0..20 {
        let d = Tensor::randn(x.shape(), &mut r);
        let d = d.scale(1.0 / d.norm());
        let fd = (f(&x.axpby(1.0, &d, h)) - f(&x.axpby(1.0, &d, -h))) / (2.0 * h);
        let an = grad.dot(&d);
        let err = rel_err(fd, an);
        assert!(err < 1e-4 || (fd - an).abs() < 1e-10, "probe {probe}: fd {fd} vs analytic {an} (rel {err})");
    }
}

#[test]
fn full_gradient_matches_finite_differences() {
    let b = tiny_bundle(1);
    let x = image(2, 8);
    let eps = Tensor::randn(b.encode(&x).shape(), &mut rng(3));
    for (t, cond) in [(50, Cond::None), (600, Cond::Class(2))] {
        let ev = full_semantic_gradient(&b, &x, t, &eps, &cond).unwrap();
        assert!(ev.grad.max_abs() > 0.0);
        check_directional(|y| semantic_loss(&b, y, t, &eps, &cond).unwrap(), &x, &ev.grad, t as u64);
        assert!((ev.loss - semantic_loss(&b, &x, t, &eps, &cond).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn textural_gradient_matches_finite_differences() {
    let b = tiny_bundle(4);
    let x = image(5, 8);
    let y = latentshield::data::default_target_pattern(8);
    let (loss, grad) = textural_gradient(&b, &x, &y).unwrap();
    assert!(loss < 0.0);
    check_directional(|v| textural_loss(&b, v, &y).unwrap(), &x, &grad, 9);
    assert_eq!(textural_loss(&b, &y, &y).unwrap(), 0.0);
}

#[test]
fn sds_is_half_the_full_gradient_for_a_shift_denoiser() {
    let c = Tensor::randn(&[1, 2, 2, 2], &mut rng(7)).scale(0.3);
    let m = LinearModel::new(Box::new(ShiftDenoiser { c: c.clone() }), 8);
    let x = image(9, 8);
    let eps = Tensor::randn(&[1, 2, 2, 2], &mut rng(10));
    for t in [0, 250, 999] {
        let full = full_semantic_gradient(&m, &x, t, &eps, &Cond::None).unwrap();
        let sds = sds_gradient(&m, &x, t, &eps, &Cond::None).unwrap();
        let diff = sds.grad.sub(&full.grad.scale(0.5)).max_abs();
        assert!(diff <= 1e-6 * full.grad.max_abs().max(1e-12), "t={t}: {diff}");
        assert!((sds.loss - full.loss).abs() < 1e-12);

        // (1/N) s A^T r with r = z_t + c - eps
        let s = m.schedule.signal_scale(t);
        let z0 = m.encode(&x);
        let zt = z0.scale(s).add(&eps.scale(m.schedule.noise_scale(t)));
        let r = zt.add(&c).sub(&eps);
        let expect = m.adjoint(&r).scale(s / r.numel() as f64);
        assert!(sds.grad.sub(&expect).max_abs() < 1e-12);
        assert!(full.grad.sub(&expect.scale(2.0)).max_abs() < 1e-12);
    }
}

#[test]
fn sds_builds_no_gradient_state_in_the_denoiser() {
    let b = tiny_bundle(11);
    let x = image(12, 8);
    let eps = Tensor::randn(b.encode(&x).shape(), &mut rng(13));
    let sds = sds_gradient(&b, &x, 300, &eps, &Cond::None).unwrap();
    let full = full_semantic_gradient(&b, &x, 300, &eps, &Cond::None).unwrap();
    assert_eq!(sds.denoiser_tracked_nodes, 0);
    assert!(full.denoiser_tracked_nodes > 0);
    assert!(sds.peak_bytes < full.peak_bytes);
}

#[test]
fn oracle_and_null_denoisers_give_known_losses() {
    let x = image(14, 8);
    let probe = LinearModel::new(Box::new(ZeroDenoiser), 15);
    let z0 = probe.encode(&x);
    let oracle = LinearModel::new(
        Box::new(OracleDenoiser {
            z0: z0.clone(),
            schedule: NoiseSchedule::default_linear(),
        }),
        15,
    );
    let eps = unit_rms(z0.shape(), 16);
    for t in [1, 400, 999] {
        assert!(semantic_loss(&oracle, &x, t, &eps, &Cond::None).unwrap() < 1e-20);
        let ev = full_semantic_gradient(&oracle, &x, t, &eps, &Cond::None).unwrap();
        assert!(ev.grad.max_abs() < 1e-9, "gradient at the self-consistent point: {}", ev.grad.max_abs());
        let zero = full_semantic_gradient(&probe, &x, t, &eps, &Cond::None).unwrap();
        assert!((zero.loss - 1.0).abs() < 1e-12);
        assert_eq!(zero.grad.max_abs(), 0.0);
    }
}

#[test]
fn textural_gradient_of_a_linear_encoder_is_closed_form() {
    let m = LinearModel::new(Box::new(ZeroDenoiser), 17);
    let x = image(18, 8);
    let y = image(19, 8);
    let (loss, grad) = textural_gradient(&m, &x, &y).unwrap();
    let r = m.encode(&x).sub(&m.encode(&y));
    assert!((loss + r.sum_sq()).abs() < 1e-12);
    assert!(grad.sub(&m.adjoint(&r).scale(-2.0)).max_abs() < 1e-12);
}

fn small_cfg(method: Method, iters: usize) -> AttackConfig {
    AttackConfig {
        iters,
        seed: 21,
        ..AttackConfig::for_method(method)
    }
}

#[test]
fn zero_iterations_return_the_input() {
    let b = tiny_bundle(20);
    let x = image(21, 8);
    for m in Method::ALL {
        let r = pgd_protect(&x, &b, &small_cfg(m, 0)).unwrap();
        assert_eq!(r.x_adv, x);
        assert_eq!(r.delta.max_abs(), 0.0);
        assert!(r.loss_trace.is_empty());
    }
}

#[test]
fn opposite_directions_take_opposite_first_steps() {
    let b = tiny_bundle(22);
    let x = image(23, 8);
    let up = pgd_protect(&x, &b, &small_cfg(Method::SdsPlus, 1)).unwrap();
    let down = pgd_protect(&x, &b, &small_cfg(Method::SdsMinus, 1)).unwrap();
    assert!(up.delta.max_abs() > 0.0);
    assert!(up.delta.add(&down.delta).max_abs() < 1e-15);
    let up = pgd_protect(&x, &b, &small_cfg(Method::Advdm, 1)).unwrap();
    let down = pgd_protect(&x, &b, &small_cfg(Method::AdvdmMinus, 1)).unwrap();
    assert!(up.delta.add(&down.delta).max_abs() < 1e-15);
}

#[test]
fn protection_is_deterministic_for_a_seed() {
    let b = tiny_bundle(24);
    let x = image(25, 8);
    for m in [Method::Advdm, Method::Mist, Method::Sdst] {
        let a = pgd_protect(&x, &b, &small_cfg(m, 4)).unwrap();
        let c = pgd_protect(&x, &b, &small_cfg(m, 4)).unwrap();
        assert_eq!(a.x_adv, c.x_adv, "{m}");
        assert_eq!(a.loss_trace, c.loss_trace);
    }
    let batch = protect_batch(&[x.clone(), x.clone()], &b, &small_cfg(Method::Advdm, 3), 2).unwrap();
    let serial = protect_batch(&[x.clone(), x.clone()], &b, &small_cfg(Method::Advdm, 3), 1).unwrap();
    for (p, q) in batch.iter().zip(&serial) {
        assert_eq!(p.x_adv, q.x_adv);
    }
    assert_ne!(batch[0].x_adv, batch[1].x_adv, "items draw different noise");
}

struct NanDenoiser;

impl NoisePredictor for NanDenoiser {
    fn predict(&self, g: &mut Graph, z: Var, _t: &[usize], _cond: &Cond) -> Var {
        g.scale(z, f64::NAN)
    }
}

#[test]
fn non_finite_gradients_abort_the_attack() {
    let m = LinearModel::new(Box::new(NanDenoiser), 26);
    let err = pgd_protect(&image(27, 8), &m, &small_cfg(Method::Advdm, 3)).unwrap_err();
    assert!(matches!(err, Error::NanGradient { iteration: 0 }), "{err}");
}

#[test]
fn textural_methods_need_a_target() {
    let b = tiny_bundle(28);
    let x = image(29, 8);
    for m in [Method::Photoguard, Method::Mist, Method::Sdst] {
        let cfg = small_cfg(m, 1);
        let err = pgd_protect_with(&x, &b, &cfg, None, None).unwrap_err();
        assert!(matches!(err, Error::MissingTarget(_)), "{err}");
    }
    assert!(pgd_protect_with(&x, &b, &small_cfg(Method::Advdm, 1), None, None).is_ok());
}

#[test]
fn untrained_bundles_are_refused() {
    let mut b = tiny_bundle(30);
    b.meta.trained = false;
    let err = pgd_protect(&image(31, 8), &b, &small_cfg(Method::Advdm, 1)).unwrap_err();
    assert!(matches!(err, Error::UntrainedBundle(_)));
}

#[test]
fn wrong_resolution_is_rejected() {
    let b = tiny_bundle(32);
    let err = pgd_protect(&image(33, 16), &b, &small_cfg(Method::Advdm, 1)).unwrap_err();
    assert!(matches!(err, Error::ResolutionMismatch(_)));
}

#[test]
fn inconsistent_configs_are_rejected() {
    let base = small_cfg(Method::SdsPlus, 1);
    for bad in [
        AttackConfig { use_sds: false, ..base.clone() },
        AttackConfig { direction: Direction::Descent, ..base.clone() },
        AttackConfig { budget: 0.0, ..base.clone() },
        AttackConfig { mc_samples: 0, ..base.clone() },
        AttackConfig { textural_weight: 1.0, ..base.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::InconsistentConfig(_))));
    }
    assert!(make_method("glaze").is_err());
}

#[test]
fn latent_attack_stays_in_its_budget() {
    let b = tiny_bundle(34);
    let z = b.encode(&image(35, 8));
    let adv = latent_pgd(&z, &b, 0.1, 0.02, 8, 36, &Cond::None).unwrap();
    let d = adv.sub(&z).max_abs();
    assert!(d > 0.0 && d <= 0.1 + 1e-12);
    assert_eq!(latent_pgd(&z, &b, 0.1, 0.02, 0, 36, &Cond::None).unwrap(), z);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn every_iterate_respects_the_budget(
        budget in 1e-4f64..0.5,
        step_ratio in 0.01f64..3.0,
        iters in 0usize..6,
        method in 0usize..7,
        seed in any::<u64>(),
    ) {
        let m = LinearModel::new(Box::new(ShiftDenoiser { c: Tensor::full(&[1, 2, 2, 2], 0.1) }), seed % 5);
        let mut r = rng(seed);
        let x = Tensor::new(&[1, 1, 8, 8], (0..64).map(|_| if r.random_bool(0.2) { r.random_range(0..2) as f64 } else { r.random() }).collect()).unwrap();
        let cfg = AttackConfig { budget, step: budget * step_ratio, iters, seed, ..AttackConfig::for_method(Method::ALL[method]) };
        let target = latentshield::data::default_target_pattern(8);
        let mut worst: f64 = 0.0;
        let mut in_range = true;
        let mut hook = |_: usize, xi: &Tensor| {
            worst = worst.max(xi.sub(&x).max_abs());
            in_range &= xi.data().iter().all(|v| (0.0..=1.0).contains(v));
        };
        let res = pgd_protect_with(&x, &m, &cfg, Some(&target), Some(&mut hook)).unwrap();
        prop_assert!(worst <= budget + 1e-12, "{} > {}", worst, budget);
        prop_assert!(in_range);
        prop_assert_eq!(res.loss_trace.len(), iters);
    }
}
