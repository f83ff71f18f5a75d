//! Protection attacks: semantic and textural losses, full and SDS gradients,
//! sign-PGD in pixel space, PGD directly in latent space, and the registry of
//! named methods.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{default_target_pattern, load_png, save_npy, save_png, write_json_atomic};
use crate::diffusion::{q_sample_var, Cond};
use crate::error::{Error, Result};
use crate::models::LatentModel;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Advdm,
    AdvdmMinus,
    Photoguard,
    Mist,
    SdsPlus,
    SdsMinus,
    Sdst,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Advdm,
        Method::AdvdmMinus,
        Method::Photoguard,
        Method::Mist,
        Method::SdsPlus,
        Method::SdsMinus,
        Method::Sdst,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Advdm => "advdm",
            Method::AdvdmMinus => "advdm_minus",
            Method::Photoguard => "photoguard",
            Method::Mist => "mist",
            Method::SdsPlus => "sds_plus",
            Method::SdsMinus => "sds_minus",
            Method::Sdst => "sdst",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::UnknownMethod(name.to_string()))
    }

    pub fn uses_semantic(self) -> bool {
        self != Method::Photoguard
    }

    pub fn uses_textural(self) -> bool {
        matches!(self, Method::Photoguard | Method::Mist | Method::Sdst)
    }

    pub fn uses_sds(self) -> bool {
        matches!(self, Method::SdsPlus | Method::SdsMinus | Method::Sdst)
    }

    pub fn direction(self) -> Direction {
        match self {
            Method::AdvdmMinus | Method::SdsMinus | Method::Sdst => Direction::Descent,
            _ => Direction::Ascent,
        }
    }

    pub fn default_textural_weight(self) -> f64 {
        match self {
            Method::Photoguard | Method::Mist => 1.0,
            Method::Sdst => 5.0,
            _ => 0.0,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Direction of the update on the semantic loss. The textural loss is
/// always ascended, which pulls the latent toward the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Ascent,
    Descent,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Ascent => 1.0,
            Direction::Descent => -1.0,
        }
    }
}

/// Source of the textural target image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetImage {
    #[default]
    None,
    /// The bundled crossed-grating pattern.
    Pattern,
    /// An 8-bit PNG on disk.
    File(PathBuf),
}

impl TargetImage {
    pub fn load(&self, resolution: usize) -> Result<Option<Tensor>> {
        match self {
            TargetImage::None => Ok(None),
            TargetImage::Pattern => Ok(Some(default_target_pattern(resolution))),
            TargetImage::File(p) => {
                let t = load_png(p)?;
                let (_, _, h, w) = t.dims4();
                if h != resolution || w != resolution {
                    return Err(Error::ResolutionMismatch(format!(
                        "target {} is {h}x{w}, expected {resolution}x{resolution}",
                        p.display()
                    )));
                }
                Ok(Some(t))
            }
        }
    }
}

pub const DEFAULT_BUDGET: f64 = 16.0 / 255.0;
pub const DEFAULT_STEP: f64 = 1.0 / 255.0;
pub const DEFAULT_ITERS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub method: Method,
    pub budget: f64,
    pub step: f64,
    pub iters: usize,
    /// Weight of the textural gradient relative to the semantic one. Both
    /// terms enter the step on a per-latent-element scale.
    pub textural_weight: f64,
    pub target: TargetImage,
    pub mc_samples: usize,
    pub seed: u64,
    pub use_sds: bool,
    pub direction: Direction,
    /// Class condition used by the semantic loss; `None` is unconditional.
    #[serde(default)]
    pub class: Option<usize>,
    /// Draw every iteration at this timestep instead of uniformly.
    #[serde(default)]
    pub fixed_timestep: Option<usize>,
}

/// Template configuration for a named method.
pub fn make_method(name: &str) -> Result<AttackConfig> {
    Ok(AttackConfig::for_method(Method::parse(name)?))
}

impl AttackConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            method,
            budget: DEFAULT_BUDGET,
            step: DEFAULT_STEP,
            iters: DEFAULT_ITERS,
            textural_weight: method.default_textural_weight(),
            target: if method.uses_textural() {
                TargetImage::Pattern
            } else {
                TargetImage::None
            },
            mc_samples: 1,
            seed: 0,
            use_sds: method.uses_sds(),
            direction: method.direction(),
            class: None,
            fixed_timestep: None,
        }
    }

    pub fn requires_target(&self) -> bool {
        self.method.uses_textural()
    }

    pub fn cond(&self) -> Cond {
        self.class.map_or(Cond::None, Cond::Class)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.method;
        let bad = |msg: String| Err(Error::InconsistentConfig(msg));
        if self.use_sds != m.uses_sds() {
            return bad(format!("{m} has use_sds = {}", m.uses_sds()));
        }
        if self.direction != m.direction() {
            return bad(format!("{m} has direction {:?}", m.direction()));
        }
        if !(self.budget > 0.0 && self.budget <= 1.0) {
            return bad(format!("budget {} outside (0, 1]", self.budget));
        }
        if !(self.step > 0.0) {
            return bad(format!("step {} must be positive", self.step));
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be at least 1".into());
        }
        if !(self.textural_weight >= 0.0) {
            return bad(format!("textural weight {} must be >= 0", self.textural_weight));
        }
        if m.uses_textural() && self.textural_weight == 0.0 {
            return bad(format!("{m} needs a positive textural weight"));
        }
        if !m.uses_textural() && self.textural_weight != 0.0 {
            return bad(format!("{m} has no textural term but weight {}", self.textural_weight));
        }
        Ok(())
    }
}

fn check_inputs(model: &dyn LatentModel, x: &Tensor) -> Result<()> {
    if !model.is_trained() {
        return Err(Error::UntrainedBundle("attacks need a trained bundle".into()));
    }
    model.check_image(x)
}

/// Loss and input gradient from one evaluation, with instrumentation.
#[derive(Clone, Debug)]
pub struct GradientEval {
    pub loss: f64,
    pub grad: Tensor,
    /// Graph nodes carrying gradient state created by the denoiser call.
    pub denoiser_tracked_nodes: usize,
    pub peak_bytes: usize,
}

/// `mean((eps_theta(q_sample(E(x), t, eps), t, cond) - eps)^2)`.
pub fn semantic_loss(model: &dyn LatentModel, x: &Tensor, t: usize, eps: &Tensor, cond: &Cond) -> Result<f64> {
    check_inputs(model, x)?;
    model.schedule().check_t(t)?;
    let n = x.shape()[0];
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let z0 = model.encode_var(&mut g, xv);
    g.value(z0).same_shape(eps)?;
    let zt = q_sample_var(&mut g, z0, &vec![t; n], eps, model.schedule());
    let pred = model.denoiser().predict(&mut g, zt, &vec![t; n], cond);
    let target = g.constant(eps.clone());
    let d = g.sub(pred, target);
    let l = g.mean_square(d);
    Ok(g.value(l).data()[0])
}

/// Exact reverse-mode gradient of [`semantic_loss`] through denoiser and
/// encoder.
pub fn full_semantic_gradient(
    model: &dyn LatentModel,
    x: &Tensor,
    t: usize,
    eps: &Tensor,
    cond: &Cond,
) -> Result<GradientEval> {
    check_inputs(model, x)?;
    model.schedule().check_t(t)?;
    let n = x.shape()[0];
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let z0 = model.encode_var(&mut g, xv);
    g.value(z0).same_shape(eps)?;
    let zt = q_sample_var(&mut g, z0, &vec![t; n], eps, model.schedule());
    let before = g.tracked_nodes();
    let pred = model.denoiser().predict(&mut g, zt, &vec![t; n], cond);
    let denoiser_tracked_nodes = g.tracked_nodes() - before;
    let target = g.constant(eps.clone());
    let d = g.sub(pred, target);
    let l = g.mean_square(d);
    let loss = g.value(l).data()[0];
    let mut grads = g.backward(l)?;
    Ok(GradientEval {
        loss,
        grad: grads.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape())),
        denoiser_tracked_nodes,
        peak_bytes: g.peak_saved_bytes(),
    })
}

/// Score-distillation gradient: the residual `eps_theta - eps`, scaled by
/// `1/N` for the mean, pulled back through `dz_t/dx` only. The denoiser runs
/// without gradient state.
///
/// When `eps_theta(z, t) = z + c` this is exactly half of
/// [`full_semantic_gradient`].
pub fn sds_gradient(model: &dyn LatentModel, x: &Tensor, t: usize, eps: &Tensor, cond: &Cond) -> Result<GradientEval> {
    check_inputs(model, x)?;
    model.schedule().check_t(t)?;
    let n = x.shape()[0];
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let z0 = model.encode_var(&mut g, xv);
    g.value(z0).same_shape(eps)?;
    let zt = q_sample_var(&mut g, z0, &vec![t; n], eps, model.schedule());

    let mut dg = Graph::inference();
    let zc = dg.constant(g.value(zt).clone());
    let pred = model.denoiser().predict(&mut dg, zc, &vec![t; n], cond);
    let denoiser_tracked_nodes = dg.tracked_nodes();
    let residual = dg.value(pred).sub(eps);
    let peak = g.peak_saved_bytes() + dg.peak_saved_bytes();
    drop(dg);

    let loss = residual.mean_sq();
    let seed = residual.scale(1.0 / residual.numel() as f64);
    let mut grads = g.backward_with(zt, seed)?;
    Ok(GradientEval {
        loss,
        grad: grads.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape())),
        denoiser_tracked_nodes,
        peak_bytes: peak,
    })
}

fn encode_target(model: &dyn LatentModel, y: &Tensor) -> Tensor {
    model.encode(y)
}

fn textural_eval(model: &dyn LatentModel, x: &Tensor, zy: &Tensor, need_grad: bool) -> Result<(f64, Option<Tensor>, usize)> {
    let mut g = if need_grad { Graph::new() } else { Graph::inference() };
    let xv = g.input(x.clone());
    let zx = model.encode_var(&mut g, xv);
    g.value(zx).same_shape(zy)?;
    let target = g.constant(zy.clone());
    let d = g.sub(zx, target);
    let s = g.sum_square(d);
    let loss = -g.value(s).data()[0];
    if !need_grad {
        return Ok((loss, None, 0));
    }
    let l = g.scale(s, -1.0);
    let mut grads = g.backward(l)?;
    let grad = grads.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
    Ok((loss, Some(grad), g.peak_saved_bytes()))
}

/// `-||E(x) - E(y)||^2` over the model latents.
pub fn textural_loss(model: &dyn LatentModel, x: &Tensor, y: &Tensor) -> Result<f64> {
    model.check_image(x)?;
    model.check_image(y)?;
    Ok(textural_eval(model, x, &encode_target(model, y), false)?.0)
}

/// Gradient of [`textural_loss`] with respect to `x`.
pub fn textural_gradient(model: &dyn LatentModel, x: &Tensor, y: &Tensor) -> Result<(f64, Tensor)> {
    model.check_image(x)?;
    model.check_image(y)?;
    let (loss, grad, _) = textural_eval(model, x, &encode_target(model, y), true)?;
    Ok((loss, grad.expect("gradient requested")))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub semantic: Option<f64>,
    pub textural: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtectionResult {
    pub x_adv: Tensor,
    pub delta: Tensor,
    pub loss_trace: Vec<LossPoint>,
    pub grad_seconds_per_iter: f64,
    pub peak_workspace_bytes: usize,
}

/// Projects `x` into the `l_inf` ball of radius `budget` around `center`,
/// then into `[0, 1]`.
pub fn project(x: &Tensor, center: &Tensor, budget: f64) -> Tensor {
    x.zip(center, |v, c| v.clamp(c - budget, c + budget).clamp(0.0, 1.0))
}

/// One sign step: `x + step * sign(g)`, projected.
pub fn sign_step(x: &Tensor, g: &Tensor, step: f64, center: &Tensor, budget: f64) -> Tensor {
    let moved = x.zip(g, |v, gv| v + step * sign(gv));
    project(&moved, center, budget)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-iteration observer: `(iteration, current x)`.
pub type IterHook<'a> = dyn FnMut(usize, &Tensor) + 'a;

/// Sign-PGD protection of a single image.
pub fn pgd_protect(x: &Tensor, model: &dyn LatentModel, cfg: &AttackConfig) -> Result<ProtectionResult> {
    let target = cfg.target.load(model.resolution())?;
    pgd_protect_with(x, model, cfg, target.as_ref(), None)
}

/// [`pgd_protect`] with an explicit target image and an optional observer
/// called with every iterate, including the starting point.
pub fn pgd_protect_with(
    x: &Tensor,
    model: &dyn LatentModel,
    cfg: &AttackConfig,
    target: Option<&Tensor>,
    mut hook: Option<&mut IterHook<'_>>,
) -> Result<ProtectionResult> {
    cfg.validate()?;
    check_inputs(model, x)?;
    let zy = if cfg.requires_target() {
        let y = target.ok_or_else(|| Error::MissingTarget(format!("{} needs a target image", cfg.method)))?;
        model.check_image(y)?;
        Some(encode_target(model, y))
    } else {
        None
    };
    if let Some(t) = cfg.fixed_timestep {
        model.schedule().check_t(t)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let t_max = model.schedule().len();
    let cond = cfg.cond();
    let latent_shape = model.encode(x).shape().to_vec();
    let mut xt = x.clamp(0.0, 1.0);
    let mut trace = Vec::with_capacity(cfg.iters);
    let mut grad_seconds = 0.0;
    let mut peak = 0usize;
    if let Some(h) = hook.as_deref_mut() {
        h(0, &xt);
    }

    for it in 0..cfg.iters {
        let start = Instant::now();
        let mut total = Tensor::zeros(x.shape());
        let mut point = LossPoint {
            semantic: None,
            textural: None,
        };
        if cfg.method.uses_semantic() {
            let mut acc = Tensor::zeros(x.shape());
            let mut loss = 0.0;
            for _ in 0..cfg.mc_samples {
                let t = cfg.fixed_timestep.unwrap_or_else(|| rng.random_range(0..t_max));
                let eps = Tensor::randn(&latent_shape, &mut rng);
                let ev = if cfg.use_sds {
                    sds_gradient(model, &xt, t, &eps, &cond)?
                } else {
                    full_semantic_gradient(model, &xt, t, &eps, &cond)?
                };
                acc.add_assign(&ev.grad);
                loss += ev.loss;
                peak = peak.max(ev.peak_bytes);
            }
            let k = cfg.mc_samples as f64;
            total = acc.scale(cfg.direction.sign() / k);
            point.semantic = Some(loss / k);
        }
        if let Some(zy) = &zy {
            let (loss, grad, bytes) = textural_eval(model, &xt, zy, true)?;
            let w = cfg.textural_weight / zy.numel() as f64;
            total = total.axpby(1.0, &grad.expect("gradient requested"), w);
            point.textural = Some(loss);
            peak = peak.max(bytes);
        }
        if !total.is_finite() {
            return Err(Error::NanGradient { iteration: it });
        }
        xt = sign_step(&xt, &total, cfg.step, x, cfg.budget);
        grad_seconds += start.elapsed().as_secs_f64();
        trace.push(point);
        if let Some(h) = hook.as_deref_mut() {
            h(it + 1, &xt);
        }
    }

    let delta = xt.sub(x);
    Ok(ProtectionResult {
        x_adv: xt,
        delta,
        loss_trace: trace,
        grad_seconds_per_iter: if cfg.iters > 0 { grad_seconds / cfg.iters as f64 } else { 0.0 },
        peak_workspace_bytes: peak,
    })
}

/// Seed for item `index` of a batch run with base seed `seed`.
pub fn item_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.random()
}

/// Protects every image independently; item `i` uses `item_seed(cfg.seed, i)`.
pub fn protect_batch(
    images: &[Tensor],
    model: &dyn LatentModel,
    cfg: &AttackConfig,
    jobs: usize,
) -> Result<Vec<ProtectionResult>> {
    use rayon::prelude::*;
    let target = cfg.target.load(model.resolution())?;
    let run = |(i, x): (usize, &Tensor)| {
        let c = AttackConfig {
            seed: item_seed(cfg.seed, i),
            ..cfg.clone()
        };
        pgd_protect_with(x, model, &c, target.as_ref(), None)
    };
    if jobs <= 1 {
        return images.iter().enumerate().map(run).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| images.par_iter().enumerate().map(run).collect())
}

/// PGD ascent on the denoiser loss directly in model-latent space.
pub fn latent_pgd(
    z: &Tensor,
    model: &dyn LatentModel,
    budget: f64,
    step: f64,
    iters: usize,
    seed: u64,
    cond: &Cond,
) -> Result<Tensor> {
    if !model.is_trained() {
        return Err(Error::UntrainedBundle("attacks need a trained bundle".into()));
    }
    if !(budget >= 0.0) || !(step >= 0.0) {
        return Err(Error::InvalidArgument(format!("budget {budget} and step {step} must be >= 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schedule = model.schedule();
    let n = z.shape()[0];
    let mut zt = z.clone();
    for it in 0..iters {
        let t = rng.random_range(0..schedule.len());
        let eps = Tensor::randn(z.shape(), &mut rng);
        let mut g = Graph::new();
        let zv = g.input(zt.clone());
        let noisy = q_sample_var(&mut g, zv, &vec![t; n], &eps, schedule);
        let pred = model.denoiser().predict(&mut g, noisy, &vec![t; n], cond);
        let target = g.constant(eps);
        let d = g.sub(pred, target);
        let l = g.mean_square(d);
        let mut grads = g.backward(l)?;
        let grad = grads.take(zv).unwrap_or_else(|| Tensor::zeros(z.shape()));
        if !grad.is_finite() {
            return Err(Error::NanGradient { iteration: it });
        }
        zt = zt
            .zip(&grad, |v, gv| v + step * sign(gv))
            .zip(z, |v, c| v.clamp(c - budget, c + budget));
    }
    Ok(zt)
}

#[derive(Serialize)]
struct Sidecar<'a> {
    config: &'a AttackConfig,
    image: &'a str,
    delta: &'a str,
    loss_trace: &'a [LossPoint],
    grad_seconds_per_iter: f64,
    peak_workspace_bytes: usize,
    max_abs_delta: f64,
}

impl ProtectionResult {
    /// Writes `{stem}.png`, `{stem}_delta.npy` and `{stem}.json`.
    pub fn save(&self, dir: &Path, stem: &str, cfg: &AttackConfig) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let image = format!("{stem}.png");
        let delta = format!("{stem}_delta.npy");
        save_png(&self.x_adv, &dir.join(&image))?;
        save_npy(&self.delta, &dir.join(&delta))?;
        write_json_atomic(
            &dir.join(format!("{stem}.json")),
            &Sidecar {
                config: cfg,
                image: &image,
                delta: &delta,
                loss_trace: &self.loss_trace,
                grad_seconds_per_iter: self.grad_seconds_per_iter,
                peak_workspace_bytes: self.peak_workspace_bytes,
                max_abs_delta: self.delta.max_abs(),
            },
        )
    }
}
