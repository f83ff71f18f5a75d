//! Analyses of where the attacks act: latent budget amplification, edit
//! reflection of the corrupted latent, denoiser robustness, SDS vs full
//! loss curves, cross-model transfer, purification and the pixel-space
//! control.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{item_seed, latent_pgd, pgd_protect_with, semantic_loss, AttackConfig, Method};
use crate::data::{write_atomic, write_json_atomic, Domain};
use crate::diffusion::Cond;
use crate::error::{Error, Result};
use crate::eval::metrics::{ia_score, FeatureExtractor};
use crate::eval::purify::Purification;
use crate::eval::{par_map, EditProtocol};
use crate::models::{LatentModel, LdmBundle, PixelDmBundle};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetRatio {
    pub delta_x: f64,
    pub delta_z: f64,
    /// `None` when the image was not perturbed.
    pub ratio: Option<f64>,
}

/// `l_inf` size of a perturbation in pixel space and in standardized latent
/// space.
pub fn budget_ratio(x: &Tensor, x_adv: &Tensor, bundle: &LdmBundle) -> Result<BudgetRatio> {
    x.same_shape(x_adv)?;
    let delta_x = x_adv.sub(x).max_abs();
    let zx = bundle.encode(&Tensor::stack(&[x.clone(), x_adv.clone()])?);
    let delta_z = zx.batch_item(1).sub(&zx.batch_item(0)).max_abs();
    Ok(BudgetRatio {
        delta_x,
        delta_z,
        ratio: (delta_x > 0.0).then(|| delta_z / delta_x),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetRatioRow {
    pub image: usize,
    pub domain: Domain,
    pub method: Method,
    #[serde(flatten)]
    pub value: BudgetRatio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioSummary {
    pub method: Method,
    /// `None` for the pooled row over all domains.
    pub domain: Option<Domain>,
    pub count: usize,
    pub undefined: usize,
    pub median: Option<f64>,
    pub mean: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetRatioReport {
    pub rows: Vec<BudgetRatioRow>,
    pub bin_edges: Vec<f64>,
    pub summaries: Vec<RatioSummary>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

fn summarize(method: Method, domain: Option<Domain>, rows: &[&BudgetRatioRow]) -> RatioSummary {
    let r: Vec<f64> = rows.iter().filter_map(|r| r.value.ratio).collect();
    RatioSummary {
        method,
        domain,
        count: rows.len(),
        undefined: rows.len() - r.len(),
        median: median(&r),
        mean: (!r.is_empty()).then(|| r.iter().sum::<f64>() / r.len() as f64),
        min: r.iter().copied().reduce(f64::min),
        max: r.iter().copied().reduce(f64::max),
    }
}

impl BudgetRatioReport {
    /// Aggregates rows per method, per domain and pooled. `bin_width` sets
    /// the histogram resolution.
    pub fn new(rows: Vec<BudgetRatioRow>, bin_width: f64) -> Self {
        let hi = rows.iter().filter_map(|r| r.value.ratio).fold(0.0, f64::max);
        let bins = ((hi / bin_width).floor() as usize + 1).max(1);
        let bin_edges = (0..=bins).map(|i| i as f64 * bin_width).collect();
        let mut methods: Vec<Method> = rows.iter().map(|r| r.method).collect();
        methods.dedup();
        methods.sort_by_key(|m| Method::ALL.iter().position(|a| a == m));
        methods.dedup();
        let mut summaries = Vec::new();
        for m in methods {
            let mine: Vec<&BudgetRatioRow> = rows.iter().filter(|r| r.method == m).collect();
            summaries.push(summarize(m, None, &mine));
            for d in Domain::ALL {
                let sub: Vec<&BudgetRatioRow> = mine.iter().copied().filter(|r| r.domain == d).collect();
                if !sub.is_empty() {
                    summaries.push(summarize(m, Some(d), &sub));
                }
            }
        }
        Self {
            rows,
            bin_edges,
            summaries,
        }
    }

    pub fn pooled(&self, method: Method) -> Option<&RatioSummary> {
        self.summaries.iter().find(|s| s.method == method && s.domain.is_none())
    }

    pub fn rows_csv(&self) -> String {
        let mut s = String::from("image,domain,method,delta_x,delta_z,ratio\n");
        for r in &self.rows {
            let ratio = r.value.ratio.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.image,
                r.domain.name(),
                r.method,
                r.value.delta_x,
                r.value.delta_z,
                ratio
            );
        }
        s
    }

    /// Histogram counts for every (method, domain) pair.
    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("method,domain,bin_lo,bin_hi,count\n");
        let nb = self.bin_edges.len() - 1;
        let width = self.bin_edges[1] - self.bin_edges[0];
        for sum in self.summaries.iter().filter(|s| s.domain.is_some()) {
            let d = sum.domain.expect("filtered");
            let mut counts = vec![0usize; nb];
            for r in self.rows.iter().filter(|r| r.method == sum.method && r.domain == d) {
                if let Some(v) = r.value.ratio {
                    counts[((v / width).floor() as usize).min(nb - 1)] += 1;
                }
            }
            for (i, c) in counts.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{}",
                    sum.method,
                    d.name(),
                    self.bin_edges[i],
                    self.bin_edges[i + 1],
                    c
                );
            }
        }
        s
    }

    /// Writes `budget_ratio.csv`, `budget_ratio_hist.csv` and
    /// `budget_ratio.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("budget_ratio.csv"), self.rows_csv().as_bytes())?;
        write_atomic(&dir.join("budget_ratio_hist.csv"), self.histogram_csv().as_bytes())?;
        write_json_atomic(&dir.join("budget_ratio.json"), &self.summaries)
    }
}

/// Similarity of the SDEdit output of `x_adv` to its plain reconstruction
/// `decode(encode(x_adv))`. High values mean the edit mostly reproduces
/// whatever the encoder made of the input.
pub fn roundtrip_reflection(
    x_adv: &Tensor,
    model: &dyn LatentModel,
    edit: &EditProtocol,
    index: usize,
    fx: &FeatureExtractor,
) -> Result<f64> {
    let edited = edit.reference(x_adv, model, index)?;
    let recon = model.decode(&model.encode(x_adv));
    ia_score(&edited, &recon, fx)
}

/// Fixed `(t, eps)` evaluation points for noise-prediction losses.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrid {
    pub points: Vec<(usize, Tensor)>,
}

impl LossGrid {
    /// One noise draw per timestep for latents of `shape`.
    pub fn new(timesteps: &[usize], shape: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            points: timesteps.iter().map(|&t| (t, Tensor::randn(shape, &mut rng))).collect(),
        }
    }

    /// Mean semantic loss of image `x` over the grid.
    pub fn image_loss(&self, model: &dyn LatentModel, x: &Tensor) -> Result<f64> {
        let mut s = 0.0;
        for (t, eps) in &self.points {
            s += semantic_loss(model, x, *t, eps, &Cond::None)?;
        }
        Ok(s / self.points.len() as f64)
    }

    /// Mean noise-prediction error at latent `z` over the grid.
    pub fn latent_loss(&self, model: &dyn LatentModel, z: &Tensor) -> Result<f64> {
        use crate::diffusion::denoiser_loss;
        let mut s = 0.0;
        for (t, eps) in &self.points {
            s += denoiser_loss(model.denoiser(), z, *t, eps, &Cond::None, model.schedule())?;
        }
        Ok(s / self.points.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub budget: f64,
    pub loss_clean: f64,
    pub loss_attacked: f64,
    pub loss_delta: f64,
    /// Mean feature similarity of the edit of `decode(z_adv)` to the edit of
    /// `decode(z)`, same seed.
    pub similarity: f64,
    pub images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessConfig {
    pub budgets: Vec<f64>,
    pub iters: usize,
    /// Step as a fraction of the budget.
    pub step_fraction: f64,
    pub timesteps: Vec<usize>,
    pub seed: u64,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self {
            budgets: vec![16.0 / 255.0, 32.0 / 255.0, 1.0],
            iters: 100,
            step_fraction: 1.0 / 16.0,
            timesteps: vec![100, 300, 500, 700, 900],
            seed: 0,
        }
    }
}

/// Attacks the standardized latents of `images` directly and measures how
/// much the noise-prediction loss and the edited output move.
pub fn denoiser_robustness_probe(
    model: &dyn LatentModel,
    images: &[Tensor],
    cfg: &RobustnessConfig,
    edit: &EditProtocol,
    fx: &FeatureExtractor,
    jobs: usize,
) -> Result<Vec<RobustnessRow>> {
    let mut rows = Vec::with_capacity(cfg.budgets.len());
    for &budget in &cfg.budgets {
        let per = par_map(images.len(), jobs, |i| {
            let z = model.encode(&images[i]);
            let grid = LossGrid::new(&cfg.timesteps, z.shape(), item_seed(cfg.seed ^ 0x1055, i));
            let z_adv = if budget > 0.0 {
                latent_pgd(&z, model, budget, budget * cfg.step_fraction, cfg.iters, item_seed(cfg.seed, i), &Cond::None)?
            } else {
                z.clone()
            };
            let clean = grid.latent_loss(model, &z)?;
            let attacked = grid.latent_loss(model, &z_adv)?;
            let reference = edit.reference(&model.decode(&z), model, i)?;
            let edited = edit.reference(&model.decode(&z_adv), model, i)?;
            Ok((clean, attacked, ia_score(&edited, &reference, fx)?))
        })?;
        let n = per.len().max(1) as f64;
        let loss_clean = per.iter().map(|p| p.0).sum::<f64>() / n;
        let loss_attacked = per.iter().map(|p| p.1).sum::<f64>() / n;
        rows.push(RobustnessRow {
            budget,
            loss_clean,
            loss_attacked,
            loss_delta: loss_attacked - loss_clean,
            similarity: per.iter().map(|p| p.2).sum::<f64>() / n,
            images: per.len(),
        });
    }
    Ok(rows)
}

/// Mean same-seed edit similarity after a pixel-space attack, for
/// comparison with [`denoiser_robustness_probe`].
pub fn pixel_attack_similarity(
    model: &dyn LatentModel,
    images: &[Tensor],
    adversarial: &[Tensor],
    edit: &EditProtocol,
    fx: &FeatureExtractor,
    jobs: usize,
) -> Result<f64> {
    if images.len() != adversarial.len() {
        return Err(Error::InvalidArgument("image and adversarial counts differ".into()));
    }
    let s = par_map(images.len(), jobs, |i| {
        ia_score(&edit.reference(&adversarial[i], model, i)?, &edit.reference(&images[i], model, i)?, fx)
    })?;
    Ok(s.iter().sum::<f64>() / s.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCurves {
    pub full: Vec<f64>,
    pub sds: Vec<f64>,
    /// `max_i |sds_i - full_i| / full_i`.
    pub divergence: f64,
    pub full_seconds_per_iter: f64,
    pub sds_seconds_per_iter: f64,
    pub images: usize,
}

impl LossCurves {
    pub fn speed_ratio(&self) -> f64 {
        self.sds_seconds_per_iter / self.full_seconds_per_iter
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("iteration,loss_full,loss_sds\n");
        for (i, (f, d)) in self.full.iter().zip(&self.sds).enumerate() {
            let _ = writeln!(s, "{i},{f},{d}");
        }
        s
    }
}

pub fn max_relative_divergence(reference: &[f64], other: &[f64]) -> f64 {
    reference
        .iter()
        .zip(other)
        .map(|(r, o)| if *r == 0.0 { if *o == 0.0 { 0.0 } else { f64::INFINITY } } else { (o - r).abs() / r.abs() })
        .fold(0.0, f64::max)
}

/// Runs the full-gradient and SDS variants of the same attack on every
/// image, evaluating the semantic loss of each iterate on a fixed
/// `(t, eps)` grid. Traces are averaged over images and have `iters + 1`
/// entries.
pub fn loss_curve_compare(
    images: &[Tensor],
    model: &dyn LatentModel,
    full: &AttackConfig,
    sds: &AttackConfig,
    timesteps: &[usize],
    seed: u64,
) -> Result<LossCurves> {
    if full.use_sds || !sds.use_sds {
        return Err(Error::InconsistentConfig("first config must use the full gradient, second SDS".into()));
    }
    let strip = |c: &AttackConfig| (c.budget, c.step, c.iters, c.seed, c.direction, c.mc_samples, c.class, c.fixed_timestep);
    if strip(full) != strip(sds) {
        return Err(Error::InconsistentConfig("configs may differ only in the gradient estimator".into()));
    }
    if images.is_empty() {
        return Err(Error::InsufficientData("no images".into()));
    }
    let n = full.iters + 1;
    let (mut tf, mut ts) = (vec![0.0; n], vec![0.0; n]);
    let (mut sf, mut ss) = (0.0, 0.0);
    for (i, x) in images.iter().enumerate() {
        let grid = LossGrid::new(timesteps, model.encode(x).shape(), item_seed(seed, i));
        for (cfg, trace, secs) in [(full, &mut tf, &mut sf), (sds, &mut ts, &mut ss)] {
            let c = AttackConfig {
                seed: item_seed(cfg.seed, i),
                ..cfg.clone()
            };
            let mut err = None;
            let mut hook = |it: usize, xt: &Tensor| match grid.image_loss(model, xt) {
                Ok(l) => trace[it] += l / images.len() as f64,
                Err(e) => err = Some(e),
            };
            let r = pgd_protect_with(x, model, &c, None, Some(&mut hook))?;
            if let Some(e) = err {
                return Err(e);
            }
            *secs += r.grad_seconds_per_iter / images.len() as f64;
        }
    }
    Ok(LossCurves {
        divergence: max_relative_divergence(&tf, &ts),
        full: tf,
        sds: ts,
        full_seconds_per_iter: sf,
        sds_seconds_per_iter: ss,
        images: images.len(),
    })
}

/// `1 - ia(edit(x_adv), edit(x))` under `model`, same seed for both edits.
pub fn protection_score(
    x: &Tensor,
    x_adv: &Tensor,
    model: &dyn LatentModel,
    edit: &EditProtocol,
    index: usize,
    fx: &FeatureExtractor,
) -> Result<f64> {
    Ok(1.0 - ia_score(&edit.reference(x_adv, model, index)?, &edit.reference(x, model, index)?, fx)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferScore {
    pub native: f64,
    pub transfer: f64,
}

impl TransferScore {
    pub fn retention(&self) -> f64 {
        self.transfer / self.native
    }
}

/// Protection score of perturbations crafted on `a`, measured under `a`
/// (native) and under `b` (transfer), averaged over images.
pub fn transfer_probe(
    images: &[Tensor],
    adversarial: &[Tensor],
    a: &dyn LatentModel,
    b: &dyn LatentModel,
    edit: &EditProtocol,
    fx: &FeatureExtractor,
    jobs: usize,
) -> Result<TransferScore> {
    if a.resolution() != b.resolution() {
        return Err(Error::ResolutionMismatch(format!(
            "bundles at {} and {} pixels",
            a.resolution(),
            b.resolution()
        )));
    }
    if images.len() != adversarial.len() || images.is_empty() {
        return Err(Error::InvalidArgument("need matching, non-empty image lists".into()));
    }
    let s = par_map(images.len(), jobs, |i| {
        Ok((
            protection_score(&images[i], &adversarial[i], a, edit, i, fx)?,
            protection_score(&images[i], &adversarial[i], b, edit, i, fx)?,
        ))
    })?;
    let n = s.len() as f64;
    Ok(TransferScore {
        native: s.iter().map(|v| v.0).sum::<f64>() / n,
        transfer: s.iter().map(|v| v.1).sum::<f64>() / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PurificationReport {
    /// Mean protection score without purification.
    pub protected: f64,
    /// Mean protection score after each purification, in input order.
    pub purified: Vec<(String, f64)>,
    pub images: usize,
}

/// Protection score before and after each purification. A purified
/// perturbation is scored against the edit of the equally purified clean
/// image, so the unprotected score stays 0.
pub fn purification_probe(
    images: &[Tensor],
    adversarial: &[Tensor],
    model: &dyn LatentModel,
    purifications: &[Purification],
    edit: &EditProtocol,
    fx: &FeatureExtractor,
    jobs: usize,
) -> Result<PurificationReport> {
    if images.len() != adversarial.len() || images.is_empty() {
        return Err(Error::InvalidArgument("need matching, non-empty image lists".into()));
    }
    let s = par_map(images.len(), jobs, |i| {
        let mut row = vec![protection_score(&images[i], &adversarial[i], model, edit, i, fx)?];
        for p in purifications {
            row.push(protection_score(&p.apply(&images[i])?, &p.apply(&adversarial[i])?, model, edit, i, fx)?);
        }
        Ok(row)
    })?;
    let n = s.len() as f64;
    let col = |k: usize| s.iter().map(|r| r[k]).sum::<f64>() / n;
    Ok(PurificationReport {
        protected: col(0),
        purified: purifications.iter().enumerate().map(|(k, p)| (p.name().to_string(), col(k + 1))).collect(),
        images: s.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelProbeReport {
    pub budget: f64,
    pub iters: usize,
    /// Mean `ia(edit(x, probe seed), edit(x, reference seed))`.
    pub clean_similarity: f64,
    /// Mean `ia(edit(x_adv, probe seed), edit(x, reference seed))`.
    pub attacked_similarity: f64,
    pub images: usize,
}

impl PixelProbeReport {
    pub fn ratio(&self) -> f64 {
        self.attacked_similarity / self.clean_similarity
    }
}

/// AdvDM-style attack directly on a pixel-space diffusion model, with edit
/// similarity compared against the editor's own seed variability.
pub fn pixel_dm_attack_probe(
    pixel: &PixelDmBundle,
    images: &[Tensor],
    budget: f64,
    iters: usize,
    edit: &EditProtocol,
    fx: &FeatureExtractor,
    seed: u64,
    jobs: usize,
) -> Result<PixelProbeReport> {
    let cfg = AttackConfig {
        budget,
        iters,
        seed,
        ..AttackConfig::for_method(Method::Advdm)
    };
    let s = par_map(images.len(), jobs, |i| {
        let x = &images[i];
        let x_adv = if budget > 0.0 {
            let c = AttackConfig {
                seed: item_seed(seed, i),
                ..cfg.clone()
            };
            pgd_protect_with(x, pixel, &c, None, None)?.x_adv
        } else {
            x.clone()
        };
        let reference = edit.reference(x, pixel, i)?;
        Ok((
            ia_score(&edit.probe(x, pixel, i)?, &reference, fx)?,
            ia_score(&edit.probe(&x_adv, pixel, i)?, &reference, fx)?,
        ))
    })?;
    let n = s.len().max(1) as f64;
    Ok(PixelProbeReport {
        budget,
        iters,
        clean_similarity: s.iter().map(|v| v.0).sum::<f64>() / n,
        attacked_similarity: s.iter().map(|v| v.1).sum::<f64>() / n,
        images: s.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_handles_even_and_odd() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    #[test]
    fn divergence_is_relative_to_the_reference() {
        assert_eq!(max_relative_divergence(&[1.0, 2.0], &[1.0, 2.5]), 0.25);
        assert_eq!(max_relative_divergence(&[1.0], &[1.0]), 0.0);
    }

    #[test]
    fn unperturbed_ratio_is_undefined() {
        let b = LdmBundle::init(crate::models::Architecture::tiny(), crate::diffusion::NoiseSchedule::default_linear(), 0).unwrap();
        let x = Tensor::full(&[1, 1, 8, 8], 0.5);
        let r = budget_ratio(&x, &x, &b).unwrap();
        assert_eq!((r.delta_x, r.delta_z, r.ratio), (0.0, 0.0, None));
    }

    #[test]
    fn histogram_counts_every_defined_ratio() {
        let row = |i, d, r: Option<f64>| BudgetRatioRow {
            image: i,
            domain: d,
            method: Method::Advdm,
            value: BudgetRatio {
                delta_x: if r.is_some() { 0.1 } else { 0.0 },
                delta_z: r.map_or(0.0, |r| r * 0.1),
                ratio: r,
            },
        };
        let rep = BudgetRatioReport::new(
            vec![
                row(0, Domain::Cartoon, Some(2.0)),
                row(1, Domain::Cartoon, Some(5.5)),
                row(2, Domain::Artwork, Some(4.0)),
                row(3, Domain::Artwork, None),
            ],
            1.0,
        );
        let pooled = rep.pooled(Method::Advdm).unwrap();
        assert_eq!((pooled.count, pooled.undefined, pooled.median), (4, 1, Some(4.0)));
        let hist = rep.histogram_csv();
        let total: usize = hist.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
        assert_eq!(total, 3);
        assert_eq!(rep.rows_csv().lines().count(), 5);
    }
}
