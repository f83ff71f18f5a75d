//! Training loops for the autoencoder and the noise predictors.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LatentModel, LatentStats, LdmBundle, PixelDmBundle};
use crate::autograd::Graph;
use crate::data::Dataset;
use crate::diffusion::{denoiser_loss_var, Cond, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::tensor::Tensor;

pub const MIN_AUTOENCODER_IMAGES: usize = 512;
pub const MIN_STATS_IMAGES: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub rmse_threshold: f64,
    pub val_fraction: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 2e-3,
            seed: 0,
            rmse_threshold: 0.08,
            val_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderHistory {
    pub train_mse: Vec<f64>,
    pub val_rmse: Vec<f64>,
}

impl AutoencoderHistory {
    pub fn final_val_rmse(&self) -> f64 {
        self.val_rmse.last().copied().unwrap_or(f64::NAN)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub cond_dropout: f64,
    pub val_fraction: f64,
    pub conditional: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            lr: 2e-3,
            seed: 0,
            cond_dropout: 0.1,
            val_fraction: 0.1,
            conditional: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DenoiserHistory {
    pub train_loss: Vec<f64>,
    /// Validation loss on fixed `(t, eps)` draws, before training and after
    /// every epoch.
    pub val_loss: Vec<f64>,
}

impl DenoiserHistory {
    pub fn initial_val_loss(&self) -> f64 {
        self.val_loss.first().copied().unwrap_or(f64::NAN)
    }

    pub fn final_val_loss(&self) -> f64 {
        self.val_loss.last().copied().unwrap_or(f64::NAN)
    }

    /// Centered moving average of the validation curve.
    pub fn smoothed_val_loss(&self, window: usize) -> Vec<f64> {
        let v = &self.val_loss;
        let half = window / 2;
        (0..v.len())
            .map(|i| {
                let lo = i.saturating_sub(half);
                let hi = (i + half + 1).min(v.len());
                v[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
            })
            .collect()
    }
}

fn split_indices(n: usize, val_fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

fn lr_at(base: f64, step: usize, total: usize) -> f64 {
    let warm = (total / 20).max(1);
    if step < warm {
        return base * (step + 1) as f64 / warm as f64;
    }
    let p = (step - warm) as f64 / (total - warm).max(1) as f64;
    base * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

fn batches(images: &[Tensor], idx: &[usize], size: usize) -> Vec<Tensor> {
    idx.chunks(size)
        .map(|c| Tensor::stack(&c.iter().map(|&i| images[i].clone()).collect::<Vec<_>>()).expect("same image shape"))
        .collect()
}

fn recon_rmse(bundle: &LdmBundle, images: &[Tensor], idx: &[usize]) -> f64 {
    let mut se = 0.0;
    let mut n = 0usize;
    for x in batches(images, idx, 64) {
        let r = bundle.decode_raw(&bundle.encode_raw(&x).expect("resolution checked"));
        se += r.sub(&x).sum_sq();
        n += x.numel();
    }
    (se / n as f64).sqrt()
}

/// Fits encoder and decoder to minimize pixel MSE, then records latent
/// statistics over the training split.
pub fn train_autoencoder(bundle: &mut LdmBundle, data: &Dataset, cfg: &AutoencoderConfig) -> Result<AutoencoderHistory> {
    if data.len() < MIN_AUTOENCODER_IMAGES {
        return Err(Error::InsufficientData(format!(
            "autoencoder training needs at least {MIN_AUTOENCODER_IMAGES} images, got {}",
            data.len()
        )));
    }
    if data.resolution != bundle.arch.resolution {
        return Err(Error::ResolutionMismatch(format!(
            "dataset is {}px, architecture expects {}px",
            data.resolution, bundle.arch.resolution
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut train, val) = split_indices(data.len(), cfg.val_fraction, &mut rng);
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    };
    let mut opt_e = Adam::new(&bundle.encoder.store, adam_cfg.clone());
    let mut opt_d = Adam::new(&bundle.decoder.store, adam_cfg);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut history = AutoencoderHistory::default();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        train.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for x in batches(&data.images, &train, cfg.batch_size) {
            let lr = lr_at(cfg.lr, step, total);
            opt_e.set_lr(lr);
            opt_d.set_lr(lr);
            let mut g = Graph::training();
            let xv = g.constant(x.clone());
            let z = bundle.encoder.forward(&mut g, xv);
            let y = bundle.decoder.forward(&mut g, z);
            let diff = g.sub(y, xv);
            let loss = g.mean_square(diff);
            let l = g.value(loss).data()[0];
            if !l.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("reconstruction loss {l}"),
                });
            }
            let grads = g.backward(loss)?;
            drop(g);
            opt_e.step(&mut bundle.encoder.store, &grads);
            opt_d.step(&mut bundle.decoder.store, &grads);
            epoch_loss += l;
            step += 1;
        }
        history.train_mse.push(epoch_loss / steps_per_epoch as f64);
        history.val_rmse.push(recon_rmse(bundle, &data.images, &val));
    }

    let rmse = history.final_val_rmse();
    bundle.meta.recon_rmse = Some(rmse);
    if !(rmse <= cfg.rmse_threshold) {
        return Err(Error::NonConvergence(format!(
            "held-out reconstruction RMSE {rmse:.4} above threshold {} after {} epochs; history: {}",
            cfg.rmse_threshold,
            cfg.epochs,
            serde_json::to_string(&history)?
        )));
    }
    bundle.stats = compute_latent_stats(bundle, &data.select(&train))?;
    Ok(history)
}

/// Per-channel statistics of raw encoder outputs.
pub fn compute_latent_stats(bundle: &LdmBundle, data: &Dataset) -> Result<LatentStats> {
    if data.len() < MIN_STATS_IMAGES {
        return Err(Error::InsufficientData(format!(
            "latent statistics need at least {MIN_STATS_IMAGES} images, got {}",
            data.len()
        )));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut latents = Vec::with_capacity(data.len());
    for x in batches(&data.images, &idx, 64) {
        let z = bundle.encode_raw(&x)?;
        latents.extend((0..z.shape()[0]).map(|i| z.batch_item(i)));
    }
    LatentStats::from_latents(&latents)
}

/// Model-space latents (what the denoiser sees) for every image.
pub fn encode_dataset(model: &dyn LatentModel, data: &Dataset) -> Result<Vec<Tensor>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for x in batches(&data.images, &idx, 64) {
        model.check_image(&x)?;
        let z = model.encode(&x);
        out.extend((0..z.shape()[0]).map(|i| z.batch_item(i)));
    }
    Ok(out)
}

/// Generic noise-prediction training on precomputed latents.
pub fn train_noise_predictor<P: NoisePredictor>(
    predictor: &mut P,
    store_of: impl Fn(&mut P) -> &mut ParamStore,
    latents: &[Tensor],
    labels: &[usize],
    null_class: usize,
    schedule: &NoiseSchedule,
    cfg: &DenoiserConfig,
) -> Result<DenoiserHistory> {
    if latents.len() < 2 || latents.len() != labels.len() {
        return Err(Error::InsufficientData(format!(
            "need labelled latents, got {} latents and {} labels",
            latents.len(),
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut train, val) = split_indices(latents.len(), cfg.val_fraction, &mut rng);
    let t_max = schedule.len();

    let val_z = Tensor::stack(&val.iter().map(|&i| latents[i].clone()).collect::<Vec<_>>())?;
    let val_t: Vec<usize> = (0..val.len()).map(|_| rng.random_range(0..t_max)).collect();
    let val_eps = Tensor::randn(val_z.shape(), &mut rng);
    let val_cond = if cfg.conditional {
        Cond::Classes(val.iter().map(|&i| labels[i]).collect())
    } else {
        Cond::None
    };
    let val_loss = |p: &P| {
        let mut g = Graph::inference();
        let z = g.constant(val_z.clone());
        let l = denoiser_loss_var(&mut g, p, z, &val_t, &val_eps, &val_cond, schedule);
        g.value(l).data()[0]
    };

    let mut opt = Adam::new(
        store_of(predictor),
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
    );
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut history = DenoiserHistory {
        train_loss: Vec::new(),
        val_loss: vec![val_loss(predictor)],
    };
    let mut step = 0;
    for _ in 0..cfg.epochs {
        train.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in train.chunks(cfg.batch_size) {
            let z0 = Tensor::stack(&chunk.iter().map(|&i| latents[i].clone()).collect::<Vec<_>>())?;
            let t: Vec<usize> = chunk.iter().map(|_| rng.random_range(0..t_max)).collect();
            let eps = Tensor::randn(z0.shape(), &mut rng);
            let cond = if cfg.conditional {
                Cond::Classes(
                    chunk
                        .iter()
                        .map(|&i| if rng.random::<f64>() < cfg.cond_dropout { null_class } else { labels[i] })
                        .collect(),
                )
            } else {
                Cond::None
            };
            opt.set_lr(lr_at(cfg.lr, step, total));
            let mut g = Graph::training();
            let zv = g.constant(z0);
            let loss = denoiser_loss_var(&mut g, &*predictor, zv, &t, &eps, &cond, schedule);
            let l = g.value(loss).data()[0];
            if !l.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("denoiser loss {l}"),
                });
            }
            let grads = g.backward(loss)?;
            drop(g);
            let store = store_of(predictor);
            let gs = grads.param_grads(store.tag(), store.len());
            opt.step_with(store, &gs);
            epoch_loss += l;
            step += 1;
        }
        history.train_loss.push(epoch_loss / steps_per_epoch as f64);
        let v = val_loss(predictor);
        if !v.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("validation loss {v}"),
            });
        }
        history.val_loss.push(v);
    }
    Ok(history)
}

/// Trains the latent denoiser on normalized latents of `data`.
pub fn train_denoiser(bundle: &mut LdmBundle, data: &Dataset, cfg: &DenoiserConfig) -> Result<DenoiserHistory> {
    if bundle.stats.count == 0 {
        return Err(Error::UntrainedBundle("autoencoder must be trained before the denoiser".into()));
    }
    let latents = encode_dataset(bundle, data)?;
    let null = bundle.denoiser.null_class();
    let schedule = bundle.schedule.clone();
    let history = train_noise_predictor(
        &mut bundle.denoiser,
        |d| &mut d.store,
        &latents,
        &data.labels,
        null,
        &schedule,
        cfg,
    )?;
    bundle.meta.denoiser_val_loss = Some(history.final_val_loss());
    bundle.meta.trained = true;
    Ok(history)
}

/// Trains a pixel-space diffusion model on `data`.
pub fn train_pixel_dm(bundle: &mut PixelDmBundle, data: &Dataset, cfg: &DenoiserConfig) -> Result<DenoiserHistory> {
    let latents = encode_dataset(bundle, data)?;
    let null = bundle.arch.num_classes;
    let schedule = bundle.schedule.clone();
    let history = train_noise_predictor(
        &mut bundle.denoiser,
        |d| &mut d.store,
        &latents,
        &data.labels,
        null,
        &schedule,
        cfg,
    )?;
    bundle.meta.denoiser_val_loss = Some(history.final_val_loss());
    bundle.meta.trained = true;
    Ok(history)
}
