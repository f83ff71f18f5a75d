//! Mimicry pipelines a protection has to withstand: SDEdit, mask
//! inpainting by latent blending, embedding inversion and sampling.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{load_npy, load_png};
use crate::diffusion::{ddim_sample_from, denoiser_loss_var, q_sample, Cond};
use crate::error::{Error, Result};
use crate::models::LatentModel;
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::tensor::Tensor;

/// DDIM steps for a full-length trajectory; shorter edits use a
/// proportional share.
pub const DEFAULT_DDIM_STEPS: usize = 100;
pub const DEFAULT_STRENGTHS: [f64; 2] = [0.2, 0.3];
pub const DEFAULT_INVERSION_ITERS: usize = 2000;
pub const DEFAULT_INVERSION_LR: f64 = 5e-4;

/// Number of respaced timesteps used when sampling from `t_start`.
pub fn steps_for(t_start: usize, total_steps: usize, schedule_len: usize) -> usize {
    let share = ((total_steps as f64) * (t_start + 1) as f64 / schedule_len as f64).round() as usize;
    share.clamp(2, total_steps.max(2)).min(t_start + 1).max(1)
}

/// Encode, noise to `round(strength * T)`, reverse-sample with DDIM, decode.
pub fn sdedit(
    x: &Tensor,
    model: &dyn LatentModel,
    strength: f64,
    steps: usize,
    cond: &Cond,
    seed: u64,
) -> Result<Tensor> {
    model.check_image(x)?;
    let schedule = model.schedule();
    let t = schedule.strength_to_t(strength)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z0 = model.encode(x);
    let eps = Tensor::randn(z0.shape(), &mut rng);
    let zt = q_sample(&z0, t, &eps, schedule)?.z_t;
    let z = ddim_sample_from(
        model.denoiser(),
        &zt,
        t,
        steps_for(t, steps, schedule.len()),
        0.0,
        cond,
        schedule,
        &mut rng,
        None,
    )?;
    Ok(model.decode(&z))
}

#[derive(Clone, Debug, PartialEq)]
pub struct InpaintOutput {
    pub image: Tensor,
    /// Set when the mask selected nothing and the output is a plain
    /// reconstruction.
    pub empty_mask: bool,
}

/// Pixel mask to latent mask: a latent cell is synthesized when any pixel
/// of its footprint is masked.
pub fn latent_mask(mask: &Tensor, latent_shape: &[usize]) -> Result<Tensor> {
    let (_, _, h, w) = mask.dims4();
    let (n, c, lh, lw) = (latent_shape[0], latent_shape[1], latent_shape[2], latent_shape[3]);
    if h % lh != 0 || w % lw != 0 || h / lh != w / lw {
        return Err(Error::Shape(format!("mask {h}x{w} does not tile latent {lh}x{lw}")));
    }
    let f = h / lh;
    let md = mask.data();
    let mut out = Vec::with_capacity(n * c * lh * lw);
    for _ in 0..n * c {
        for i in 0..lh {
            for j in 0..lw {
                let any = (0..f).any(|a| (0..f).any(|b| md[(i * f + a) * w + j * f + b] > 0.5));
                out.push(if any { 1.0 } else { 0.0 });
            }
        }
    }
    Tensor::new(latent_shape, out)
}

/// Inpaints the region where `mask` is 1. At every reverse step the known
/// region of the latent is replaced by the forward-noised encoding of `x`.
pub fn inpaint(
    x: &Tensor,
    mask: &Tensor,
    model: &dyn LatentModel,
    cond: &Cond,
    steps: usize,
    seed: u64,
) -> Result<InpaintOutput> {
    model.check_image(x)?;
    let (_, _, h, w) = x.dims4();
    if mask.shape() != [1, 1, h, w] {
        return Err(Error::Shape(format!("mask {:?} does not match image {h}x{w}", mask.shape())));
    }
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument("mask must be binary".into()));
    }
    let z0 = model.encode(x);
    if mask.sum() == 0.0 {
        return Ok(InpaintOutput {
            image: model.decode(&z0),
            empty_mask: true,
        });
    }
    let m = latent_mask(mask, z0.shape())?;
    let keep = m.map(|v| 1.0 - v);
    let schedule = model.schedule();
    let t_start = schedule.len() - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blend_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);

    let noise = Tensor::randn(z0.shape(), &mut rng);
    let known = q_sample(&z0, t_start, &Tensor::randn(z0.shape(), &mut blend_rng), schedule)?.z_t;
    let z_start = noise.mul(&m).add(&known.mul(&keep));

    let mut hook = |z: &mut Tensor, prev: Option<usize>| {
        let truth = match prev {
            Some(tp) => {
                let e = Tensor::randn(z0.shape(), &mut blend_rng);
                q_sample(&z0, tp, &e, schedule).expect("timestep in range").z_t
            }
            None => z0.clone(),
        };
        *z = z.mul(&m).add(&truth.mul(&keep));
    };
    let z = ddim_sample_from(
        model.denoiser(),
        &z_start,
        t_start,
        steps_for(t_start, steps, schedule.len()),
        0.0,
        cond,
        schedule,
        &mut rng,
        Some(&mut hook),
    )?;
    Ok(InpaintOutput {
        image: model.decode(&z),
        empty_mask: false,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InversionTrace {
    pub loss: Vec<f64>,
}

/// Learns a free condition embedding on a frozen model by descending the
/// denoiser loss over `images`, starting from the null embedding.
pub fn invert_embedding(
    images: &[Tensor],
    model: &dyn LatentModel,
    iters: usize,
    lr: f64,
    seed: u64,
) -> Result<(Tensor, InversionTrace)> {
    if images.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "embedding inversion needs at least 3 images, got {}",
            images.len()
        )));
    }
    for x in images {
        model.check_image(x)?;
    }
    let init = model
        .denoiser()
        .class_embedding(None)
        .ok_or_else(|| Error::InvalidArgument("denoiser has no condition embeddings".into()))?;
    let e = init.numel();
    let z0 = model.encode(&Tensor::stack(images)?);
    let n = images.len();
    let schedule = model.schedule();

    let mut store = ParamStore::new(u8::MAX);
    store.add("embedding", init.clone().reshape(&[1, e])?);
    let mut opt = Adam::new(
        &store,
        AdamConfig {
            lr,
            clip_norm: 0.0,
            ..Default::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = InversionTrace::default();
    for step in 0..iters {
        let t: Vec<usize> = (0..n).map(|_| rng.random_range(0..schedule.len())).collect();
        let eps = Tensor::randn(z0.shape(), &mut rng);
        let mut g = Graph::new();
        let emb = g.input(store.get(0).clone());
        let z = g.constant(z0.clone());
        let l = denoiser_loss_var(&mut g, model.denoiser(), z, &t, &eps, &Cond::Var(emb), schedule);
        let loss = g.value(l).data()[0];
        let mut grads = g.backward(l)?;
        let grad = grads.take(emb);
        if !loss.is_finite() || !grad.as_ref().is_none_or(Tensor::is_finite) {
            return Err(Error::Divergence {
                step,
                detail: format!("inversion loss {loss}; trace {:?}", trace.loss),
            });
        }
        opt.step_with(&mut store, &[grad]);
        trace.loss.push(loss);
    }
    Ok((store.get(0).clone().reshape(&[e])?, trace))
}

/// Draws `count` images by DDIM from Gaussian latents; image `i` depends only
/// on `(seed, i)`.
pub fn generate(model: &dyn LatentModel, cond: &Cond, count: usize, steps: usize, seed: u64) -> Result<Vec<Tensor>> {
    let schedule = model.schedule();
    let shape = {
        let r = model.resolution();
        model.encode(&Tensor::zeros(&[1, 1, r, r])).shape().to_vec()
    };
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::attacks::item_seed(seed, i));
            let z_t = Tensor::randn(&shape, &mut rng);
            let t = schedule.len() - 1;
            let z = ddim_sample_from(
                model.denoiser(),
                &z_t,
                t,
                steps_for(t, steps, schedule.len()),
                0.0,
                cond,
                schedule,
                &mut rng,
                None,
            )?;
            Ok(model.decode(&z))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    Sdedit,
    Inpaint,
    EmbedInvert,
}

/// A mimicry request as it appears in experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    pub kind: EditKind,
    #[serde(default)]
    pub strength: Option<f64>,
    /// 1-bit PNG; white marks the region to synthesize.
    #[serde(default)]
    pub mask: Option<PathBuf>,
    #[serde(default)]
    pub class: Option<usize>,
    /// `.npy` file holding a learned embedding.
    #[serde(default)]
    pub embedding: Option<PathBuf>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub iters: Option<usize>,
    #[serde(default)]
    pub lr: Option<f64>,
}

fn default_steps() -> usize {
    DEFAULT_DDIM_STEPS
}

impl EditRequest {
    pub fn sdedit(strength: f64, seed: u64) -> Self {
        Self {
            kind: EditKind::Sdedit,
            strength: Some(strength),
            mask: None,
            class: None,
            embedding: None,
            steps: DEFAULT_DDIM_STEPS,
            seed,
            iters: None,
            lr: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            EditKind::Sdedit => match self.strength {
                Some(s) if s > 0.0 && s <= 1.0 => {}
                Some(s) => return Err(Error::InvalidArgument(format!("strength {s} outside (0, 1]"))),
                None => return Err(Error::Config("sdedit requires a strength".into())),
            },
            EditKind::Inpaint if self.mask.is_none() => {
                return Err(Error::Config("inpaint requires a mask".into()));
            }
            _ => {}
        }
        if self.class.is_some() && self.embedding.is_some() {
            return Err(Error::Config("give either a class or an embedding, not both".into()));
        }
        Ok(())
    }

    pub fn cond(&self) -> Result<Cond> {
        if let Some(p) = &self.embedding {
            let t = load_npy(p)?;
            let n = t.numel();
            return Ok(Cond::Embedding(t.reshape(&[n])?));
        }
        Ok(self.class.map_or(Cond::None, Cond::Class))
    }

    /// Runs an `sdedit` or `inpaint` request on one image.
    pub fn apply(&self, x: &Tensor, model: &dyn LatentModel) -> Result<Tensor> {
        self.validate()?;
        let cond = self.cond()?;
        match self.kind {
            EditKind::Sdedit => sdedit(x, model, self.strength.expect("validated"), self.steps, &cond, self.seed),
            EditKind::Inpaint => {
                let mask = load_png(self.mask.as_ref().expect("validated"))?.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
                Ok(inpaint(x, &mask, model, &cond, self.steps, self.seed)?.image)
            }
            EditKind::EmbedInvert => Err(Error::Config("embed_invert runs on an image set, not one image".into())),
        }
    }
}
