//! Toy latent diffusion components: a deterministic convolutional
//! autoencoder, a conditional noise predictor on its latents, and a
//! pixel-space diffusion model with no autoencoder.

mod autoencoder;
pub mod checkpoint;
mod denoiser;
mod pixel;
pub mod train;

use serde::{Deserialize, Serialize};

pub use autoencoder::{ConvDecoder, ConvEncoder};
pub use denoiser::LatentDenoiser;
pub use pixel::{PixelArchitecture, PixelDenoiser, PixelDmBundle};

use crate::autograd::{Graph, Var};
use crate::diffusion::{NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Architecture descriptor shared by checkpoints of the same model family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub resolution: usize,
    pub image_channels: usize,
    pub latent_channels: usize,
    pub downsample: usize,
    pub encoder_channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    pub denoiser_channels: usize,
    pub denoiser_blocks: usize,
    pub time_dim: usize,
    pub emb_dim: usize,
    pub num_classes: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            resolution: 32,
            image_channels: 1,
            latent_channels: 4,
            downsample: 4,
            encoder_channels: vec![16, 32],
            decoder_channels: vec![32, 16, 8],
            denoiser_channels: 40,
            denoiser_blocks: 3,
            time_dim: 32,
            emb_dim: 64,
            num_classes: crate::data::NUM_CLASSES,
        }
    }
}

impl Architecture {
    /// A very small network family (a few thousand parameters) for exact
    /// gradient checks.
    pub fn tiny() -> Self {
        Self {
            resolution: 8,
            image_channels: 1,
            latent_channels: 2,
            downsample: 4,
            encoder_channels: vec![4, 6],
            decoder_channels: vec![6, 4, 4],
            denoiser_channels: 8,
            denoiser_blocks: 1,
            time_dim: 8,
            emb_dim: 8,
            num_classes: crate::data::NUM_CLASSES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.downsample.trailing_zeros() as usize;
        if !self.downsample.is_power_of_two() || self.downsample < 2 {
            return Err(Error::Config(format!("downsample {} must be a power of two >= 2", self.downsample)));
        }
        if self.encoder_channels.len() != stages {
            return Err(Error::Config(format!(
                "encoder needs {stages} stages for downsample {}",
                self.downsample
            )));
        }
        if self.decoder_channels.len() != stages + 1 {
            return Err(Error::Config(format!(
                "decoder needs {} channel entries for downsample {}",
                stages + 1,
                self.downsample
            )));
        }
        if !self.resolution.is_multiple_of(self.downsample) {
            return Err(Error::Config(format!(
                "resolution {} not divisible by downsample {}",
                self.resolution, self.downsample
            )));
        }
        if !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config("time_dim must be even".into()));
        }
        Ok(())
    }

    pub fn latent_size(&self) -> usize {
        self.resolution / self.downsample
    }

    pub fn image_shape(&self) -> [usize; 4] {
        [1, self.image_channels, self.resolution, self.resolution]
    }

    pub fn latent_shape(&self) -> [usize; 4] {
        [1, self.latent_channels, self.latent_size(), self.latent_size()]
    }
}

/// Per-channel statistics of encoded training latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub count: usize,
}

impl LatentStats {
    /// Statistics over a list of `[1, C, h, w]` latents.
    pub fn from_latents(latents: &[Tensor]) -> Result<Self> {
        let first = latents
            .first()
            .ok_or_else(|| Error::InsufficientData("no latents to summarize".into()))?;
        let (_, c, h, w) = first.dims4();
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for z in latents {
            for (i, chunk) in z.data().chunks(h * w).enumerate() {
                sum[i % c] += chunk.iter().sum::<f64>();
                sq[i % c] += chunk.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let n = (latents.len() * h * w) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt())
            .collect();
        if std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument("latent channel with zero variance".into()));
        }
        Ok(Self {
            mean,
            std,
            count: latents.len(),
        })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

fn channel_map(z: &Tensor, f: impl Fn(usize, f64) -> f64) -> Tensor {
    let (_, c, h, w) = z.dims4();
    let mut out = z.clone();
    for (i, chunk) in out.data_mut().chunks_mut(h * w).enumerate() {
        chunk.iter_mut().for_each(|v| *v = f(i % c, *v));
    }
    out
}

/// Per-channel `(z - mean) / std`.
pub fn normalize_latent(z: &Tensor, stats: &LatentStats) -> Result<Tensor> {
    if z.dims4().1 != stats.channels() {
        return Err(Error::Shape(format!(
            "latent has {} channels, stats have {}",
            z.dims4().1,
            stats.channels()
        )));
    }
    Ok(channel_map(z, |c, v| (v - stats.mean[c]) / stats.std[c]))
}

/// Inverse of [`normalize_latent`].
pub fn denormalize_latent(z: &Tensor, stats: &LatentStats) -> Result<Tensor> {
    if z.dims4().1 != stats.channels() {
        return Err(Error::Shape(format!(
            "latent has {} channels, stats have {}",
            z.dims4().1,
            stats.channels()
        )));
    }
    Ok(channel_map(z, |c, v| v * stats.std[c] + stats.mean[c]))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleMeta {
    pub dataset_id: String,
    pub dataset_hash: String,
    pub seed: u64,
    pub config_hash: String,
    pub trained: bool,
    pub recon_rmse: Option<f64>,
    pub denoiser_val_loss: Option<f64>,
}

/// Everything the attacks and mimicry pipelines need from a diffusion model.
///
/// The "latent" is whatever the denoiser operates on: normalized encoder
/// latents for [`LdmBundle`], rescaled pixels for [`PixelDmBundle`].
pub trait LatentModel: Sync {
    /// Image to diffusion latent inside a graph.
    fn encode_var(&self, g: &mut Graph, x: Var) -> Var;

    /// Diffusion latent back to an image clamped into `[0, 1]`.
    fn decode(&self, z: &Tensor) -> Tensor;

    fn denoiser(&self) -> &dyn NoisePredictor;

    fn schedule(&self) -> &NoiseSchedule;

    fn resolution(&self) -> usize;

    fn is_trained(&self) -> bool {
        true
    }

    fn encode(&self, x: &Tensor) -> Tensor {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let z = self.encode_var(&mut g, xv);
        g.value(z).clone()
    }

    fn check_image(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 4 {
            return Err(Error::Shape(format!("expected NCHW image, got {:?}", x.shape())));
        }
        let (_, _, h, w) = x.dims4();
        let r = self.resolution();
        if h != r || w != r {
            return Err(Error::ResolutionMismatch(format!("image is {h}x{w}, model expects {r}x{r}")));
        }
        Ok(())
    }
}

/// A trained toy latent diffusion model.
#[derive(Clone, Debug)]
pub struct LdmBundle {
    pub arch: Architecture,
    pub encoder: ConvEncoder,
    pub decoder: ConvDecoder,
    pub denoiser: LatentDenoiser,
    pub schedule: NoiseSchedule,
    pub stats: LatentStats,
    pub meta: BundleMeta,
}

impl LdmBundle {
    /// Freshly initialized networks with identity latent statistics.
    pub fn init(arch: Architecture, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        arch.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let encoder = ConvEncoder::new(&arch, &mut rng);
        let decoder = ConvDecoder::new(&arch, &mut rng);
        let denoiser = LatentDenoiser::new(&arch, &mut rng);
        let stats = LatentStats {
            mean: vec![0.0; arch.latent_channels],
            std: vec![1.0; arch.latent_channels],
            count: 0,
        };
        Ok(Self {
            arch,
            encoder,
            decoder,
            denoiser,
            schedule,
            stats,
            meta: BundleMeta {
                seed,
                ..Default::default()
            },
        })
    }

    /// Raw (unnormalized) encoder output.
    pub fn encode_raw(&self, x: &Tensor) -> Result<Tensor> {
        self.check_image(x)?;
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let z = self.encoder.forward(&mut g, xv);
        Ok(g.value(z).clone())
    }

    /// Decoder output for a raw latent, clamped into `[0, 1]`.
    pub fn decode_raw(&self, z: &Tensor) -> Tensor {
        let mut g = Graph::inference();
        let zv = g.constant(z.clone());
        let x = self.decoder.forward(&mut g, zv);
        g.value(x).clamp(0.0, 1.0)
    }

    /// `decode(encode(x))`.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.decode_raw(&self.encode_raw(x)?))
    }

    pub fn param_counts(&self) -> (usize, usize, usize) {
        (
            self.encoder.store.num_params(),
            self.decoder.store.num_params(),
            self.denoiser.store.num_params(),
        )
    }
}

impl LatentModel for LdmBundle {
    fn encode_var(&self, g: &mut Graph, x: Var) -> Var {
        let z = self.encoder.forward(g, x);
        let scale: Vec<f64> = self.stats.std.iter().map(|s| 1.0 / s).collect();
        let shift: Vec<f64> = self
            .stats
            .mean
            .iter()
            .zip(&self.stats.std)
            .map(|(m, s)| -m / s)
            .collect();
        g.channel_affine(z, &scale, &shift)
    }

    fn decode(&self, z: &Tensor) -> Tensor {
        let raw = denormalize_latent(z, &self.stats).expect("latent channels match stats");
        self.decode_raw(&raw)
    }

    fn denoiser(&self) -> &dyn NoisePredictor {
        &self.denoiser
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn resolution(&self) -> usize {
        self.arch.resolution
    }

    fn is_trained(&self) -> bool {
        self.meta.trained
    }
}
