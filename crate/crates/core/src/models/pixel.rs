use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::denoiser::{condition_rows, table_row, ResBlock};
use super::{BundleMeta, LatentModel};
use crate::autograd::{Graph, Var};
use crate::diffusion::{Cond, NoisePredictor, NoiseSchedule};
use crate::nn::{timestep_features, Conv2d, Linear, ParamStore, STORE_PIXEL};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PixelArchitecture {
    pub resolution: usize,
    pub channels: usize,
    pub inner_channels: usize,
    pub time_dim: usize,
    pub emb_dim: usize,
    pub num_classes: usize,
}

impl Default for PixelArchitecture {
    fn default() -> Self {
        Self {
            resolution: 32,
            channels: 8,
            inner_channels: 16,
            time_dim: 16,
            emb_dim: 32,
            num_classes: crate::data::NUM_CLASSES,
        }
    }
}

/// Two-level U-Net noise predictor operating directly on pixels.
#[derive(Clone, Debug)]
pub struct PixelDenoiser {
    pub(crate) store: ParamStore,
    time_dim: usize,
    time1: Linear,
    time2: Linear,
    table: usize,
    input: Conv2d,
    outer_in: ResBlock,
    down: Conv2d,
    inner: ResBlock,
    up: Conv2d,
    outer_out: ResBlock,
    out: Conv2d,
}

impl PixelDenoiser {
    pub fn new<R: Rng + ?Sized>(arch: &PixelArchitecture, rng: &mut R) -> Self {
        let mut store = ParamStore::new(STORE_PIXEL);
        let (c1, c2, e) = (arch.channels, arch.inner_channels, arch.emb_dim);
        let time1 = Linear::new(&mut store, "time1", arch.time_dim, e, rng);
        let time2 = Linear::new(&mut store, "time2", e, e, rng);
        let table = store.add("class_table", Tensor::randn(&[arch.num_classes + 1, e], rng).scale(0.5));
        let input = Conv2d::new(&mut store, "input", 1, c1, 3, 1, 1, rng);
        let outer_in = ResBlock::new(&mut store, "outer_in", c1, e, rng);
        let down = Conv2d::new(&mut store, "down", c1, c2, 4, 2, 1, rng);
        let inner = ResBlock::new(&mut store, "inner", c2, e, rng);
        let up = Conv2d::new(&mut store, "up", c2, c1, 3, 1, 1, rng);
        let outer_out = ResBlock::new(&mut store, "outer_out", c1, e, rng);
        let out = Conv2d::zeros(&mut store, "out", c1, 1, 3, 1, 1);
        Self {
            store,
            time_dim: arch.time_dim,
            time1,
            time2,
            table,
            input,
            outer_in,
            down,
            inner,
            up,
            outer_out,
            out,
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl NoisePredictor for PixelDenoiser {
    fn predict(&self, g: &mut Graph, z: Var, t: &[usize], cond: &Cond) -> Var {
        let s = &self.store;
        let feats = g.constant(timestep_features(t, self.time_dim));
        let h = self.time1.forward(g, s, feats);
        let h = g.silu(h);
        let h = self.time2.forward(g, s, h);
        let c = condition_rows(g, s, self.table, t.len(), cond);
        let h = g.add(h, c);
        let emb = g.silu(h);

        let x = self.input.forward(g, s, z);
        let skip = self.outer_in.forward(g, s, x, emb);
        let d = self.down.forward(g, s, skip);
        let d = g.silu(d);
        let d = self.inner.forward(g, s, d, emb);
        let u = g.upsample2x(d);
        let u = self.up.forward(g, s, u);
        let x = g.add(skip, u);
        let x = self.outer_out.forward(g, s, x, emb);
        let x = g.silu(x);
        self.out.forward(g, s, x)
    }

    fn class_embedding(&self, class: Option<usize>) -> Option<Tensor> {
        Some(table_row(&self.store, self.table, class))
    }
}

/// Pixel-space diffusion model: the "latent" is the image rescaled to
/// `[-1, 1]`, so there is no autoencoder to attack.
#[derive(Clone, Debug)]
pub struct PixelDmBundle {
    pub arch: PixelArchitecture,
    pub denoiser: PixelDenoiser,
    pub schedule: NoiseSchedule,
    pub meta: BundleMeta,
}

impl PixelDmBundle {
    pub fn init(arch: PixelArchitecture, schedule: NoiseSchedule, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let denoiser = PixelDenoiser::new(&arch, &mut rng);
        Self {
            arch,
            denoiser,
            schedule,
            meta: BundleMeta {
                seed,
                ..Default::default()
            },
        }
    }
}

impl LatentModel for PixelDmBundle {
    fn encode_var(&self, g: &mut Graph, x: Var) -> Var {
        g.channel_affine(x, &[2.0], &[-1.0])
    }

    fn decode(&self, z: &Tensor) -> Tensor {
        z.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_codec_is_affine_identity() {
        let b = PixelDmBundle::init(PixelArchitecture::default(), NoiseSchedule::default_linear(), 0);
        let x = Tensor::rand_uniform(&[1, 1, 32, 32], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let z = b.encode(&x);
        assert!(z.sub(&x.scale(2.0).map(|v| v - 1.0)).max_abs() < 1e-12);
        assert!(b.decode(&z).sub(&x).max_abs() < 1e-12);
    }

    #[test]
    fn untrained_pixel_denoiser_predicts_zero() {
        let b = PixelDmBundle::init(PixelArchitecture::default(), NoiseSchedule::default_linear(), 0);
        let z = Tensor::randn(&[2, 1, 32, 32], &mut ChaCha8Rng::seed_from_u64(1));
        let eps = b.denoiser.predict_value(&z, &[10, 500], &Cond::Class(3));
        assert_eq!(eps.shape(), &[2, 1, 32, 32]);
        assert_eq!(eps.max_abs(), 0.0);
    }
}
