#![allow(dead_code)]

use latentshield::autograd::{Graph, Var};
use latentshield::diffusion::{Cond, NoisePredictor, NoiseSchedule};
use latentshield::models::{Architecture, LatentModel, LdmBundle};
use latentshield::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tiny bundle with every denoiser weight randomized, so the zero-initialized
/// output layer does not hide the denoiser's Jacobian.
pub fn tiny_bundle(seed: u64) -> LdmBundle {
    let mut b = LdmBundle::init(Architecture::tiny(), NoiseSchedule::default_linear(), seed).unwrap();
    let mut r = rng(seed + 100);
    let store = b.denoiser.store_mut();
    for i in 0..store.len() {
        let shape = store.get(i).shape().to_vec();
        store.set(i, Tensor::randn(&shape, &mut r).scale(0.3));
    }
    b.meta.trained = true;
    b
}

/// `eps(z, t) = z + c`.
pub struct ShiftDenoiser {
    pub c: Tensor,
}

impl NoisePredictor for ShiftDenoiser {
    fn predict(&self, g: &mut Graph, z: Var, _t: &[usize], _cond: &Cond) -> Var {
        let c = g.constant(self.c.clone());
        g.add(z, c)
    }
}

/// Predicts nothing.
pub struct ZeroDenoiser;

impl NoisePredictor for ZeroDenoiser {
    fn predict(&self, g: &mut Graph, z: Var, _t: &[usize], _cond: &Cond) -> Var {
        g.scale(z, 0.0)
    }
}

/// Knows the clean latent, so it recovers the exact noise.
pub struct OracleDenoiser {
    pub z0: Tensor,
    pub schedule: NoiseSchedule,
}

impl NoisePredictor for OracleDenoiser {
    fn predict(&self, g: &mut Graph, z: Var, t: &[usize], _cond: &Cond) -> Var {
        let ab = self.schedule.alpha_bars[t[0]];
        let shift = g.constant(self.z0.scale(-ab.sqrt()));
        let d = g.add(z, shift);
        g.scale(d, 1.0 / (1.0 - ab).sqrt())
    }
}

/// Linear encoder: a non-overlapping `k x k` stride-`k` convolution with
/// fixed weights `[C, 1, k, k]`.
pub struct LinearModel {
    pub w: Tensor,
    pub denoiser: Box<dyn NoisePredictor>,
    pub schedule: NoiseSchedule,
    pub resolution: usize,
}

impl LinearModel {
    pub fn new(denoiser: Box<dyn NoisePredictor>, seed: u64) -> Self {
        Self {
            w: Tensor::randn(&[2, 1, 4, 4], &mut rng(seed)).scale(0.5),
            denoiser,
            schedule: NoiseSchedule::default_linear(),
            resolution: 8,
        }
    }

    /// `A^T r` for a latent-shaped `r`, written out by hand.
    pub fn adjoint(&self, r: &Tensor) -> Tensor {
        let (_, c, h, w) = r.dims4();
        let k = self.w.shape()[2];
        let n = self.resolution;
        let mut out = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                let mut s = 0.0;
                for ch in 0..c {
                    let wv = self.w.data()[(ch * k + y % k) * k + x % k];
                    s += wv * r.data()[(ch * h + y / k) * w + x / k];
                }
                out[y * n + x] = s;
            }
        }
        Tensor::new(&[1, 1, n, n], out).unwrap()
    }
}

impl LatentModel for LinearModel {
    fn encode_var(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.constant(self.w.clone());
        let k = self.w.shape()[2];
        g.conv2d(x, w, None, k, 0)
    }

    fn decode(&self, z: &Tensor) -> Tensor {
        let n = self.resolution;
        let _ = z;
        Tensor::zeros(&[1, 1, n, n])
    }

    fn denoiser(&self) -> &dyn NoisePredictor {
        self.denoiser.as_ref()
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn resolution(&self) -> usize {
        self.resolution
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

pub struct Lab {
    pub a: LdmBundle,
    pub b: LdmBundle,
    pub pixel: latentshield::models::PixelDmBundle,
    pub fx: latentshield::eval::metrics::FeatureExtractor,
    /// Held-out images, disjoint from the training draw.
    pub images: latentshield::data::Dataset,
}

/// Standard bundles from the shared cache, trained on first use.
pub fn lab() -> &'static Lab {
    use latentshield::lab::{cache_root, BundleRecipe, PixelRecipe};
    static LAB: std::sync::OnceLock<Lab> = std::sync::OnceLock::new();
    LAB.get_or_init(|| {
        let root = cache_root();
        let a = BundleRecipe::standard(0).load_or_train(&root).expect("bundle A");
        let b = BundleRecipe::standard(1).load_or_train(&root).expect("bundle B");
        let pixel = PixelRecipe::standard(0).load_or_train(&root).expect("pixel model");
        let fx = latentshield::eval::metrics::FeatureExtractor::new(&a);
        let images = latentshield::data::Dataset::generate(&latentshield::data::DatasetSpec {
            per_class: 8,
            resolution: 32,
            seed: 1000,
            variant: Default::default(),
        });
        Lab { a, b, pixel, fx, images }
    })
}

pub fn expectations() -> &'static serde_json::Value {
    static EXP: std::sync::OnceLock<serde_json::Value> = std::sync::OnceLock::new();
    EXP.get_or_init(|| serde_json::from_str(include_str!("../expectations.json")).expect("expectations.json"))
}

pub fn expect(key: &str) -> f64 {
    expectations()
        .pointer(key)
        .and_then(|v| v.as_f64())
        .unwrap_or_else(|| panic!("no expectation {key}"))
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
