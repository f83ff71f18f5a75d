//! Image-quality metrics and feature-based analogs of LPIPS, FID and the
//! CLIP image-alignment score.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::models::{LatentModel, LdmBundle};
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 7;
pub const MIN_FRECHET_SET: usize = 32;
pub const HF_CUTOFF: f64 = 0.25;

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    a.same_shape(b)?;
    if a.shape().len() != 4 {
        return Err(Error::Shape(format!("expected NCHW images, got {:?}", a.shape())));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` for `[0, 1]` images, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    let mse = a.sub(b).mean_sq();
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn box_mean(plane: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        let mut s: f64 = plane[i * w..i * w + k].iter().sum();
        rows[i * ow] = s;
        for j in 1..ow {
            s += plane[i * w + j + k - 1] - plane[i * w + j - 1];
            rows[i * ow + j] = s;
        }
    }
    let mut out = vec![0.0; oh * ow];
    let norm = (k * k) as f64;
    for j in 0..ow {
        let mut s: f64 = (0..k).map(|i| rows[i * ow + j]).sum();
        out[j] = s / norm;
        for i in 1..oh {
            s += rows[(i + k - 1) * ow + j] - rows[(i - 1) * ow + j];
            out[i * ow + j] = s / norm;
        }
    }
    out
}

/// Mean SSIM over all 7x7 windows fully inside the image (uniform window,
/// sample covariances, `K1 = 0.01`, `K2 = 0.03`, data range 1), averaged
/// over channels and batch items.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    let (n, c, h, w) = a.dims4();
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::Shape(format!("SSIM needs at least {k}x{k} images, got {h}x{w}")));
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let np = (k * k) as f64;
    let cov_norm = np / (np - 1.0);
    let mut total = 0.0;
    for (pa, pb) in a.data().chunks(h * w).zip(b.data().chunks(h * w)) {
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x * y).collect();
        let (ma, mb) = (box_mean(pa, h, w, k), box_mean(pb, h, w, k));
        let (maa, mbb, mab) = (box_mean(&aa, h, w, k), box_mean(&bb, h, w, k), box_mean(&ab, h, w, k));
        let mut s = 0.0;
        for i in 0..ma.len() {
            let va = cov_norm * (maa[i] - ma[i] * ma[i]);
            let vb = cov_norm * (mbb[i] - mb[i] * mb[i]);
            let cov = cov_norm * (mab[i] - ma[i] * mb[i]);
            s += ((2.0 * ma[i] * mb[i] + c1) * (2.0 * cov + c2))
                / ((ma[i] * ma[i] + mb[i] * mb[i] + c1) * (va + vb + c2));
        }
        total += s / ma.len() as f64;
    }
    Ok(total / (n * c) as f64)
}

/// Fraction of non-DC spectral power at normalized radial frequency above
/// `cutoff` (1.0 = Nyquist). Constant images give 0.
pub fn high_frequency_energy(x: &Tensor) -> f64 {
    high_frequency_energy_with(x, HF_CUTOFF)
}

pub fn high_frequency_energy_with(x: &Tensor, cutoff: f64) -> f64 {
    let (_, _, h, w) = x.dims4();
    let twiddle = |n: usize| -> Vec<(f64, f64)> {
        (0..n * n)
            .map(|i| {
                let a = -2.0 * std::f64::consts::PI * ((i / n) * (i % n)) as f64 / n as f64;
                (a.cos(), a.sin())
            })
            .collect()
    };
    let (tw_h, tw_w) = (twiddle(h), twiddle(w));
    let freq = |k: usize, n: usize| {
        let f = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
        f / n as f64 / 0.5
    };
    let (mut high, mut all) = (0.0, 0.0);
    for plane in x.data().chunks(h * w) {
        let mean = plane.iter().sum::<f64>() / plane.len() as f64;
        // rows first, then columns
        let mut tmp = vec![(0.0, 0.0); h * w];
        for i in 0..h {
            for kx in 0..w {
                let (mut re, mut im) = (0.0, 0.0);
                for j in 0..w {
                    let v = plane[i * w + j] - mean;
                    let (c, s) = tw_w[kx * w + j];
                    re += v * c;
                    im += v * s;
                }
                tmp[i * w + kx] = (re, im);
            }
        }
        for ky in 0..h {
            for kx in 0..w {
                let (mut re, mut im) = (0.0, 0.0);
                for i in 0..h {
                    let (vr, vi) = tmp[i * w + kx];
                    let (c, s) = tw_h[ky * h + i];
                    re += vr * c - vi * s;
                    im += vr * s + vi * c;
                }
                let p = re * re + im * im;
                all += p;
                let r = (freq(ky, h).powi(2) + freq(kx, w).powi(2)).sqrt();
                if r > cutoff {
                    high += p;
                }
            }
        }
    }
    if all <= 1e-24 {
        0.0
    } else {
        high / all
    }
}

/// Pooled, standardized latents of a reference encoder, used as the
/// feature space for every feature-based analog metric.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    bundle: LdmBundle,
    pool: usize,
}

impl FeatureExtractor {
    pub fn new(bundle: &LdmBundle) -> Self {
        Self {
            bundle: bundle.clone(),
            pool: 2,
        }
    }

    pub fn dim(&self) -> usize {
        let s = self.bundle.arch.latent_size() / self.pool;
        self.bundle.arch.latent_channels * s * s
    }

    /// One feature vector per batch item.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        self.bundle.check_image(x)?;
        let z = self.bundle.encode(x);
        let (n, c, h, w) = z.dims4();
        let p = self.pool;
        let (oh, ow) = (h / p, w / p);
        let d = z.data();
        Ok((0..n)
            .map(|b| {
                let mut f = Vec::with_capacity(c * oh * ow);
                for ch in 0..c {
                    let base = (b * c + ch) * h * w;
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut s = 0.0;
                            for a in 0..p {
                                for q in 0..p {
                                    s += d[base + (i * p + a) * w + j * p + q];
                                }
                            }
                            f.push(s / (p * p) as f64);
                        }
                    }
                }
                f
            })
            .collect())
    }

    pub fn feature(&self, x: &Tensor) -> Result<Vec<f64>> {
        if x.shape()[0] != 1 {
            return Err(Error::Shape("expected a single image".into()));
        }
        Ok(self.features(x)?.remove(0))
    }

    pub fn features_of(&self, images: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            out.extend(self.features(&Tensor::stack(chunk)?)?);
        }
        Ok(out)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        return 1.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Image-alignment analog: cosine similarity of encoder features.
pub fn ia_score(a: &Tensor, b: &Tensor, fx: &FeatureExtractor) -> Result<f64> {
    check_pair(a, b)?;
    Ok(cosine(&fx.feature(a)?, &fx.feature(b)?))
}

/// Perceptual-distance analog: RMS difference of encoder features.
pub fn feature_distance(a: &Tensor, b: &Tensor, fx: &FeatureExtractor) -> Result<f64> {
    check_pair(a, b)?;
    let (fa, fb) = (fx.feature(a)?, fx.feature(b)?);
    let ss: f64 = fa.iter().zip(&fb).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((ss / fa.len() as f64).sqrt())
}

fn mean_cov(rows: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mu = vec![0.0; d];
    for r in rows {
        for (m, v) in mu.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        for i in 0..d {
            let di = r[i] - mu[i];
            for j in 0..d {
                cov[(i, j)] += di * (r[j] - mu[j]) / (n - 1.0);
            }
        }
    }
    (mu, cov)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let s = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * s * e.eigenvectors.transpose()
}

/// Frechet distance between Gaussians fitted to two feature sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < MIN_FRECHET_SET || b.len() < MIN_FRECHET_SET {
        return Err(Error::InsufficientData(format!(
            "Frechet distance needs at least {MIN_FRECHET_SET} samples per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, ca) = mean_cov(a);
    let (mb, cb) = mean_cov(b);
    let mean_term: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
    let sa = sqrt_psd(&ca);
    let mid = &sa * &cb * &sa;
    let mid = (&mid + mid.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(mid).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    Ok((mean_term + ca.trace() + cb.trace() - 2.0 * cross).max(0.0))
}

/// FID analog over encoder features of two image sets.
pub fn frechet_feature_distance(a: &[Tensor], b: &[Tensor], fx: &FeatureExtractor) -> Result<f64> {
    frechet_distance(&fx.features_of(a)?, &fx.features_of(b)?)
}
