//! Purification defenses applied to protected images before editing.

use image::codecs::jpeg::{JpegDecoder, JpegEncoder};
use image::{ExtendedColorType, ImageDecoder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_JPEG_QUALITY: u8 = 65;
pub const DEFAULT_CROP_FRACTION: f64 = 0.20;

/// JPEG round trip of a single-channel image at `quality`.
pub fn purify_jpeg(x: &Tensor, quality: u8) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4();
    if n != 1 || c != 1 {
        return Err(Error::Shape(format!("JPEG purification expects [1, 1, H, W], got {:?}", x.shape())));
    }
    let bytes: Vec<u8> = x.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality.clamp(1, 100)).encode(&bytes, w as u32, h as u32, ExtendedColorType::L8)?;
    let dec = JpegDecoder::new(std::io::Cursor::new(&buf))?;
    let mut out = vec![0u8; dec.total_bytes() as usize];
    dec.read_image(&mut out)?;
    Tensor::new(x.shape(), out.into_iter().map(|v| v as f64 / 255.0).collect())
}

/// Bilinear resampling with half-pixel centers.
pub fn resize_bilinear(plane: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let (y0, y1, fy) = coord(i, h, oh);
        for j in 0..ow {
            let (x0, x1, fx) = coord(j, w, ow);
            let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
            let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Center crop removing `fraction` of each side length, then bilinear
/// resize back to the original size.
pub fn purify_crop_resize(x: &Tensor, fraction: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("crop fraction {fraction} outside [0, 1)")));
    }
    let (_, _, h, w) = x.dims4();
    let ch = ((h as f64) * (1.0 - fraction)).round().max(1.0) as usize;
    let cw = ((w as f64) * (1.0 - fraction)).round().max(1.0) as usize;
    let (top, left) = ((h - ch) / 2, (w - cw) / 2);
    let mut out = Vec::with_capacity(x.numel());
    for plane in x.data().chunks(h * w) {
        let crop: Vec<f64> = (0..ch)
            .flat_map(|i| plane[(top + i) * w + left..(top + i) * w + left + cw].iter().copied())
            .collect();
        out.extend(resize_bilinear(&crop, ch, cw, h, w));
    }
    Tensor::new(x.shape(), out)
}

/// Bilateral filter parameters for the edge-preserving smoothing defense.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothParams {
    pub radius: usize,
    pub sigma_space: f64,
    pub sigma_range: f64,
}

impl Default for SmoothParams {
    fn default() -> Self {
        Self {
            radius: 2,
            sigma_space: 1.5,
            sigma_range: 0.1,
        }
    }
}

/// Bilateral filter with replicated borders.
pub fn purify_smooth(x: &Tensor, p: &SmoothParams) -> Tensor {
    let (_, _, h, w) = x.dims4();
    let r = p.radius as isize;
    let mut out = Vec::with_capacity(x.numel());
    for plane in x.data().chunks(h * w) {
        for i in 0..h as isize {
            for j in 0..w as isize {
                let c = plane[(i as usize) * w + j as usize];
                let (mut num, mut den) = (0.0, 0.0);
                for di in -r..=r {
                    for dj in -r..=r {
                        let y = (i + di).clamp(0, h as isize - 1) as usize;
                        let xx = (j + dj).clamp(0, w as isize - 1) as usize;
                        let v = plane[y * w + xx];
                        let ws = (-((di * di + dj * dj) as f64) / (2.0 * p.sigma_space * p.sigma_space)).exp();
                        let wr = (-(v - c) * (v - c) / (2.0 * p.sigma_range * p.sigma_range)).exp();
                        num += ws * wr * v;
                        den += ws * wr;
                    }
                }
                out.push(num / den);
            }
        }
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

/// A named purification step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Purification {
    Jpeg { quality: u8 },
    CropResize { fraction: f64 },
    Smooth(SmoothParams),
}

impl Purification {
    pub fn defaults() -> Vec<Purification> {
        vec![
            Purification::Jpeg {
                quality: DEFAULT_JPEG_QUALITY,
            },
            Purification::CropResize {
                fraction: DEFAULT_CROP_FRACTION,
            },
            Purification::Smooth(SmoothParams::default()),
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Purification::Jpeg { .. } => "jpeg",
            Purification::CropResize { .. } => "crop_resize",
            Purification::Smooth(_) => "smooth",
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Purification::Jpeg { quality } => purify_jpeg(x, *quality),
            Purification::CropResize { fraction } => purify_crop_resize(x, *fraction),
            Purification::Smooth(p) => Ok(purify_smooth(x, p)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img() -> Tensor {
        Tensor::rand_uniform(&[1, 1, 32, 32], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(4))
    }

    #[test]
    fn zero_crop_is_identity() {
        let x = img();
        assert!(purify_crop_resize(&x, 0.0).unwrap().sub(&x).max_abs() < 1e-12);
    }

    #[test]
    fn crop_zooms_the_center() {
        let x = Tensor::new(&[1, 1, 32, 32], (0..1024).map(|i| (i % 32) as f64 / 31.0).collect()).unwrap();
        let y = purify_crop_resize(&x, 0.2).unwrap();
        let row = &y.data()[..32];
        assert!(row[0] > x.data()[0] && row[31] < x.data()[31]);
        assert!(row.windows(2).all(|p| p[1] >= p[0]));
    }

    #[test]
    fn jpeg_is_close_but_lossy() {
        let x = crate::data::default_target_pattern(32).map(|v| 0.25 + 0.5 * v);
        let y = purify_jpeg(&x, 65).unwrap();
        let e = y.rmse(&x);
        assert!(e > 0.0 && e < 0.15, "{e}");
        let flat = Tensor::full(&[1, 1, 32, 32], 128.0 / 255.0);
        assert!(purify_jpeg(&flat, 65).unwrap().rmse(&flat) < 2.0 / 255.0);
    }

    #[test]
    fn smoothing_reduces_noise_and_keeps_edges() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let step = Tensor::new(&[1, 1, 16, 16], (0..256).map(|i| if i % 16 < 8 { 0.2 } else { 0.8 }).collect()).unwrap();
        let noisy = step.add(&Tensor::randn(step.shape(), &mut r).scale(0.02));
        let s = purify_smooth(&noisy, &SmoothParams::default());
        assert!(s.rmse(&step) < noisy.rmse(&step));
        assert!(purify_smooth(&step, &SmoothParams::default()).rmse(&step) < 1e-3);
    }
}
