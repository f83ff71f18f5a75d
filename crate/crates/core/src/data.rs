//! Procedural datasets and image/array file formats.
//!
//! Four sub-datasets (cartoon, artwork, landscape, portrait) each contribute
//! two classes of grayscale images. They stand in for real image domains and
//! keep the whole laboratory free of external data.

use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 8;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "cartoon-disc",
    "cartoon-square",
    "artwork-stripes",
    "artwork-rings",
    "landscape-hills",
    "landscape-peaks",
    "portrait-dark",
    "portrait-light",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Cartoon,
    Artwork,
    Landscape,
    Portrait,
}

impl Domain {
    pub const ALL: [Domain; 4] = [Domain::Cartoon, Domain::Artwork, Domain::Landscape, Domain::Portrait];

    pub fn of_class(class: usize) -> Domain {
        Self::ALL[class / 2]
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::Cartoon => "cartoon",
            Domain::Artwork => "artwork",
            Domain::Landscape => "landscape",
            Domain::Portrait => "portrait",
        }
    }
}

/// Rendering variant. `Style` shifts contrast and stroke widths so a second
/// image population shares class structure but not pixel statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Standard,
    Style,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub per_class: usize,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    pub seed: u64,
    #[serde(default)]
    pub variant: Variant,
}

fn default_resolution() -> usize {
    32
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub resolution: usize,
}

impl Dataset {
    /// Generates `per_class` images of every class, interleaved by class.
    pub fn generate(spec: &DatasetSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut images = Vec::with_capacity(spec.per_class * NUM_CLASSES);
        let mut labels = Vec::with_capacity(spec.per_class * NUM_CLASSES);
        for _ in 0..spec.per_class {
            for class in 0..NUM_CLASSES {
                images.push(render(class, spec.resolution, spec.variant, &mut rng));
                labels.push(class);
            }
        }
        Self {
            images,
            labels,
            resolution: spec.resolution,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn domain(&self, i: usize) -> Domain {
        Domain::of_class(self.labels[i])
    }

    /// Subset by index list.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            resolution: self.resolution,
        }
    }

    /// Indices of one class.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    /// SHA-256 over pixel values and labels.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (img, &label) in self.images.iter().zip(&self.labels) {
            for v in img.data() {
                h.update(v.to_le_bytes());
            }
            h.update((label as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Writes `img_XXXXX.png` files plus `manifest.json`.
    pub fn save(&self, dir: &Path, seed: u64) -> Result<DatasetManifest> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.len());
        for (i, (img, &label)) in self.images.iter().zip(&self.labels).enumerate() {
            let file = format!("img_{i:05}.png");
            save_png(img, &dir.join(&file))?;
            entries.push(ManifestEntry {
                file,
                class: label,
                domain: Domain::of_class(label),
            });
        }
        let manifest = DatasetManifest {
            schema_version: 1,
            resolution: self.resolution,
            channels: 1,
            seed,
            entries,
        };
        write_json_atomic(&dir.join("manifest.json"), &manifest)?;
        Ok(manifest)
    }

    /// Loads a dataset written by [`Dataset::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let mut images = Vec::with_capacity(manifest.entries.len());
        let mut labels = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let img = load_png(&dir.join(&e.file))?;
            let (_, _, h, w) = img.dims4();
            if h != manifest.resolution || w != manifest.resolution {
                return Err(Error::ResolutionMismatch(format!(
                    "{} is {h}x{w}, manifest says {}",
                    e.file, manifest.resolution
                )));
            }
            images.push(img);
            labels.push(e.class);
        }
        Ok(Self {
            images,
            labels,
            resolution: manifest.resolution,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: String,
    pub class: usize,
    pub domain: Domain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub resolution: usize,
    pub channels: usize,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

fn smoothstep_edge(d: f64) -> f64 {
    // coverage of a half-plane at signed distance `d` (pixels, negative inside)
    (0.5 - d).clamp(0.0, 1.0)
}

struct Canvas {
    n: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn new(n: usize, v: f64) -> Self {
        Self { n, px: vec![v; n * n] }
    }

    /// Blends `value` with coverage from a signed-distance function.
    fn fill(&mut self, value: f64, sdf: impl Fn(f64, f64) -> f64) {
        for y in 0..self.n {
            for x in 0..self.n {
                let c = smoothstep_edge(sdf(x as f64 + 0.5, y as f64 + 0.5));
                let p = &mut self.px[y * self.n + x];
                *p = *p * (1.0 - c) + value * c;
            }
        }
    }

    fn shade(&mut self, f: impl Fn(f64, f64, f64) -> f64) {
        for y in 0..self.n {
            for x in 0..self.n {
                let p = &mut self.px[y * self.n + x];
                *p = f(x as f64 + 0.5, y as f64 + 0.5, *p);
            }
        }
    }

    fn into_tensor<R: Rng + ?Sized>(self, noise: f64, rng: &mut R) -> Tensor {
        let n = self.n;
        let data = self
            .px
            .into_iter()
            .map(|v| (v + noise * (rng.random::<f64>() - 0.5) * 2.0).clamp(0.0, 1.0))
            .collect();
        Tensor::new(&[1, 1, n, n], data).expect("canvas shape")
    }
}

fn circle(cx: f64, cy: f64, r: f64) -> impl Fn(f64, f64) -> f64 {
    move |x, y| ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - r
}

fn rotated_square(cx: f64, cy: f64, half: f64, angle: f64) -> impl Fn(f64, f64) -> f64 {
    let (s, c) = angle.sin_cos();
    move |x, y| {
        let (dx, dy) = (x - cx, y - cy);
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        u.abs().max(v.abs()) - half
    }
}

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64) -> impl Fn(f64, f64) -> f64 {
    move |x, y| {
        let k = (((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2)).sqrt();
        (k - 1.0) * rx.min(ry)
    }
}

/// Renders one image of `class` at `n x n` resolution.
pub fn render<R: Rng + ?Sized>(class: usize, n: usize, variant: Variant, rng: &mut R) -> Tensor {
    let s = n as f64 / 32.0;
    let (contrast, stroke) = match variant {
        Variant::Standard => (1.0, 1.5),
        Variant::Style => (0.75, 2.5),
    };
    let mix = |a: f64, b: f64| 0.5 + (a - 0.5) * contrast * b;
    let mut cv;
    match class {
        0 => {
            cv = Canvas::new(n, mix(rng.random_range(0.65..0.95), 1.0));
            let (cx, cy) = (rng.random_range(11.0..21.0) * s, rng.random_range(11.0..21.0) * s);
            let r = rng.random_range(6.0..10.0) * s;
            cv.fill(mix(0.05, 1.0), circle(cx, cy, r + stroke * s));
            cv.fill(mix(rng.random_range(0.25..0.55), 1.0), circle(cx, cy, r));
            cv.fill(mix(0.95, 1.0), circle(cx - r * 0.35, cy - r * 0.35, r * 0.25));
        }
        1 => {
            cv = Canvas::new(n, mix(rng.random_range(0.65..0.95), 1.0));
            let (cx, cy) = (rng.random_range(11.0..21.0) * s, rng.random_range(11.0..21.0) * s);
            let half = rng.random_range(5.0..9.0) * s;
            let a = rng.random_range(0.0..PI / 2.0);
            cv.fill(mix(0.05, 1.0), rotated_square(cx, cy, half + stroke * s, a));
            cv.fill(mix(rng.random_range(0.25..0.55), 1.0), rotated_square(cx, cy, half, a));
        }
        2 => {
            cv = Canvas::new(n, 0.5);
            let angle = rng.random_range(PI / 6.0..PI / 3.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            let period = rng.random_range(5.0..9.0) * s;
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.3..0.45);
            let (sa, ca) = angle.sin_cos();
            cv.shade(|x, y, _| {
                let u = ca * x + sa * y;
                let v = -sa * x + ca * y;
                let wobble = 0.6 * (v / (4.0 * s)).sin();
                mix(0.5 + amp * (2.0 * PI * (u + wobble) / period + phase).sin(), 1.0)
            });
        }
        3 => {
            cv = Canvas::new(n, 0.5);
            let (cx, cy) = (rng.random_range(6.0..26.0) * s, rng.random_range(6.0..26.0) * s);
            let period = rng.random_range(5.0..8.0) * s;
            let amp = rng.random_range(0.3..0.45);
            cv.shade(|x, y, _| {
                let r = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                mix(0.5 + amp * (2.0 * PI * r / period).cos(), 1.0)
            });
        }
        4 => {
            cv = Canvas::new(n, 0.0);
            let h0 = rng.random_range(14.0..20.0) * s;
            let a = rng.random_range(1.5..4.0) * s;
            let w = rng.random_range(0.15..0.35) / s;
            let ph = rng.random_range(0.0..2.0 * PI);
            let sky = rng.random_range(0.75..0.95);
            let ground = rng.random_range(0.15..0.35);
            cv.shade(|x, y, _| {
                let horizon = h0 + a * (w * x + ph).sin();
                let c = smoothstep_edge(horizon - y);
                let sky_v = sky - 0.25 * (1.0 - y / n as f64);
                let ground_v = ground + 0.1 * ((y - horizon) / n as f64);
                mix(sky_v * (1.0 - c) + ground_v * c, 1.0)
            });
            let (sx, sy) = (rng.random_range(5.0..27.0) * s, rng.random_range(4.0..9.0) * s);
            cv.fill(mix(1.0, 1.0), circle(sx, sy, 2.5 * s));
        }
        5 => {
            cv = Canvas::new(n, 0.0);
            let base = rng.random_range(18.0..24.0) * s;
            let peaks: Vec<(f64, f64)> = (0..3)
                .map(|i| {
                    (
                        (i as f64 * 11.0 + rng.random_range(2.0..9.0)) * s,
                        rng.random_range(7.0..13.0) * s,
                    )
                })
                .collect();
            let sky = rng.random_range(0.7..0.9);
            let rock = rng.random_range(0.1..0.3);
            cv.shade(|x, y, _| {
                let ridge = peaks
                    .iter()
                    .map(|&(px, h)| base - (h - (x - px).abs()).max(0.0))
                    .fold(base, f64::min);
                let c = smoothstep_edge(ridge - y);
                let sky_v = sky - 0.2 * (1.0 - y / n as f64);
                mix(sky_v * (1.0 - c) + (rock + 0.15 * (y - ridge).max(0.0) / n as f64) * c, 1.0)
            });
        }
        6 | 7 => {
            let dark = class == 6;
            let bg = if dark {
                rng.random_range(0.05..0.25)
            } else {
                rng.random_range(0.75..0.95)
            };
            cv = Canvas::new(n, mix(bg, 1.0));
            let (cx, cy) = (rng.random_range(14.0..18.0) * s, rng.random_range(15.0..18.0) * s);
            let (rx, ry) = (rng.random_range(7.0..9.0) * s, rng.random_range(9.0..11.0) * s);
            if !dark {
                cv.fill(mix(0.1, 1.0), ellipse(cx, cy - 2.5 * s, rx + 1.5 * s, ry));
            }
            let skin = if dark {
                rng.random_range(0.7..0.9)
            } else {
                rng.random_range(0.45..0.65)
            };
            cv.fill(mix(skin, 1.0), ellipse(cx, cy, rx, ry));
            let eye_dx = rx * 0.4;
            let eye_y = cy - ry * 0.2;
            cv.fill(mix(0.05, 1.0), circle(cx - eye_dx, eye_y, 1.3 * s));
            cv.fill(mix(0.05, 1.0), circle(cx + eye_dx, eye_y, 1.3 * s));
            let my = cy + ry * 0.45;
            let mw = rx * 0.4;
            cv.fill(mix(0.15, 1.0), move |x, y| ((y - my).abs() - 0.6 * s).max((x - cx).abs() - mw));
        }
        _ => panic!("class {class} out of range"),
    }
    cv.into_tensor(0.02, rng)
}

/// A periodic high-contrast target pattern for textural losses.
pub fn default_target_pattern(n: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            // crossed diagonal gratings with a 4-pixel period
            let a = ((x + y) / 2) % 2;
            let b = ((x + n - y) / 2) % 2;
            data.push(if a ^ b == 1 { 1.0 } else { 0.0 });
        }
    }
    Tensor::new(&[1, 1, n, n], data).expect("pattern shape")
}

/// Converts a `[1, C, H, W]` tensor in `[0, 1]` to 8-bit PNG.
pub fn save_png(img: &Tensor, path: &Path) -> Result<()> {
    let (_, c, h, w) = img.dims4();
    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match c {
        1 => {
            let buf: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
            let im = image::GrayImage::from_raw(w as u32, h as u32, buf)
                .ok_or_else(|| Error::Shape("png buffer".into()))?;
            im.save_with_format(path, image::ImageFormat::Png)?;
        }
        3 => {
            let plane = h * w;
            let mut buf = Vec::with_capacity(3 * plane);
            for i in 0..plane {
                for ch in 0..3 {
                    buf.push(to_u8(img.data()[ch * plane + i]));
                }
            }
            let im = image::RgbImage::from_raw(w as u32, h as u32, buf)
                .ok_or_else(|| Error::Shape("png buffer".into()))?;
            im.save_with_format(path, image::ImageFormat::Png)?;
        }
        _ => return Err(Error::Shape(format!("cannot write {c}-channel png"))),
    }
    Ok(())
}

/// Loads a PNG as a single-channel `[1, 1, H, W]` tensor.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let im = image::open(path)?.to_luma8();
    let (w, h) = im.dimensions();
    let data = im.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Tensor::new(&[1, 1, h as usize, w as usize], data)
}

/// Quantizes to the 8-bit grid a PNG round trip would produce.
pub fn quantize_u8(img: &Tensor) -> Tensor {
    img.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

const NPY_MAGIC: &[u8] = b"\x93NUMPY";

/// Writes a little-endian `f64` array in NumPy `.npy` v1.0 format.
pub fn save_npy(t: &Tensor, path: &Path) -> Result<()> {
    let shape = t
        .shape()
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(", ");
    let shape = if t.shape().len() == 1 { format!("{shape},") } else { shape };
    let mut header = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': ({shape}), }}");
    let total = NPY_MAGIC.len() + 2 + 2 + header.len() + 1;
    header.push_str(&" ".repeat((64 - total % 64) % 64));
    header.push('\n');
    let mut out = Vec::with_capacity(total + t.numel() * 8 + 64);
    out.extend_from_slice(NPY_MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &out)
}

/// Reads an array written by [`save_npy`].
pub fn load_npy(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| Error::Shape(format!("{}: {m}", path.display()));
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(bad("not an npy file"));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = std::str::from_utf8(bytes.get(10..10 + hlen).ok_or_else(|| bad("short header"))?)
        .map_err(|_| bad("header is not utf-8"))?;
    if !header.contains("'<f8'") || header.contains("'fortran_order': True") {
        return Err(bad("only C-ordered <f8 arrays are supported"));
    }
    let open = header.find("'shape': (").ok_or_else(|| bad("missing shape"))? + 10;
    let close = open + header[open..].find(')').ok_or_else(|| bad("missing shape"))?;
    let shape: Vec<usize> = header[open..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| bad("bad shape")))
        .collect::<Result<_>>()?;
    let body = &bytes[10 + hlen..];
    let n: usize = shape.iter().product();
    if body.len() != n * 8 {
        return Err(bad("payload size does not match shape"));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(&shape, data)
}

/// Writes via a temporary sibling and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp~");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}
