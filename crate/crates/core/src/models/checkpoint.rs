//! Single-file checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (architecture, schedule, statistics, meta and the tensor index
//! table), then every parameter as little-endian `f32` in index order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::pixel::PixelArchitecture;
use super::{Architecture, BundleMeta, LatentStats, LdmBundle, PixelDmBundle};
use crate::data::write_atomic;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LSHIELD\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const KIND_LDM: &str = "ldm";
const KIND_PIXEL: &str = "pixel_dm";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub store: u8,
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob in `f32` elements.
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    architecture: serde_json::Value,
    schedule: NoiseSchedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    latent_stats: Option<LatentStats>,
    meta: BundleMeta,
    tensors: Vec<TensorEntry>,
    blob_len: usize,
    blob_sha256: String,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

fn encode(
    kind: &str,
    architecture: serde_json::Value,
    schedule: &NoiseSchedule,
    latent_stats: Option<&LatentStats>,
    meta: &BundleMeta,
    stores: &[&ParamStore],
) -> Result<Vec<u8>> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for store in stores {
        for (name, t) in store.names().iter().zip(store.tensors()) {
            tensors.push(TensorEntry {
                store: store.tag(),
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: blob.len() / 4,
            });
            for &v in t.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    let header = Header {
        kind: kind.to_string(),
        architecture,
        schedule: schedule.clone(),
        latent_stats: latent_stats.cloned(),
        meta: meta.clone(),
        tensors,
        blob_len: blob.len(),
        blob_sha256: hex::encode(Sha256::digest(&blob)),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + blob.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<(Header, Vec<f32>)> {
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("missing checkpoint magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if header_len > body.len() {
        return Err(corrupt(format!("header length {header_len} exceeds file size")));
    }
    let header: Header =
        serde_json::from_slice(&body[..header_len]).map_err(|e| corrupt(format!("bad header: {e}")))?;
    let blob = &body[header_len..];
    if blob.len() != header.blob_len {
        return Err(corrupt(format!(
            "parameter blob is {} bytes, header says {}",
            blob.len(),
            header.blob_len
        )));
    }
    if hex::encode(Sha256::digest(blob)) != header.blob_sha256 {
        return Err(corrupt("parameter blob checksum mismatch"));
    }
    let values = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((header, values))
}

fn restore(store: &mut ParamStore, header: &Header, values: &[f32]) -> Result<()> {
    let entries: Vec<&TensorEntry> = header.tensors.iter().filter(|e| e.store == store.tag()).collect();
    if entries.len() != store.len() {
        return Err(corrupt(format!(
            "store {} has {} tensors in file, architecture needs {}",
            store.tag(),
            entries.len(),
            store.len()
        )));
    }
    for (idx, e) in entries.into_iter().enumerate() {
        if e.name != store.names()[idx] || e.shape != store.get(idx).shape() {
            return Err(corrupt(format!(
                "tensor `{}` {:?} does not match architecture `{}` {:?}",
                e.name,
                e.shape,
                store.names()[idx],
                store.get(idx).shape()
            )));
        }
        let n: usize = e.shape.iter().product();
        let slice = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| corrupt(format!("tensor `{}` runs past the blob", e.name)))?;
        let t = Tensor::new(&e.shape, slice.iter().map(|&v| v as f64).collect())?;
        store.set(idx, t);
    }
    Ok(())
}

fn read(path: &Path) -> Result<(Header, Vec<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode(&bytes)
}

fn expect_kind(header: &Header, kind: &str) -> Result<()> {
    if header.kind != kind {
        return Err(corrupt(format!("checkpoint holds `{}`, expected `{kind}`", header.kind)));
    }
    Ok(())
}

pub fn checkpoint_bytes(bundle: &LdmBundle) -> Result<Vec<u8>> {
    encode(
        KIND_LDM,
        serde_json::to_value(&bundle.arch)?,
        &bundle.schedule,
        Some(&bundle.stats),
        &bundle.meta,
        &[&bundle.encoder.store, &bundle.decoder.store, &bundle.denoiser.store],
    )
}

pub fn save_checkpoint(bundle: &LdmBundle, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(bundle)?)
}

pub fn load_checkpoint(path: &Path) -> Result<LdmBundle> {
    let (header, values) = read(path)?;
    expect_kind(&header, KIND_LDM)?;
    let arch: Architecture =
        serde_json::from_value(header.architecture.clone()).map_err(|e| corrupt(format!("bad architecture: {e}")))?;
    let mut bundle = LdmBundle::init(arch, header.schedule.clone(), header.meta.seed)?;
    restore(&mut bundle.encoder.store, &header, &values)?;
    restore(&mut bundle.decoder.store, &header, &values)?;
    restore(&mut bundle.denoiser.store, &header, &values)?;
    bundle.stats = header
        .latent_stats
        .clone()
        .ok_or_else(|| corrupt("latent statistics missing"))?;
    bundle.meta = header.meta;
    Ok(bundle)
}

pub fn save_pixel_checkpoint(bundle: &PixelDmBundle, path: &Path) -> Result<()> {
    let bytes = encode(
        KIND_PIXEL,
        serde_json::to_value(&bundle.arch)?,
        &bundle.schedule,
        None,
        &bundle.meta,
        &[&bundle.denoiser.store],
    )?;
    write_atomic(path, &bytes)
}

pub fn load_pixel_checkpoint(path: &Path) -> Result<PixelDmBundle> {
    let (header, values) = read(path)?;
    expect_kind(&header, KIND_PIXEL)?;
    let arch: PixelArchitecture =
        serde_json::from_value(header.architecture.clone()).map_err(|e| corrupt(format!("bad architecture: {e}")))?;
    let mut bundle = PixelDmBundle::init(arch, header.schedule.clone(), header.meta.seed);
    restore(&mut bundle.denoiser.store, &header, &values)?;
    bundle.meta = header.meta;
    Ok(bundle)
}
