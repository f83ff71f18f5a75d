//! Batch front-end: JSON experiment configs, stage caching through a run
//! manifest, and the subcommands behind the `latentshield` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{item_seed, protect_batch, AttackConfig, Method, TargetImage};
use crate::data::{load_png, save_npy, save_png, write_atomic, write_json_atomic, Dataset, DatasetManifest, DatasetSpec, Variant};
use crate::diagnostics::{
    budget_ratio, denoiser_robustness_probe, loss_curve_compare, pixel_dm_attack_probe, roundtrip_reflection, transfer_probe,
    BudgetRatioReport, BudgetRatioRow, RobustnessConfig,
};
use crate::error::{Error, Result};
use crate::eval::metrics::FeatureExtractor;
use crate::eval::report::{build_report, EditMetric, MethodRun, ReportInput, CLEAN};
use crate::eval::{par_map, EditProtocol};
use crate::lab::{content_hash, ScheduleSpec};
use crate::models::checkpoint::{load_checkpoint, load_pixel_checkpoint, save_checkpoint};
use crate::models::train::{train_autoencoder, train_denoiser, AutoencoderConfig, DenoiserConfig};
use crate::models::{Architecture, LdmBundle};
use crate::tensor::Tensor;
use crate::threats::{generate, invert_embedding, EditKind, EditRequest, DEFAULT_INVERSION_ITERS, DEFAULT_INVERSION_LR};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
const INVERSION_SAMPLES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub per_class: usize,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default)]
    pub variant: Variant,
}

fn default_resolution() -> usize {
    32
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Use an existing checkpoint instead of training.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub arch: Architecture,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub autoencoder: AutoencoderConfig,
    #[serde(default)]
    pub denoiser: DenoiserConfig,
}

/// An attack entry: a method name plus optional overrides of its template.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackEntry {
    pub method: Method,
    #[serde(default)]
    pub budget: Option<f64>,
    #[serde(default)]
    pub step: Option<f64>,
    #[serde(default)]
    pub iters: Option<usize>,
    #[serde(default)]
    pub textural_weight: Option<f64>,
    #[serde(default)]
    pub target: Option<TargetImage>,
    #[serde(default)]
    pub mc_samples: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl AttackEntry {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            budget: None,
            step: None,
            iters: None,
            textural_weight: None,
            target: None,
            mc_samples: None,
            seed: None,
        }
    }

    pub fn config(&self, global_seed: u64) -> Result<AttackConfig> {
        let base = AttackConfig::for_method(self.method);
        let cfg = AttackConfig {
            budget: self.budget.unwrap_or(base.budget),
            step: self.step.unwrap_or(base.step),
            iters: self.iters.unwrap_or(base.iters),
            textural_weight: self.textural_weight.unwrap_or(base.textural_weight),
            target: self.target.clone().unwrap_or(base.target.clone()),
            mc_samples: self.mc_samples.unwrap_or(base.mc_samples),
            seed: self.seed.unwrap_or(global_seed),
            ..base
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossCurveSection {
    pub images: usize,
    pub timesteps: Vec<usize>,
    #[serde(default)]
    pub iters: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSection {
    pub budget_ratio: bool,
    pub reflection: bool,
    pub histogram_bin: f64,
    /// SDEdit strength used by the edit-based probes.
    pub strength: f64,
    pub robustness: Option<RobustnessConfig>,
    pub loss_curves: Option<LossCurveSection>,
    /// Second LDM checkpoint for the transfer probe.
    pub transfer_checkpoint: Option<PathBuf>,
    /// Pixel-space model checkpoint for the pixel attack probe.
    pub pixel_checkpoint: Option<PathBuf>,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self {
            budget_ratio: true,
            reflection: true,
            histogram_bin: 1.0,
            strength: 0.3,
            robustness: None,
            loss_curves: None,
            transfer_checkpoint: None,
            pixel_checkpoint: None,
        }
    }
}

fn default_protect_images() -> usize {
    64
}

fn default_metrics() -> Vec<EditMetric> {
    EditMetric::ALL.to_vec()
}

fn default_min_samples() -> usize {
    32
}

fn default_edits() -> Vec<EditRequest> {
    crate::threats::DEFAULT_STRENGTHS
        .iter()
        .map(|&s| EditRequest::sdedit(s, 0))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    /// How many dataset images (from the start) are protected and edited.
    #[serde(default = "default_protect_images")]
    pub protect_images: usize,
    #[serde(default)]
    pub attacks: Vec<AttackEntry>,
    #[serde(default = "default_edits")]
    pub edits: Vec<EditRequest>,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<EditMetric>,
    #[serde(default = "default_min_samples")]
    pub min_samples: usize,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
}

impl ExperimentConfig {
    /// Parses and validates; relative paths resolve against the config
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.output_dir);
        if let Some(p) = cfg.model.checkpoint.as_mut() {
            fix(p);
        }
        if let Some(p) = cfg.diagnostics.transfer_checkpoint.as_mut() {
            fix(p);
        }
        if let Some(p) = cfg.diagnostics.pixel_checkpoint.as_mut() {
            fix(p);
        }
        for a in &mut cfg.attacks {
            if let Some(TargetImage::File(p)) = a.target.as_mut() {
                fix(p);
            }
        }
        for e in &mut cfg.edits {
            if let Some(p) = e.mask.as_mut() {
                fix(p);
            }
            if let Some(p) = e.embedding.as_mut() {
                fix(p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.dataset.resolution != self.model.arch.resolution {
            return Err(Error::Config(format!(
                "dataset resolution {} differs from model resolution {}",
                self.dataset.resolution, self.model.arch.resolution
            )));
        }
        self.model.arch.validate()?;
        self.model.schedule.build()?;
        let mut seen = Vec::new();
        for a in &self.attacks {
            if seen.contains(&a.method) {
                return Err(Error::Config(format!("method {} listed twice", a.method)));
            }
            seen.push(a.method);
            a.config(self.seed)?;
        }
        let mut labels = Vec::new();
        for e in &self.edits {
            e.validate()?;
            let l = edit_label(e);
            if labels.contains(&l) {
                return Err(Error::Config(format!("edit {l} listed twice")));
            }
            labels.push(l);
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            per_class: self.dataset.per_class,
            resolution: self.dataset.resolution,
            seed: self.seed,
            variant: self.dataset.variant,
        }
    }

    pub fn hash(&self) -> String {
        content_hash(self)
    }
}

pub fn edit_label(e: &EditRequest) -> String {
    match e.kind {
        EditKind::Sdedit => format!("sdedit_{}", e.strength.unwrap_or(0.0)),
        EditKind::Inpaint => format!("inpaint_{}", e.seed),
        EditKind::EmbedInvert => format!("embed_invert_{}", e.seed),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub key: String,
    pub status: StageStatus,
    /// Paths relative to the output directory.
    pub artifacts: Vec<PathBuf>,
    pub seconds: f64,
    pub cached: bool,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub code_version: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let p = dir.join(MANIFEST_FILE);
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&fs::read(&p)?)?))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json_atomic(&dir.join(MANIFEST_FILE), self)
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.get(name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    GenData,
    Train,
    Protect,
    Edit,
    Diagnose,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::GenData,
        Stage::Train,
        Stage::Protect,
        Stage::Edit,
        Stage::Diagnose,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen_data",
            Stage::Train => "train",
            Stage::Protect => "protect",
            Stage::Edit => "edit",
            Stage::Diagnose => "diagnose",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    /// Subdirectory of the output directory owned by this stage.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::GenData => "data",
            Stage::Train => "model",
            Stage::Protect => "protect",
            Stage::Edit => "edit",
            Stage::Diagnose => "diagnose",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::GenData => &[],
            Stage::Train => &[Stage::GenData],
            Stage::Protect => &[Stage::GenData, Stage::Train],
            Stage::Edit => &[Stage::GenData, Stage::Train, Stage::Protect],
            Stage::Diagnose => &[Stage::GenData, Stage::Train, Stage::Protect],
            Stage::Evaluate => &[Stage::GenData, Stage::Train, Stage::Protect, Stage::Edit],
            Stage::Report => &[Stage::Evaluate],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunOptions {
    pub force: bool,
    pub jobs: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { force: false, jobs: 1 }
    }
}

/// What a stage invocation did.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub cached: bool,
    pub artifacts: Vec<PathBuf>,
    pub seconds: f64,
}

fn file_sha256(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Content key of a stage: its config section plus upstream keys.
fn stage_key(cfg: &ExperimentConfig, stage: Stage, manifest: &RunManifest) -> Result<String> {
    let section = match stage {
        Stage::GenData => serde_json::to_value(cfg.dataset_spec())?,
        Stage::Train => match &cfg.model.checkpoint {
            Some(p) => serde_json::json!({ "checkpoint": file_sha256(p)? }),
            None => serde_json::json!({
                "model": cfg.model,
                "seed": cfg.seed,
            }),
        },
        Stage::Protect => serde_json::json!({
            "attacks": cfg.attacks,
            "images": cfg.protect_images,
            "seed": cfg.seed,
        }),
        Stage::Edit => serde_json::json!({ "edits": cfg.edits, "seed": cfg.seed }),
        Stage::Diagnose => {
            let mut extra = BTreeMap::new();
            for p in [&cfg.diagnostics.transfer_checkpoint, &cfg.diagnostics.pixel_checkpoint]
                .into_iter()
                .flatten()
            {
                extra.insert(p.display().to_string(), file_sha256(p)?);
            }
            serde_json::json!({ "diagnostics": cfg.diagnostics, "checkpoints": extra, "seed": cfg.seed })
        }
        Stage::Evaluate => serde_json::json!({ "metrics": cfg.metrics, "min_samples": cfg.min_samples }),
        Stage::Report => serde_json::json!({}),
    };
    let mut upstream = Vec::new();
    for u in stage.upstream() {
        match manifest.stage(u.name()) {
            Some(r) if r.status == StageStatus::Complete => upstream.push(r.key.clone()),
            _ => {
                return Err(Error::MissingArtifact(
                    cfg.output_dir.join(u.dir()).join(format!("(run `{}` first)", u.name().replace('_', "-"))),
                ))
            }
        }
    }
    Ok(content_hash(&(stage.name(), section, upstream, CODE_VERSION)))
}

fn dir_is_nonempty(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Runs one stage with manifest bookkeeping: reuses a completed stage with
/// the same key unless forced, clears the stage directory before running,
/// and records artifacts and timing atomically.
pub fn run_stage(cfg: &ExperimentConfig, stage: Stage, opts: &RunOptions) -> Result<StageOutcome> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    let mut manifest = RunManifest::load(out)?.unwrap_or(RunManifest {
        schema_version: SCHEMA_VERSION,
        config_hash: cfg.hash(),
        code_version: CODE_VERSION.into(),
        stages: BTreeMap::new(),
    });
    manifest.config_hash = cfg.hash();
    manifest.code_version = CODE_VERSION.into();
    let key = stage_key(cfg, stage, &manifest)?;
    let stage_dir = out.join(stage.dir());

    if let Some(rec) = manifest.stages.get_mut(stage.name()) {
        let intact = rec.artifacts.iter().all(|a| out.join(a).exists());
        if !opts.force && rec.key == key && rec.status == StageStatus::Complete && intact {
            rec.cached = true;
            let outcome = StageOutcome {
                stage,
                cached: true,
                artifacts: rec.artifacts.clone(),
                seconds: 0.0,
            };
            manifest.save(out)?;
            return Ok(outcome);
        }
    }
    let same_key = manifest.stage(stage.name()).is_some_and(|r| r.key == key);
    if stage == Stage::GenData && !opts.force && !same_key && dir_is_nonempty(&stage_dir) {
        return Err(Error::OutputExists(stage_dir));
    }

    if stage_dir.exists() {
        fs::remove_dir_all(&stage_dir)?;
    }
    // downstream results no longer match their inputs
    for s in Stage::ALL {
        if s.upstream().contains(&stage) && manifest.stages.remove(s.name()).is_some() {
            let d = out.join(s.dir());
            if d.exists() {
                fs::remove_dir_all(d)?;
            }
        }
    }
    manifest.stages.insert(
        stage.name().into(),
        StageRecord {
            key: key.clone(),
            status: StageStatus::Running,
            artifacts: Vec::new(),
            seconds: 0.0,
            cached: false,
            error: None,
        },
    );
    manifest.save(out)?;

    let start = Instant::now();
    let result = execute(cfg, stage, opts);
    let seconds = start.elapsed().as_secs_f64();
    let rec = manifest.stages.get_mut(stage.name()).expect("inserted above");
    rec.seconds = seconds;
    match result {
        Ok(paths) => {
            let mut rel: Vec<PathBuf> = paths
                .iter()
                .map(|p| p.strip_prefix(out).map(Path::to_path_buf).unwrap_or_else(|_| p.clone()))
                .collect();
            rel.sort();
            rec.status = StageStatus::Complete;
            rec.artifacts = rel.clone();
            manifest.save(out)?;
            Ok(StageOutcome {
                stage,
                cached: false,
                artifacts: rel,
                seconds,
            })
        }
        Err(e) => {
            rec.status = StageStatus::Failed;
            rec.error = Some(e.to_string());
            manifest.save(out)?;
            Err(e)
        }
    }
}

fn execute(cfg: &ExperimentConfig, stage: Stage, opts: &RunOptions) -> Result<Vec<PathBuf>> {
    match stage {
        Stage::GenData => gen_data(cfg),
        Stage::Train => train(cfg),
        Stage::Protect => protect(cfg, opts),
        Stage::Edit => edit(cfg, opts),
        Stage::Diagnose => diagnose(cfg, opts),
        Stage::Evaluate => evaluate(cfg, opts),
        Stage::Report => report(cfg),
    }
}

fn gen_data(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let dir = cfg.output_dir.join(Stage::GenData.dir());
    let data = Dataset::generate(&cfg.dataset_spec());
    let manifest = data.save(&dir, cfg.seed)?;
    let mut paths: Vec<PathBuf> = manifest.entries.iter().map(|e| dir.join(&e.file)).collect();
    paths.push(dir.join("manifest.json"));
    Ok(paths)
}

struct Images {
    ids: Vec<String>,
    images: Vec<Tensor>,
    domains: Vec<crate::data::Domain>,
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, DatasetManifest)> {
    let dir = cfg.output_dir.join(Stage::GenData.dir());
    let mpath = dir.join("manifest.json");
    if !mpath.exists() {
        return Err(Error::MissingArtifact(mpath));
    }
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(&mpath)?)?;
    Ok((Dataset::load(&dir)?, manifest))
}

fn protected_subset(cfg: &ExperimentConfig) -> Result<Images> {
    let (data, manifest) = load_dataset(cfg)?;
    let n = cfg.protect_images.min(data.len());
    Ok(Images {
        ids: manifest.entries[..n]
            .iter()
            .map(|e| e.file.trim_end_matches(".png").to_string())
            .collect(),
        images: data.images[..n].to_vec(),
        domains: manifest.entries[..n].iter().map(|e| e.domain).collect(),
    })
}

fn model_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join(Stage::Train.dir()).join("ldm.lsc")
}

fn load_model(cfg: &ExperimentConfig) -> Result<LdmBundle> {
    let p = model_path(cfg);
    if !p.exists() {
        return Err(Error::MissingArtifact(p));
    }
    load_checkpoint(&p)
}

fn train(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let dir = cfg.output_dir.join(Stage::Train.dir());
    fs::create_dir_all(&dir)?;
    let path = model_path(cfg);
    let bundle = match &cfg.model.checkpoint {
        Some(src) => {
            let b = load_checkpoint(src)?;
            if b.arch.resolution != cfg.dataset.resolution {
                return Err(Error::ResolutionMismatch(format!(
                    "checkpoint is {}px, dataset is {}px",
                    b.arch.resolution, cfg.dataset.resolution
                )));
            }
            b
        }
        None => {
            let (data, _) = load_dataset(cfg)?;
            let m = &cfg.model;
            let mut b = LdmBundle::init(m.arch.clone(), m.schedule.build()?, cfg.seed)?;
            let ae = train_autoencoder(&mut b, &data, &m.autoencoder)?;
            let dn = train_denoiser(&mut b, &data, &m.denoiser)?;
            b.meta.dataset_id = format!("synthetic-{}x{}-seed{}", cfg.dataset.per_class, cfg.dataset.resolution, cfg.seed);
            b.meta.dataset_hash = data.content_hash();
            b.meta.config_hash = content_hash(&(m, cfg.seed));
            write_json_atomic(&dir.join("history.json"), &serde_json::json!({ "autoencoder": ae, "denoiser": dn }))?;
            b
        }
    };
    save_checkpoint(&bundle, &path)?;
    let mut out = vec![path];
    if dir.join("history.json").exists() {
        out.push(dir.join("history.json"));
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct ProtectSummary {
    method: Method,
    config: AttackConfig,
    images: Vec<String>,
    seconds_per_iter: Vec<f64>,
    max_abs_delta: Vec<f64>,
}

fn protect(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<PathBuf>> {
    let model = load_model(cfg)?;
    let subset = protected_subset(cfg)?;
    let root = cfg.output_dir.join(Stage::Protect.dir());
    let mut paths = Vec::new();
    for entry in &cfg.attacks {
        let ac = entry.config(cfg.seed)?;
        let dir = root.join(ac.method.name());
        let results = protect_batch(&subset.images, &model, &ac, opts.jobs)?;
        for (i, (r, id)) in results.iter().zip(&subset.ids).enumerate() {
            let c = AttackConfig {
                seed: item_seed(ac.seed, i),
                ..ac.clone()
            };
            r.save(&dir, id, &c)?;
            for suffix in [".png", "_delta.npy", ".json"] {
                paths.push(dir.join(format!("{id}{suffix}")));
            }
        }
        let summary = ProtectSummary {
            method: ac.method,
            config: ac.clone(),
            images: subset.ids.clone(),
            seconds_per_iter: results.iter().map(|r| r.grad_seconds_per_iter).collect(),
            max_abs_delta: results.iter().map(|r| r.delta.max_abs()).collect(),
        };
        write_json_atomic(&dir.join("summary.json"), &summary)?;
        paths.push(dir.join("summary.json"));
    }
    Ok(paths)
}

fn load_images(dir: &Path, ids: &[String]) -> Result<Vec<Tensor>> {
    ids.iter()
        .map(|id| {
            let p = dir.join(format!("{id}.png"));
            if !p.exists() {
                return Err(Error::MissingArtifact(p));
            }
            load_png(&p)
        })
        .collect()
}

/// Protected images per method, read back from the protect stage.
fn load_protected(cfg: &ExperimentConfig, ids: &[String]) -> Result<Vec<(Method, Vec<Tensor>, Vec<f64>)>> {
    let root = cfg.output_dir.join(Stage::Protect.dir());
    let mut out = Vec::new();
    for entry in &cfg.attacks {
        let dir = root.join(entry.method.name());
        let sp = dir.join("summary.json");
        if !sp.exists() {
            return Err(Error::MissingArtifact(sp));
        }
        let summary: ProtectSummary = serde_json::from_slice(&fs::read(&sp)?)?;
        out.push((entry.method, load_images(&dir, ids)?, summary.seconds_per_iter));
    }
    Ok(out)
}

fn save_all(dir: &Path, ids: &[String], images: &[Tensor], paths: &mut Vec<PathBuf>) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (id, img) in ids.iter().zip(images) {
        let p = dir.join(format!("{id}.png"));
        save_png(img, &p)?;
        paths.push(p);
    }
    Ok(())
}

fn edit_protocol(cfg: &ExperimentConfig, e: &EditRequest) -> EditProtocol {
    EditProtocol {
        strength: e.strength.unwrap_or(0.0),
        steps: e.steps,
        seed: cfg.seed.wrapping_add(e.seed),
    }
}

fn edit(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<PathBuf>> {
    let model = load_model(cfg)?;
    let subset = protected_subset(cfg)?;
    let mut sets = vec![(CLEAN.to_string(), subset.images.clone())];
    for (m, imgs, _) in load_protected(cfg, &subset.ids)? {
        sets.push((m.name().to_string(), imgs));
    }
    let root = cfg.output_dir.join(Stage::Edit.dir());
    let mut paths = Vec::new();
    for e in &cfg.edits {
        let dir = root.join(edit_label(e));
        match e.kind {
            EditKind::Sdedit => {
                let p = edit_protocol(cfg, e);
                let refs = par_map(subset.images.len(), opts.jobs, |i| p.reference(&subset.images[i], &model, i))?;
                save_all(&dir.join("reference"), &subset.ids, &refs, &mut paths)?;
                for (name, imgs) in &sets {
                    let out = par_map(imgs.len(), opts.jobs, |i| p.probe(&imgs[i], &model, i))?;
                    save_all(&dir.join(name), &subset.ids, &out, &mut paths)?;
                }
            }
            EditKind::Inpaint => {
                for (name, imgs) in &sets {
                    let out = par_map(imgs.len(), opts.jobs, |i| {
                        let req = EditRequest {
                            seed: item_seed(cfg.seed.wrapping_add(e.seed), i),
                            ..e.clone()
                        };
                        req.apply(&imgs[i], &model)
                    })?;
                    save_all(&dir.join(name), &subset.ids, &out, &mut paths)?;
                }
            }
            EditKind::EmbedInvert => {
                let seed = cfg.seed.wrapping_add(e.seed);
                for (name, imgs) in &sets {
                    let (emb, trace) = invert_embedding(
                        imgs,
                        &model,
                        e.iters.unwrap_or(DEFAULT_INVERSION_ITERS),
                        e.lr.unwrap_or(DEFAULT_INVERSION_LR),
                        seed,
                    )?;
                    let d = dir.join(name);
                    fs::create_dir_all(&d)?;
                    save_npy(&emb, &d.join("embedding.npy"))?;
                    write_json_atomic(&d.join("trace.json"), &trace)?;
                    paths.push(d.join("embedding.npy"));
                    paths.push(d.join("trace.json"));
                    let n = INVERSION_SAMPLES;
                    let samples = generate(&model, &crate::diffusion::Cond::Embedding(emb), n, e.steps, seed)?;
                    let ids: Vec<String> = (0..n).map(|i| format!("sample_{i:03}")).collect();
                    save_all(&d, &ids, &samples, &mut paths)?;
                }
            }
        }
    }
    Ok(paths)
}

fn diagnose(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<PathBuf>> {
    let model = load_model(cfg)?;
    let subset = protected_subset(cfg)?;
    let protected = load_protected(cfg, &subset.ids)?;
    let fx = FeatureExtractor::new(&model);
    let d = &cfg.diagnostics;
    let dir = cfg.output_dir.join(Stage::Diagnose.dir());
    fs::create_dir_all(&dir)?;
    let edit = EditProtocol::new(d.strength, cfg.seed);
    let mut paths = Vec::new();
    let mut summary = serde_json::Map::new();

    if d.budget_ratio {
        let mut rows = Vec::new();
        for (m, imgs, _) in &protected {
            for (i, x_adv) in imgs.iter().enumerate() {
                rows.push(BudgetRatioRow {
                    image: i,
                    domain: subset.domains[i],
                    method: *m,
                    value: budget_ratio(&subset.images[i], x_adv, &model)?,
                });
            }
        }
        let rep = BudgetRatioReport::new(rows, d.histogram_bin);
        rep.save(&dir)?;
        for f in ["budget_ratio.csv", "budget_ratio_hist.csv", "budget_ratio.json"] {
            paths.push(dir.join(f));
        }
        summary.insert("budget_ratio".into(), serde_json::to_value(&rep.summaries)?);
    }

    if d.reflection {
        let mut csv = String::from("image_id,method,similarity\n");
        let mut means = serde_json::Map::new();
        let mut sets = vec![(CLEAN.to_string(), subset.images.clone())];
        sets.extend(protected.iter().map(|(m, imgs, _)| (m.name().to_string(), imgs.clone())));
        for (name, imgs) in &sets {
            let s = par_map(imgs.len(), opts.jobs, |i| roundtrip_reflection(&imgs[i], &model, &edit, i, &fx))?;
            for (id, v) in subset.ids.iter().zip(&s) {
                csv.push_str(&format!("{id},{name},{v}\n"));
            }
            means.insert(name.clone(), (s.iter().sum::<f64>() / s.len().max(1) as f64).into());
        }
        write_atomic(&dir.join("reflection.csv"), csv.as_bytes())?;
        paths.push(dir.join("reflection.csv"));
        summary.insert("reflection_mean".into(), means.into());
    }

    if let Some(rc) = &d.robustness {
        let rows = denoiser_robustness_probe(&model, &subset.images, rc, &edit, &fx, opts.jobs)?;
        let mut csv = String::from("budget,loss_clean,loss_attacked,loss_delta,similarity,images\n");
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.budget, r.loss_clean, r.loss_attacked, r.loss_delta, r.similarity, r.images
            ));
        }
        write_atomic(&dir.join("robustness.csv"), csv.as_bytes())?;
        paths.push(dir.join("robustness.csv"));
        summary.insert("robustness".into(), serde_json::to_value(&rows)?);
    }

    if let Some(lc) = &d.loss_curves {
        let n = lc.images.min(subset.images.len());
        let mk = |m: Method| {
            let mut e = cfg
                .attacks
                .iter()
                .find(|a| a.method == m)
                .cloned()
                .unwrap_or_else(|| AttackEntry::new(m));
            e.method = m;
            if lc.iters.is_some() {
                e.iters = lc.iters;
            }
            e.config(cfg.seed)
        };
        let (full, mut sds) = (mk(Method::Advdm)?, mk(Method::SdsPlus)?);
        sds.budget = full.budget;
        sds.step = full.step;
        sds.iters = full.iters;
        sds.seed = full.seed;
        sds.mc_samples = full.mc_samples;
        let curves = loss_curve_compare(&subset.images[..n], &model, &full, &sds, &lc.timesteps, cfg.seed)?;
        write_atomic(&dir.join("loss_curves.csv"), curves.csv().as_bytes())?;
        paths.push(dir.join("loss_curves.csv"));
        summary.insert(
            "loss_curves".into(),
            serde_json::json!({
                "divergence": curves.divergence,
                "full_seconds_per_iter": curves.full_seconds_per_iter,
                "sds_seconds_per_iter": curves.sds_seconds_per_iter,
                "images": curves.images,
            }),
        );
    }

    if let Some(p) = &d.transfer_checkpoint {
        let b = load_checkpoint(p)?;
        let mut rows = serde_json::Map::new();
        for (m, imgs, _) in &protected {
            let s = transfer_probe(&subset.images, imgs, &model, &b, &edit, &fx, opts.jobs)?;
            rows.insert(m.name().into(), serde_json::to_value(s)?);
        }
        summary.insert("transfer".into(), rows.into());
    }

    if let Some(p) = &d.pixel_checkpoint {
        let px = load_pixel_checkpoint(p)?;
        let advdm = AttackEntry::new(Method::Advdm).config(cfg.seed)?;
        let rep = pixel_dm_attack_probe(&px, &subset.images, advdm.budget, advdm.iters, &edit, &fx, cfg.seed, opts.jobs)?;
        summary.insert("pixel_dm_probe".into(), serde_json::to_value(rep)?);
    }

    write_json_atomic(&dir.join("summary.json"), &summary)?;
    paths.push(dir.join("summary.json"));
    Ok(paths)
}

fn evaluate(cfg: &ExperimentConfig, _opts: &RunOptions) -> Result<Vec<PathBuf>> {
    let model = load_model(cfg)?;
    let subset = protected_subset(cfg)?;
    let protected = load_protected(cfg, &subset.ids)?;
    let fx = FeatureExtractor::new(&model);
    let root = cfg.output_dir.join(Stage::Edit.dir());
    let sd: Vec<&EditRequest> = cfg.edits.iter().filter(|e| e.kind == EditKind::Sdedit).collect();
    let mut reference_edits = Vec::new();
    for e in &sd {
        reference_edits.push(load_images(&root.join(edit_label(e)).join("reference"), &subset.ids)?);
    }
    let mut runs = vec![(CLEAN.to_string(), subset.images.clone(), vec![0.0; subset.images.len()])];
    runs.extend(protected.into_iter().map(|(m, i, s)| (m.name().to_string(), i, s)));
    let mut methods = Vec::new();
    for (name, images, secs) in runs {
        let mut edits = Vec::new();
        for e in &sd {
            edits.push(load_images(&root.join(edit_label(e)).join(&name), &subset.ids)?);
        }
        methods.push(MethodRun {
            name,
            protected: images,
            seconds_per_iter: secs,
            edits,
        });
    }
    let input = ReportInput {
        image_ids: subset.ids,
        originals: subset.images,
        strengths: sd.iter().map(|e| e.strength.unwrap_or(0.0)).collect(),
        reference_edits,
        methods,
    };
    let rep = build_report(&input, &cfg.metrics, &fx, cfg.min_samples)?;
    let dir = cfg.output_dir.join(Stage::Evaluate.dir());
    let mut paths = rep.save(&dir)?;
    let full = dir.join("report.json");
    rep.write_json(&full)?;
    paths.push(full);
    Ok(paths)
}

fn report(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let src = cfg.output_dir.join(Stage::Evaluate.dir()).join("report.json");
    if !src.exists() {
        return Err(Error::MissingArtifact(src));
    }
    let rep: crate::eval::report::MetricsReport = serde_json::from_slice(&fs::read(&src)?)?;
    let md = render_markdown(&rep);
    let dir = cfg.output_dir.join(Stage::Report.dir());
    let p = dir.join("report.md");
    write_atomic(&p, md.as_bytes())?;
    Ok(vec![p])
}

/// Method-by-metric tables, one per edit strength, plus the perturbation
/// quality table.
pub fn render_markdown(rep: &crate::eval::report::MetricsReport) -> String {
    let mut methods: Vec<&str> = Vec::new();
    let mut strengths: Vec<f64> = Vec::new();
    let mut metrics: Vec<&str> = Vec::new();
    for a in &rep.aggregates {
        if !methods.contains(&a.method.as_str()) {
            methods.push(&a.method);
        }
        if let Some(s) = a.strength {
            if !strengths.contains(&s) {
                strengths.push(s);
            }
            if !metrics.contains(&a.metric.as_str()) {
                metrics.push(&a.metric);
            }
        }
    }
    let analog = |m: &str| {
        rep.aggregates
            .iter()
            .any(|a| a.metric == m && a.feature_analog)
    };
    let cell = |m: &str, metric: &str, s: Option<f64>| {
        rep.aggregate(m, metric, s)
            .and_then(|a| a.mean)
            .map_or("missing".to_string(), |v| format!("{v:.4}"))
    };
    let mut out = String::from("# Protection report\n\n");
    out.push_str("Columns marked * are feature-based analogs on toy-encoder features, not LPIPS, FID or CLIP scores.\n");
    for &s in &strengths {
        out.push_str(&format!("\n## Edits at strength {s}\n\n| method |"));
        for m in &metrics {
            out.push_str(&format!(" {m}{} |", if analog(m) { "*" } else { "" }));
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(metrics.len()));
        out.push('\n');
        for meth in &methods {
            out.push_str(&format!("| {meth} |"));
            for m in &metrics {
                out.push_str(&format!(" {} |", cell(meth, m, Some(s))));
            }
            out.push('\n');
        }
    }
    let q = ["perturbation_ssim", "perturbation_psnr", "perturbation_feature_distance", "seconds_per_iter"];
    out.push_str("\n## Perturbation quality\n\n| method | ssim | psnr | feature_distance* | seconds/iter |\n|---|---|---|---|---|\n");
    for meth in &methods {
        out.push_str(&format!("| {meth} |"));
        for m in q {
            out.push_str(&format!(" {} |", cell(meth, m, None)));
        }
        out.push('\n');
    }
    if !rep.missing.is_empty() {
        out.push_str(&format!("\n{} missing cells; see summary.json.\n", rep.missing.len()));
    }
    out
}

/// Machine-readable error document written to stderr by the binary.
pub fn error_json(e: &Error) -> String {
    serde_json::json!({
        "error": {
            "kind": e.kind(),
            "message": e.to_string(),
        }
    })
    .to_string()
}
