//! Per-image metric tables and their aggregates, serialized as CSV with a
//! fixed column order plus a JSON summary.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{feature_distance, frechet_feature_distance, ia_score, psnr, ssim, FeatureExtractor, MIN_FRECHET_SET};
use super::{par_map, EditProtocol};
use crate::data::{write_atomic, write_json_atomic};
use crate::error::Result;
use crate::models::LatentModel;
use crate::tensor::Tensor;

pub const FEATURE_ANALOG_NOTE: &str =
    "feature-based analog: computed on toy-encoder features, not comparable to LPIPS, FID or CLIP scores";

pub const METRICS_HEADER: &str = "image_id,method,metric,strength,value";
pub const QUALITY_HEADER: &str = "image_id,method,ssim,psnr,feature_distance,seconds_per_iter";
pub const CLEAN: &str = "clean";

/// Per-image comparison of an edited protected image with the reference
/// edit of its clean original.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMetric {
    IaScore,
    FeatureDistance,
    Psnr,
    Ssim,
}

impl EditMetric {
    pub const ALL: [EditMetric; 4] = [EditMetric::IaScore, EditMetric::FeatureDistance, EditMetric::Psnr, EditMetric::Ssim];

    pub fn name(self) -> &'static str {
        match self {
            EditMetric::IaScore => "ia_score",
            EditMetric::FeatureDistance => "feature_distance",
            EditMetric::Psnr => "psnr",
            EditMetric::Ssim => "ssim",
        }
    }

    pub fn is_feature_analog(self) -> bool {
        matches!(self, EditMetric::IaScore | EditMetric::FeatureDistance)
    }

    fn eval(self, a: &Tensor, b: &Tensor, fx: &FeatureExtractor) -> Result<f64> {
        match self {
            EditMetric::IaScore => ia_score(a, b, fx),
            EditMetric::FeatureDistance => feature_distance(a, b, fx),
            EditMetric::Psnr => psnr(a, b),
            EditMetric::Ssim => ssim(a, b),
        }
    }
}

/// One protection method's outputs. `edits[s][i]` is the probe-seed edit of
/// protected image `i` at strength index `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodRun {
    pub name: String,
    pub protected: Vec<Tensor>,
    pub seconds_per_iter: Vec<f64>,
    pub edits: Vec<Vec<Tensor>>,
}

/// Everything a report is computed from. `reference_edits[s][i]` is the
/// reference-seed edit of clean image `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportInput {
    pub image_ids: Vec<String>,
    pub originals: Vec<Tensor>,
    pub strengths: Vec<f64>,
    pub reference_edits: Vec<Vec<Tensor>>,
    pub methods: Vec<MethodRun>,
}

impl ReportInput {
    /// Runs every edit. A `clean` run (the unprotected originals edited with
    /// the probe seed) is prepended so reports always carry the baseline row.
    pub fn assemble(
        image_ids: Vec<String>,
        originals: Vec<Tensor>,
        protected: Vec<(String, Vec<Tensor>, Vec<f64>)>,
        model: &dyn LatentModel,
        protocols: &[EditProtocol],
        jobs: usize,
    ) -> Result<Self> {
        let edit_all = |images: &[Tensor], p: &EditProtocol, reference: bool| {
            par_map(images.len(), jobs, |i| {
                if reference {
                    p.reference(&images[i], model, i)
                } else {
                    p.probe(&images[i], model, i)
                }
            })
        };
        let mut reference_edits = Vec::new();
        for p in protocols {
            reference_edits.push(edit_all(&originals, p, true)?);
        }
        let mut runs = vec![(CLEAN.to_string(), originals.clone(), vec![0.0; originals.len()])];
        runs.extend(protected);
        let mut methods = Vec::new();
        for (name, images, secs) in runs {
            let mut edits = Vec::new();
            for p in protocols {
                edits.push(edit_all(&images, p, false)?);
            }
            methods.push(MethodRun {
                name,
                protected: images,
                seconds_per_iter: secs,
                edits,
            });
        }
        Ok(Self {
            image_ids,
            originals,
            strengths: protocols.iter().map(|p| p.strength).collect(),
            reference_edits,
            methods,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub image_id: String,
    pub method: String,
    pub metric: EditMetric,
    pub strength: f64,
    /// `None` marks a missing cell.
    pub value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityRow {
    pub image_id: String,
    pub method: String,
    pub ssim: f64,
    pub psnr: f64,
    pub feature_distance: f64,
    pub seconds_per_iter: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub metric: String,
    pub strength: Option<f64>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub count: usize,
    pub missing: usize,
    pub sufficient: bool,
    pub feature_analog: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
    pub quality: Vec<QualityRow>,
    pub aggregates: Vec<Aggregate>,
    pub min_samples: usize,
    pub missing: Vec<String>,
}

fn mean_std(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = if v.len() > 1 {
        Some((v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
    } else {
        None
    };
    (Some(m), s)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Computes every per-image edit metric for every method and strength, the
/// perturbation-quality table, per-cell aggregates and the set-level
/// Frechet analog. Missing inputs become empty cells listed in `missing`.
pub fn build_report(input: &ReportInput, metrics: &[EditMetric], fx: &FeatureExtractor, min_samples: usize) -> Result<MetricsReport> {
    let n = input.image_ids.len();
    let mut rows = Vec::with_capacity(n * input.methods.len() * metrics.len() * input.strengths.len());
    let mut quality = Vec::new();
    let mut aggregates = Vec::new();
    let mut missing = Vec::new();

    for run in &input.methods {
        for (i, id) in input.image_ids.iter().enumerate() {
            match (run.protected.get(i), input.originals.get(i)) {
                (Some(p), Some(x)) => quality.push(QualityRow {
                    image_id: id.clone(),
                    method: run.name.clone(),
                    ssim: ssim(p, x)?,
                    psnr: psnr(p, x)?,
                    feature_distance: feature_distance(p, x, fx)?,
                    seconds_per_iter: run.seconds_per_iter.get(i).copied(),
                }),
                _ => missing.push(format!("{}/{id}: protected image", run.name)),
            }
        }
    }

    for run in &input.methods {
        for (s, &strength) in input.strengths.iter().enumerate() {
            let edits = run.edits.get(s);
            let refs = input.reference_edits.get(s);
            let mut cell: Vec<Vec<f64>> = vec![Vec::new(); metrics.len()];
            let mut cell_missing = vec![0usize; metrics.len()];
            for (i, id) in input.image_ids.iter().enumerate() {
                let pair = edits.and_then(|e| e.get(i)).zip(refs.and_then(|r| r.get(i)));
                for (k, &m) in metrics.iter().enumerate() {
                    let value = match pair {
                        Some((e, r)) => Some(m.eval(e, r, fx)?),
                        None => None,
                    };
                    match value {
                        Some(v) => cell[k].push(v),
                        None => {
                            cell_missing[k] += 1;
                            missing.push(format!("{}/{id}/{}/{strength}", run.name, m.name()));
                        }
                    }
                    rows.push(MetricRow {
                        image_id: id.clone(),
                        method: run.name.clone(),
                        metric: m,
                        strength,
                        value,
                    });
                }
            }
            for (k, &m) in metrics.iter().enumerate() {
                let (mean, std) = mean_std(&cell[k]);
                aggregates.push(Aggregate {
                    method: run.name.clone(),
                    metric: m.name().into(),
                    strength: Some(strength),
                    mean,
                    std,
                    count: cell[k].len(),
                    missing: cell_missing[k],
                    sufficient: cell[k].len() >= min_samples,
                    feature_analog: m.is_feature_analog(),
                });
            }
            let frechet = match (edits, refs) {
                (Some(e), Some(r)) if e.len() >= MIN_FRECHET_SET && r.len() >= MIN_FRECHET_SET => {
                    Some(frechet_feature_distance(e, r, fx)?)
                }
                _ => {
                    missing.push(format!("{}/frechet_distance/{strength}", run.name));
                    None
                }
            };
            aggregates.push(Aggregate {
                method: run.name.clone(),
                metric: "frechet_distance".into(),
                strength: Some(strength),
                mean: frechet,
                std: None,
                count: edits.map_or(0, |e| e.len()),
                missing: usize::from(frechet.is_none()),
                sufficient: frechet.is_some(),
                feature_analog: true,
            });
        }
    }

    for run in &input.methods {
        let q: Vec<&QualityRow> = quality.iter().filter(|r| r.method == run.name).collect();
        let cols: [(&str, bool, Vec<f64>); 4] = [
            ("perturbation_ssim", false, q.iter().map(|r| r.ssim).collect()),
            ("perturbation_psnr", false, q.iter().map(|r| r.psnr).collect()),
            ("perturbation_feature_distance", true, q.iter().map(|r| r.feature_distance).collect()),
            ("seconds_per_iter", false, q.iter().filter_map(|r| r.seconds_per_iter).collect()),
        ];
        for (name, analog, v) in cols {
            let (mean, std) = mean_std(&v);
            aggregates.push(Aggregate {
                method: run.name.clone(),
                metric: name.into(),
                strength: None,
                mean,
                std,
                count: v.len(),
                missing: n - v.len(),
                sufficient: v.len() >= min_samples,
                feature_analog: analog,
            });
        }
    }

    Ok(MetricsReport {
        rows,
        quality,
        aggregates,
        min_samples,
        missing,
    })
}

#[derive(Serialize)]
struct Summary<'a> {
    notes: Notes,
    min_samples: usize,
    aggregates: &'a [Aggregate],
    missing: &'a [String],
}

#[derive(Serialize)]
struct Notes {
    feature_analog: &'static str,
    feature_analog_metrics: [&'static str; 4],
}

impl MetricsReport {
    pub fn empty(min_samples: usize) -> Self {
        Self {
            rows: Vec::new(),
            quality: Vec::new(),
            aggregates: Vec::new(),
            min_samples,
            missing: Vec::new(),
        }
    }

    pub fn aggregate(&self, method: &str, metric: &str, strength: Option<f64>) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.method == method && a.metric == metric && a.strength == strength)
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.image_id, r.method, r.metric.name(), r.strength, fmt_opt(r.value));
        }
        s
    }

    pub fn quality_csv(&self) -> String {
        let mut s = format!("{QUALITY_HEADER}\n");
        for r in &self.quality {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.image_id,
                r.method,
                r.ssim,
                r.psnr,
                r.feature_distance,
                fmt_opt(r.seconds_per_iter)
            );
        }
        s
    }

    pub fn aggregates_csv(&self) -> String {
        let mut s = String::from("method,metric,strength,mean,std,count,missing,sufficient,note\n");
        for a in &self.aggregates {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                a.method,
                a.metric,
                fmt_opt(a.strength),
                fmt_opt(a.mean),
                fmt_opt(a.std),
                a.count,
                a.missing,
                a.sufficient,
                if a.feature_analog { "feature-based analog" } else { "" }
            );
        }
        s
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Summary {
            notes: Notes {
                feature_analog: FEATURE_ANALOG_NOTE,
                feature_analog_metrics: ["ia_score", "feature_distance", "frechet_distance", "perturbation_feature_distance"],
            },
            min_samples: self.min_samples,
            aggregates: &self.aggregates,
            missing: &self.missing,
        })?)
    }

    /// Writes `metrics.csv`, `quality.csv`, `aggregates.csv` and
    /// `summary.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let files = [
            ("metrics.csv", self.metrics_csv()),
            ("quality.csv", self.quality_csv()),
            ("aggregates.csv", self.aggregates_csv()),
            ("summary.json", self.summary_json()?),
        ];
        let mut out = Vec::new();
        for (name, body) in files {
            let p = dir.join(name);
            write_atomic(&p, body.as_bytes())?;
            out.push(p);
        }
        Ok(out)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json_atomic(path, self)
    }
}
