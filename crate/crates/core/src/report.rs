//! Metric aggregation over a validation set, method ranking and report emission.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::artifact::load_image;
use crate::dataset::{build_category_mask_resized, Dataset};
use crate::error::{MetricError, ReportError};
use crate::explain::{explain_gradcam, explain_rise, ExplainResult, RiseConfig, RiseMode};
use crate::imaging::{resize_bilinear, BinaryMask, ImageTensor};
use crate::metrics::{faithfulness_curves, plausibility_metrics, FaithfulnessConfig};
use crate::model::{Concurrency, ScoreRegion, SegmentationModel};

/// Saliency method under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum XaiMethod {
    #[serde(rename = "RISE")]
    Rise,
    #[serde(rename = "GradCAM")]
    GradCam,
}

impl XaiMethod {
    pub fn name(self) -> &'static str {
        match self {
            XaiMethod::Rise => "RISE",
            XaiMethod::GradCam => "GradCAM",
        }
    }

    pub fn parse(name: &str) -> Result<Self, ReportError> {
        match name.to_ascii_lowercase().as_str() {
            "rise" => Ok(XaiMethod::Rise),
            "gradcam" | "grad-cam" => Ok(XaiMethod::GradCam),
            _ => Err(ReportError::UnknownMethod(name.to_string())),
        }
    }
}

/// RISE settings shared by every sample; the output size comes from each image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiseSettings {
    pub n_masks: usize,
    pub grid: usize,
    pub keep_prob: f64,
    pub mode: RiseMode,
    pub region: ScoreRegion,
}

impl Default for RiseSettings {
    fn default() -> Self {
        Self { n_masks: 4000, grid: 7, keep_prob: 0.5, mode: RiseMode::MonteCarlo, region: ScoreRegion::FrozenArgmax }
    }
}

impl RiseSettings {
    pub fn config(&self, height: usize, width: usize, seed: u64) -> RiseConfig {
        RiseConfig {
            n_masks: self.n_masks,
            grid: self.grid,
            keep_prob: self.keep_prob,
            height,
            width,
            seed,
            mode: self.mode,
            region: self.region,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalConfig {
    pub rise: RiseSettings,
    pub faithfulness: FaithfulnessConfig,
    pub seed: u64,
}

/// Seed for one `(image, category)` explanation.
pub fn sample_seed(seed: u64, image_id: u64, category_id: u64) -> u64 {
    seed ^ image_id.rotate_left(32) ^ category_id.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Loads a dataset image as a unit-range tensor sized for the model input.
pub fn load_model_input(ds: &Dataset, model: &dyn SegmentationModel, image_id: u64) -> Result<ImageTensor, ReportError> {
    let img = load_image(&ds.image_path(image_id)?)?;
    let input = model.descriptor().input;
    let h = input.height.unwrap_or(img.height());
    let w = input.width.unwrap_or(img.width());
    if (h, w) == (img.height(), img.width()) {
        return Ok(img);
    }
    Ok(resize_bilinear(&img, h, w).map_err(MetricError::from)?)
}

pub fn explain_sample(
    method: XaiMethod,
    model: &dyn SegmentationModel,
    img: &ImageTensor,
    category: u64,
    rise: &RiseSettings,
    seed: u64,
) -> Result<ExplainResult, ReportError> {
    Ok(match method {
        XaiMethod::Rise => explain_rise(model, img, category, &rise.config(img.height(), img.width(), seed))?,
        XaiMethod::GradCam => explain_gradcam(model, img, category)?,
    })
}

/// Scores of one `(image, category)` pair. Plausibility values are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub image_id: u64,
    pub category_id: u64,
    pub ebpg: f64,
    pub bbox: f64,
    pub iou: f64,
    pub del: f64,
    pub ins: f64,
}

/// Per-method means. Plausibility in percent, faithfulness as AUC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub name: String,
    pub ebpg: Option<f64>,
    pub bbox: Option<f64>,
    pub iou: Option<f64>,
    pub del: Option<f64>,
    pub ins: Option<f64>,
}

impl MethodScores {
    pub fn new(name: impl Into<String>, ebpg: f64, bbox: f64, iou: f64, del: f64, ins: f64) -> Self {
        Self { name: name.into(), ebpg: Some(ebpg), bbox: Some(bbox), iou: Some(iou), del: Some(del), ins: Some(ins) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub scores: MethodScores,
    pub rows: Vec<SampleRow>,
    /// Pairs skipped because the saliency map carried no energy.
    pub skipped: usize,
}

/// Scores one saliency map against its ground truth and the model.
pub fn score_sample(
    model: &dyn SegmentationModel,
    img: &ImageTensor,
    gt: &BinaryMask,
    explanation: &ExplainResult,
    faithfulness: &FaithfulnessConfig,
    image_id: u64,
) -> Result<SampleRow, ReportError> {
    let sal = &explanation.saliency;
    let p = plausibility_metrics(sal, gt)?;
    let (del, ins) = faithfulness_curves(model, img, sal, sal.category, faithfulness)?;
    Ok(SampleRow {
        image_id,
        category_id: sal.category,
        ebpg: 100.0 * p.ebpg,
        bbox: 100.0 * p.bbox,
        iou: 100.0 * p.iou,
        del: del.auc,
        ins: ins.auc,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Arithmetic mean of `rows`.
pub fn aggregate_rows(name: &str, rows: &[SampleRow]) -> MethodScores {
    MethodScores::new(
        name,
        mean(rows.iter().map(|r| r.ebpg)),
        mean(rows.iter().map(|r| r.bbox)),
        mean(rows.iter().map(|r| r.iou)),
        mean(rows.iter().map(|r| r.del)),
        mean(rows.iter().map(|r| r.ins)),
    )
}

/// Explains and scores every `(image, category)` pair with a nonempty ground
/// truth, then averages. Pairs are processed in parallel when the model allows it;
/// results keep dataset order.
pub fn evaluate_method_over_set(
    method: XaiMethod,
    model: &dyn SegmentationModel,
    ds_val: &Dataset,
    cfg: &EvalConfig,
) -> Result<MethodAggregate, ReportError> {
    if ds_val.images().is_empty() {
        return Err(ReportError::EmptySet);
    }
    let mut image_ids: Vec<u64> = ds_val.images().iter().map(|i| i.id).collect();
    image_ids.sort_unstable();
    let categories: Vec<u64> = ds_val.labeled_categories().map(|c| c.id).collect();

    let per_image = |image_id: u64| -> Result<Vec<Option<SampleRow>>, ReportError> {
        let img = load_model_input(ds_val, model, image_id)?;
        let mut out = Vec::new();
        for &category in &categories {
            let gt = build_category_mask_resized(ds_val, image_id, category, img.height(), img.width())?;
            if gt.is_empty() {
                continue;
            }
            let seed = sample_seed(cfg.seed, image_id, category);
            let explanation = explain_sample(method, model, &img, category, &cfg.rise, seed)?;
            match score_sample(model, &img, &gt, &explanation, &cfg.faithfulness, image_id) {
                Ok(row) => out.push(Some(row)),
                Err(ReportError::Metric(MetricError::ZeroEnergy)) => out.push(None),
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    };
    let results: Vec<Vec<Option<SampleRow>>> = match model.concurrency() {
        Concurrency::ConcurrentSafe => image_ids.par_iter().map(|id| per_image(*id)).collect::<Result<_, _>>()?,
        Concurrency::Exclusive => image_ids.iter().map(|id| per_image(*id)).collect::<Result<_, _>>()?,
    };
    let flat: Vec<Option<SampleRow>> = results.into_iter().flatten().collect();
    let skipped = flat.iter().filter(|r| r.is_none()).count();
    let rows: Vec<SampleRow> = flat.into_iter().flatten().collect();
    if rows.is_empty() {
        return Err(ReportError::AllSkipped);
    }
    Ok(MethodAggregate { scores: aggregate_rows(method.name(), &rows), rows, skipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub name: String,
    pub wins: usize,
    /// Metrics in which this method is strictly best.
    pub best_in: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub advisable: String,
    /// Best first.
    pub table: Vec<RankEntry>,
}

const METRICS: [(&str, bool); 5] = [("ebpg", true), ("bbox", true), ("iou", true), ("del", false), ("ins", true)];

fn column(row: &MethodScores, metric: &'static str) -> Result<f64, ReportError> {
    let v = match metric {
        "ebpg" => row.ebpg,
        "bbox" => row.bbox,
        "iou" => row.iou,
        "del" => row.del,
        _ => row.ins,
    };
    v.filter(|v| v.is_finite())
        .ok_or_else(|| ReportError::MissingMetric { method: row.name.clone(), metric })
}

/// Counts, per method, the metrics in which it is strictly best. Most wins is
/// advisable; ties go to lower Del, then higher Ins, then name.
pub fn rank_methods(rows: &[MethodScores]) -> Result<Ranking, ReportError> {
    if rows.is_empty() {
        return Err(ReportError::NoMethods);
    }
    let mut best_in: BTreeMap<&str, Vec<String>> = rows.iter().map(|r| (r.name.as_str(), Vec::new())).collect();
    for (metric, higher) in METRICS {
        let values: Vec<f64> = rows.iter().map(|r| column(r, metric)).collect::<Result<_, _>>()?;
        let best = values.iter().copied().fold(if higher { f64::MIN } else { f64::MAX }, |a, b| {
            if higher { a.max(b) } else { a.min(b) }
        });
        let holders: Vec<usize> = (0..rows.len()).filter(|i| values[*i] == best).collect();
        if let [only] = holders[..] {
            best_in.get_mut(rows[only].name.as_str()).expect("row present").push(metric.to_string());
        }
    }
    let mut order: Vec<&MethodScores> = rows.iter().collect();
    let wins = |r: &MethodScores| best_in[r.name.as_str()].len();
    order.sort_by(|a, b| {
        wins(b)
            .cmp(&wins(a))
            .then_with(|| a.del.partial_cmp(&b.del).unwrap_or(Ordering::Equal))
            .then_with(|| b.ins.partial_cmp(&a.ins).unwrap_or(Ordering::Equal))
            .then_with(|| a.name.cmp(&b.name))
    });
    let table: Vec<RankEntry> = order
        .iter()
        .map(|r| RankEntry { name: r.name.clone(), wins: wins(r), best_in: best_in[r.name.as_str()].clone() })
        .collect();
    Ok(Ranking { advisable: table[0].name.clone(), table })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub methods: Vec<MethodScores>,
    #[serde(default)]
    pub advisable: String,
    #[serde(default)]
    pub dataset_digest: String,
    #[serde(default)]
    pub created_at: String,
    #[serde(default)]
    pub samples: BTreeMap<String, Vec<SampleRow>>,
}

/// RFC 3339 timestamp from `SOURCE_DATE_EPOCH` when set, otherwise the clock.
pub fn report_timestamp() -> String {
    let secs = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.trim().parse::<i64>().ok())
        .unwrap_or_else(|| chrono::Utc::now().timestamp());
    chrono::DateTime::from_timestamp(secs, 0)
        .unwrap_or_default()
        .to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

impl MetricReport {
    pub fn build(aggregates: &[MethodAggregate], dataset_digest: impl Into<String>) -> Result<Self, ReportError> {
        let methods: Vec<MethodScores> = aggregates.iter().map(|a| a.scores.clone()).collect();
        let ranking = rank_methods(&methods)?;
        Ok(Self {
            methods,
            advisable: ranking.advisable,
            dataset_digest: dataset_digest.into(),
            created_at: report_timestamp(),
            samples: aggregates.iter().map(|a| (a.scores.name.clone(), a.rows.clone())).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Markdown,
}

fn fixed(v: Option<f64>, places: usize) -> Box<RawValue> {
    let text = match v {
        Some(v) if v.is_finite() => format!("{:.*}", places, if v == 0.0 { 0.0 } else { v }),
        _ => "null".to_string(),
    };
    RawValue::from_string(text).expect("formatted number is valid JSON")
}

#[derive(Serialize)]
struct MethodOut<'a> {
    name: &'a str,
    ebpg: Box<RawValue>,
    bbox: Box<RawValue>,
    iou: Box<RawValue>,
    del: Box<RawValue>,
    ins: Box<RawValue>,
}

#[derive(Serialize)]
struct RowOut {
    image_id: u64,
    category_id: u64,
    ebpg: Box<RawValue>,
    bbox: Box<RawValue>,
    iou: Box<RawValue>,
    del: Box<RawValue>,
    ins: Box<RawValue>,
}

#[derive(Serialize)]
struct ReportOut<'a> {
    methods: Vec<MethodOut<'a>>,
    advisable: &'a str,
    dataset_digest: &'a str,
    created_at: &'a str,
    samples: BTreeMap<&'a str, Vec<RowOut>>,
}

fn sorted_methods(report: &MetricReport) -> Vec<&MethodScores> {
    let mut methods: Vec<&MethodScores> = report.methods.iter().collect();
    methods.sort_by(|a, b| a.name.cmp(&b.name));
    methods
}

/// Deterministic rendering: methods sorted by name, percentages with 2 decimals,
/// AUC values with 3.
pub fn emit_report(report: &MetricReport, format: ReportFormat) -> String {
    let methods = sorted_methods(report);
    match format {
        ReportFormat::Json => {
            let out = ReportOut {
                methods: methods
                    .iter()
                    .map(|m| MethodOut {
                        name: &m.name,
                        ebpg: fixed(m.ebpg, 2),
                        bbox: fixed(m.bbox, 2),
                        iou: fixed(m.iou, 2),
                        del: fixed(m.del, 3),
                        ins: fixed(m.ins, 3),
                    })
                    .collect(),
                advisable: &report.advisable,
                dataset_digest: &report.dataset_digest,
                created_at: &report.created_at,
                samples: report
                    .samples
                    .iter()
                    .map(|(k, rows)| {
                        let rows = rows
                            .iter()
                            .map(|r| RowOut {
                                image_id: r.image_id,
                                category_id: r.category_id,
                                ebpg: fixed(Some(r.ebpg), 2),
                                bbox: fixed(Some(r.bbox), 2),
                                iou: fixed(Some(r.iou), 2),
                                del: fixed(Some(r.del), 3),
                                ins: fixed(Some(r.ins), 3),
                            })
                            .collect();
                        (k.as_str(), rows)
                    })
                    .collect(),
            };
            let mut text = serde_json::to_string_pretty(&out).expect("report serializes");
            text.push('\n');
            text
        }
        ReportFormat::Markdown => {
            let cell = |v: Option<f64>, places: usize| match v {
                Some(v) => format!("{:.*}", places, v),
                None => "-".to_string(),
            };
            let mut text = String::from("| Method | EBPG↑ | BBox↑ | IoU↑ | Del↓ | Ins↑ |\n");
            text.push_str("|---|---:|---:|---:|---:|---:|\n");
            for m in methods {
                text.push_str(&format!(
                    "| {} | {} | {} | {} | {} | {} |\n",
                    m.name,
                    cell(m.ebpg, 2),
                    cell(m.bbox, 2),
                    cell(m.iou, 2),
                    cell(m.del, 3),
                    cell(m.ins, 3)
                ));
            }
            text.push_str(&format!("\nAdvisable method: **{}**\n\n", report.advisable));
            text.push_str(&format!("Dataset digest: `{}`\n", report.dataset_digest));
            text
        }
    }
}

pub fn parse_report(text: &str) -> Result<MetricReport, ReportError> {
    Ok(serde_json::from_str(text)?)
}
