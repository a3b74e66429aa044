//! Metrics, evaluation scenarios and the fusion-token probe.

mod metrics;
mod probe;

pub use metrics::{
    coco_ap, coco_iou_thresholds, greedy_match, image_jaccard, jaccard_index, log_average_miss_rate,
    max_matching, mr_reference_points, MatchState, MAX_DETS, MR_FLOOR, MR_REFERENCE_POINTS,
};
pub use probe::{
    assign_combinations, combination_label, extract_probe_features, fit_probe, pca_2d, probe_report, token_probe,
    write_embedding_csv, EmbeddingRow, LinearProbe, ProbeConfig, ProbeFeatures, ProbeReport,
};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{restrict_to, Dataset};
use crate::error::{Error, Result};
use crate::model::Detector;
use crate::modality::Modality;
use crate::types::{Annotation, BoundingBox, Detection, DetectionSet, MultiModalSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// Only the given modality is fed; the rest are masked.
    Unimodal(Modality),
    /// Every available modality is fed.
    Multimodal,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scenario::Unimodal(m) => write!(f, "unimodal:{m}"),
            Scenario::Multimodal => f.write_str("multimodal"),
        }
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "multimodal" => Ok(Scenario::Multimodal),
            Some(("unimodal", m)) => Ok(Scenario::Unimodal(m.parse()?)),
            _ => Err(Error::config(format!(
                "unknown scenario `{s}` (expected multimodal or unimodal:<modality>)"
            ))),
        }
    }
}

/// The input a sample contributes to `scenario`, or `None` when the
/// requested modality is not valid in it.
pub fn apply_scenario(sample: &MultiModalSample, scenario: Scenario) -> Result<Option<MultiModalSample>> {
    match scenario {
        Scenario::Multimodal => Ok(Some(sample.clone())),
        Scenario::Unimodal(m) if sample.is_valid(m) => Ok(Some(restrict_to(sample, &[m])?)),
        Scenario::Unimodal(_) => Ok(None),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Detections scoring below this are dropped before the Jaccard index.
    pub ji_score_threshold: f64,
    pub ji_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ji_score_threshold: 0.3,
            ji_iou: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ap: f64,
    pub ap50: f64,
    /// `None` when the split has no ground-truth box.
    pub mr2: Option<f64>,
    pub ji: f64,
    pub images: usize,
}

impl Metrics {
    pub fn compute(dets: &[DetectionSet], gts: &[Vec<Annotation>], cfg: &EvalConfig) -> Result<Self> {
        let (ap, ap50) = coco_ap(dets, gts)?;
        let mr2 = match log_average_miss_rate(dets, gts) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        let kept: Vec<DetectionSet> = dets
            .iter()
            .map(|d| d.iter().copied().filter(|d| d.score >= cfg.ji_score_threshold).collect())
            .collect();
        let ji = jaccard_index(&kept, gts, cfg.ji_iou)?;
        Ok(Self {
            ap,
            ap50,
            mr2,
            ji,
            images: dets.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scenario: String,
    #[serde(flatten)]
    pub overall: Metrics,
    pub per_dataset: BTreeMap<String, Metrics>,
}

/// Detections and ground truth of one dataset under a scenario.
pub fn run_scenario(
    detector: &dyn Detector,
    dataset: &Dataset,
    scenario: Scenario,
) -> Result<(Vec<String>, Vec<DetectionSet>, Vec<Vec<Annotation>>)> {
    if let Scenario::Unimodal(m) = scenario {
        if !detector.vocabulary().contains(m) {
            return Err(Error::config(format!("model vocabulary lacks modality `{m}`")));
        }
    }
    let mut ids = Vec::new();
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for s in &dataset.samples {
        if let Some(input) = apply_scenario(s, scenario)? {
            dets.push(detector.detect(&input)?);
            gts.push(s.annotations.clone());
            ids.push(s.sample_id.clone());
        }
    }
    Ok((ids, dets, gts))
}

/// Metrics per dataset and pooled over all of them.
pub fn evaluate_scenario(
    detector: &dyn Detector,
    datasets: &[Dataset],
    scenario: Scenario,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    if let Scenario::Unimodal(m) = scenario {
        let present = datasets.iter().any(|d| d.samples.iter().any(|s| s.is_valid(m)));
        if !present {
            return Err(Error::config(format!(
                "scenario {scenario}: no sample carries modality `{m}`"
            )));
        }
    }
    let mut all_dets = Vec::new();
    let mut all_gts = Vec::new();
    let mut per_dataset = BTreeMap::new();
    for d in datasets {
        let (_, dets, gts) = run_scenario(detector, d, scenario)?;
        if !dets.is_empty() {
            per_dataset.insert(d.name.clone(), Metrics::compute(&dets, &gts, cfg)?);
        }
        all_dets.extend(dets);
        all_gts.extend(gts);
    }
    Ok(MetricReport {
        scenario: scenario.to_string(),
        overall: Metrics::compute(&all_dets, &all_gts, cfg)?,
        per_dataset,
    })
}

/// One detection in COCO results format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoResult {
    pub image_id: u64,
    pub category_id: u32,
    /// `[x, y, width, height]`.
    pub bbox: [f64; 4],
    pub score: f64,
}

/// Flattens per-image detections; image `i` gets id `i + 1`.
pub fn to_coco_results(dets: &[DetectionSet]) -> Vec<CocoResult> {
    dets.iter()
        .enumerate()
        .flat_map(|(i, ds)| {
            ds.iter().map(move |d| CocoResult {
                image_id: i as u64 + 1,
                category_id: d.category,
                bbox: [d.bbox.x_min, d.bbox.y_min, d.bbox.width(), d.bbox.height()],
                score: d.score,
            })
        })
        .collect()
}

/// Groups COCO results back into `num_images` per-image sets.
pub fn from_coco_results(results: &[CocoResult], num_images: usize) -> Result<Vec<DetectionSet>> {
    let mut out = vec![Vec::new(); num_images];
    for r in results {
        let slot = r
            .image_id
            .checked_sub(1)
            .and_then(|i| out.get_mut(i as usize))
            .ok_or_else(|| Error::config(format!("result references unknown image {}", r.image_id)))?;
        let [x, y, w, h] = r.bbox;
        slot.push(Detection {
            bbox: BoundingBox::from_xywh(x, y, w, h),
            score: r.score,
            category: r.category_id,
        });
    }
    Ok(out)
}
