//! COCO AP, log-average miss rate and Jaccard index.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::types::{Annotation, Detection, DetectionSet};

pub const MAX_DETS: usize = 100;
pub const MR_REFERENCE_POINTS: usize = 9;
pub const MR_FLOOR: f64 = 1e-10;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

/// Outcome of a detection after greedy matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchState {
    TruePositive,
    FalsePositive,
    /// Matched an ignore-flagged GT; counts as neither.
    Ignored,
}

/// COCO-style greedy matching of score-sorted `dets` to `gts` at `thr`.
///
/// Each detection takes the highest-IoU GT with IoU >= `thr`, preferring
/// non-ignored GTs; ignored GTs may absorb any number of detections.
pub fn greedy_match(dets: &[Detection], gts: &[Annotation], thr: f64) -> Vec<MatchState> {
    let mut order: Vec<usize> = (0..gts.len()).collect();
    order.sort_by_key(|&g| gts[g].is_ignore);
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best = thr.min(1.0 - 1e-10);
            let mut m: Option<usize> = None;
            for &g in &order {
                if taken[g] && !gts[g].is_ignore {
                    continue;
                }
                if m.is_some_and(|m| !gts[m].is_ignore) && gts[g].is_ignore {
                    break;
                }
                let iou = d.bbox.iou(&gts[g].bbox);
                if iou < best {
                    continue;
                }
                best = iou;
                m = Some(g);
            }
            match m {
                None => MatchState::FalsePositive,
                Some(g) => {
                    taken[g] = true;
                    if gts[g].is_ignore {
                        MatchState::Ignored
                    } else {
                        MatchState::TruePositive
                    }
                }
            }
        })
        .collect()
}

fn sorted_by_score(dets: impl Iterator<Item = Detection>) -> Vec<Detection> {
    let mut v: Vec<Detection> = dets.collect();
    v.sort_by(|a, b| b.score.total_cmp(&a.score));
    v
}

/// 101-point interpolated AP from score-ordered match states.
fn interpolated_ap(states: &[(f64, MatchState)], num_gt: usize) -> f64 {
    let mut order: Vec<usize> = (0..states.len()).collect();
    order.sort_by(|&a, &b| states[b].0.total_cmp(&states[a].0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    for i in order {
        match states[i].1 {
            MatchState::TruePositive => tp += 1,
            MatchState::FalsePositive => fp += 1,
            MatchState::Ignored => continue,
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let total: f64 = (0..=100)
        .map(|k| {
            let r = k as f64 / 100.0;
            let idx = recall.partition_point(|&x| x < r);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    total / 101.0
}

/// COCO AP over IoU 0.50:0.95 and AP at IoU 0.50.
///
/// `dets[i]` and `gts[i]` belong to image `i`. Per image and category the
/// top [`MAX_DETS`] detections by score are kept. Categories without a
/// non-ignored GT are skipped; with none at all both values are 0.
pub fn coco_ap(dets: &[DetectionSet], gts: &[Vec<Annotation>]) -> Result<(f64, f64)> {
    if dets.len() != gts.len() {
        return Err(Error::config(format!(
            "{} detection sets for {} images",
            dets.len(),
            gts.len()
        )));
    }
    let cats: BTreeSet<u32> = gts.iter().flatten().filter(|a| !a.is_ignore).map(|a| a.category).collect();
    if cats.is_empty() {
        return Ok((0.0, 0.0));
    }
    let thresholds = coco_iou_thresholds();
    let mut sum_all = 0.0;
    let mut sum_50 = 0.0;
    for &c in &cats {
        let num_gt = gts.iter().flatten().filter(|a| a.category == c && !a.is_ignore).count();
        let per_image: Vec<(Vec<Detection>, Vec<Annotation>)> = dets
            .iter()
            .zip(gts)
            .map(|(d, g)| {
                let mut d = sorted_by_score(d.iter().copied().filter(|d| d.category == c));
                d.truncate(MAX_DETS);
                (d, g.iter().filter(|a| a.category == c).cloned().collect())
            })
            .collect();
        for (ti, &t) in thresholds.iter().enumerate() {
            let mut states = Vec::new();
            for (d, g) in &per_image {
                let m = greedy_match(d, g, t);
                states.extend(d.iter().map(|d| d.score).zip(m));
            }
            let ap = interpolated_ap(&states, num_gt);
            sum_all += ap;
            if ti == 0 {
                sum_50 += ap;
            }
        }
    }
    let nc = cats.len() as f64;
    Ok((sum_all / (nc * thresholds.len() as f64), sum_50 / nc))
}

/// FPPI reference points `10^(-2 + k/4)`, k = 0..8.
pub fn mr_reference_points() -> [f64; MR_REFERENCE_POINTS] {
    std::array::from_fn(|k| 10f64.powf(-2.0 + 2.0 * k as f64 / 8.0))
}

/// Log-average miss rate over FPPI in `[1e-2, 1]` at IoU 0.5.
///
/// Operating points are score thresholds (plus the empty one). For each
/// reference FPPI the lowest threshold whose FPPI does not exceed it is
/// used. Miss rates are floored at [`MR_FLOOR`] before the log.
pub fn log_average_miss_rate(dets: &[DetectionSet], gts: &[Vec<Annotation>]) -> Result<f64> {
    if dets.len() != gts.len() {
        return Err(Error::config(format!(
            "{} detection sets for {} images",
            dets.len(),
            gts.len()
        )));
    }
    let num_gt = gts.iter().flatten().filter(|a| !a.is_ignore).count();
    if num_gt == 0 {
        return Err(Error::UndefinedMetric(
            "log-average miss rate needs at least one ground-truth box".into(),
        ));
    }
    let num_images = dets.len() as f64;
    let mut states: Vec<(f64, MatchState)> = Vec::new();
    for (d, g) in dets.iter().zip(gts) {
        let d = sorted_by_score(d.iter().copied());
        let m = greedy_match(&d, g, 0.5);
        states.extend(d.iter().map(|d| d.score).zip(m));
    }
    states.retain(|s| s.1 != MatchState::Ignored);
    states.sort_by(|a, b| b.0.total_cmp(&a.0));

    // (fppi, miss rate) after admitting every detection down to a threshold.
    let mut points = vec![(0.0, 1.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &(score, st)) in states.iter().enumerate() {
        match st {
            MatchState::TruePositive => tp += 1,
            _ => fp += 1,
        }
        let last_of_tie = states.get(i + 1).map_or(true, |n| n.0 != score);
        if last_of_tie {
            points.push((fp as f64 / num_images, 1.0 - tp as f64 / num_gt as f64));
        }
    }
    let log_sum: f64 = mr_reference_points()
        .iter()
        .map(|&r| {
            let mr = points
                .iter()
                .rev()
                .find(|p| p.0 <= r)
                .map_or(1.0, |p| p.1);
            mr.max(MR_FLOOR).ln()
        })
        .sum();
    Ok((log_sum / MR_REFERENCE_POINTS as f64).exp())
}

/// Size of a maximum bipartite matching (Kuhn's augmenting paths).
pub fn max_matching(adj: &[Vec<usize>], right: usize) -> usize {
    fn augment(u: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &v in &adj[u] {
            if seen[v] {
                continue;
            }
            seen[v] = true;
            if owner[v].map_or(true, |w| augment(w, adj, seen, owner)) {
                owner[v] = Some(u);
                return true;
            }
        }
        false
    }
    let mut owner = vec![None; right];
    (0..adj.len())
        .filter(|&u| augment(u, adj, &mut vec![false; right], &mut owner))
        .count()
}

/// Jaccard index of one image; `None` when both sides are empty.
pub fn image_jaccard(dets: &[Detection], gts: &[Annotation], iou_thr: f64) -> Option<f64> {
    let gts: Vec<&Annotation> = gts.iter().filter(|a| !a.is_ignore).collect();
    if dets.is_empty() && gts.is_empty() {
        return None;
    }
    let adj: Vec<Vec<usize>> = dets
        .iter()
        .map(|d| {
            (0..gts.len())
                .filter(|&g| d.bbox.iou(&gts[g].bbox) >= iou_thr)
                .collect()
        })
        .collect();
    let m = max_matching(&adj, gts.len()) as f64;
    Some(m / (dets.len() as f64 + gts.len() as f64 - m))
}

/// Mean per-image Jaccard index over images with any box; 1 when no image
/// has any box. Ignore-flagged GTs are dropped.
pub fn jaccard_index(dets: &[DetectionSet], gts: &[Vec<Annotation>], iou_thr: f64) -> Result<f64> {
    if dets.len() != gts.len() {
        return Err(Error::config(format!(
            "{} detection sets for {} images",
            dets.len(),
            gts.len()
        )));
    }
    let vals: Vec<f64> = dets
        .iter()
        .zip(gts)
        .filter_map(|(d, g)| image_jaccard(d, g, iou_thr))
        .collect();
    if vals.is_empty() {
        return Ok(1.0);
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}
