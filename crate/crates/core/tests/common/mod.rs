//! Slow, literal reference implementations used as test oracles.
#![allow(dead_code)]

use mmfuse::{Annotation, BoundingBox, Detection, DetectionSet};
use rand::Rng;

/// Triple loop over grids, tokens and channels.
pub fn unify_scalar(grids: &[Vec<Vec<f64>>], conf: &[f64], valid: &[bool], maa: &[f64]) -> Vec<Vec<f64>> {
    let n = grids[0].len();
    let d = maa.len();
    let wsum: f64 = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).sum();
    let mut out = vec![vec![0.0; d]; n];
    for t in 0..n {
        for k in 0..d {
            let mut acc = 0.0;
            for i in 0..grids.len() {
                let w = if valid[i] { 1.0 } else { 0.0 };
                acc += w * conf[i] * grids[i][t][k];
            }
            out[t][k] = acc / wsum + maa[k];
        }
    }
    out
}

fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Outcome {
    Tp,
    Fp,
    Skip,
}

/// Greedy matching of the detections scoring at least `min_score`:
/// each takes its best free regular GT, else any ignore GT, else nothing.
fn outcomes(dets: &[Detection], gts: &[Annotation], thr: f64, min_score: f64) -> Vec<(f64, Outcome)> {
    let mut order: Vec<&Detection> = dets.iter().filter(|d| d.score >= min_score).collect();
    order.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut used = vec![false; gts.len()];
    let mut out = Vec::new();
    for d in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if g.is_ignore || used[j] {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if v >= thr && best.map_or(true, |b| v >= b.1) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
            out.push((d.score, Outcome::Tp));
        } else if gts.iter().any(|g| g.is_ignore && iou(&d.bbox, &g.bbox) >= thr) {
            out.push((d.score, Outcome::Skip));
        } else {
            out.push((d.score, Outcome::Fp));
        }
    }
    out
}

/// COCO AP by definition: interpolated precision at recall `r` is the
/// maximum precision over all points reaching recall `r`.
pub fn coco_ap_oracle(dets: &[DetectionSet], gts: &[Vec<Annotation>]) -> (f64, f64) {
    let mut cats: Vec<u32> = gts.iter().flatten().filter(|a| !a.is_ignore).map(|a| a.category).collect();
    cats.sort();
    cats.dedup();
    if cats.is_empty() {
        return (0.0, 0.0);
    }
    let mut all = 0.0;
    let mut at50 = 0.0;
    for &c in &cats {
        let npos = gts.iter().flatten().filter(|a| a.category == c && !a.is_ignore).count() as f64;
        for t in 0..10 {
            let thr = 0.5 + 0.05 * t as f64;
            let mut scored = Vec::new();
            for (d, g) in dets.iter().zip(gts) {
                let d: Vec<Detection> = d.iter().copied().filter(|x| x.category == c).collect();
                let g: Vec<Annotation> = g.iter().filter(|x| x.category == c).cloned().collect();
                scored.extend(outcomes(&d, &g, thr, f64::NEG_INFINITY));
            }
            scored.retain(|s| s.1 != Outcome::Skip);
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let mut pts = Vec::new();
            let (mut tp, mut fp) = (0.0, 0.0);
            for s in &scored {
                if s.1 == Outcome::Tp {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
                pts.push((tp / npos, tp / (tp + fp)));
            }
            let mut ap = 0.0;
            for k in 0..=100 {
                let r = k as f64 / 100.0;
                let p = pts
                    .iter()
                    .filter(|p| p.0 >= r)
                    .map(|p| p.1)
                    .fold(0.0, f64::max);
                ap += p / 101.0;
            }
            all += ap / 10.0;
            if t == 0 {
                at50 += ap;
            }
        }
    }
    (all / cats.len() as f64, at50 / cats.len() as f64)
}

/// Re-matches from scratch at every score threshold and takes, per
/// reference FPPI, the smallest miss rate whose FPPI does not exceed it.
pub fn mr_oracle(dets: &[DetectionSet], gts: &[Vec<Annotation>]) -> Option<f64> {
    let npos = gts.iter().flatten().filter(|a| !a.is_ignore).count() as f64;
    if npos == 0.0 {
        return None;
    }
    let mut thresholds: Vec<f64> = dets.iter().flatten().map(|d| d.score).collect();
    thresholds.push(f64::INFINITY);
    let mut points = Vec::new();
    for &th in &thresholds {
        let (mut tp, mut fp) = (0.0, 0.0);
        for (d, g) in dets.iter().zip(gts) {
            for (_, o) in outcomes(d, g, 0.5, th) {
                match o {
                    Outcome::Tp => tp += 1.0,
                    Outcome::Fp => fp += 1.0,
                    Outcome::Skip => {}
                }
            }
        }
        points.push((fp / dets.len() as f64, 1.0 - tp / npos));
    }
    let mut log_sum = 0.0;
    for k in 0..9 {
        let r = 10f64.powf(-2.0 + k as f64 / 4.0);
        let mr = points
            .iter()
            .filter(|p| p.0 <= r)
            .map(|p| p.1)
            .fold(1.0, f64::min);
        log_sum += mr.max(1e-10).ln();
    }
    Some((log_sum / 9.0).exp())
}

fn best_matching(dets: &[Detection], gts: &[&Annotation], i: usize, used: &mut Vec<bool>) -> usize {
    if i == dets.len() {
        return 0;
    }
    let mut best = best_matching(dets, gts, i + 1, used);
    for j in 0..gts.len() {
        if !used[j] && iou(&dets[i].bbox, &gts[j].bbox) >= 0.5 {
            used[j] = true;
            best = best.max(1 + best_matching(dets, gts, i + 1, used));
            used[j] = false;
        }
    }
    best
}

/// Exhaustive maximum matching over every injective assignment.
pub fn ji_oracle(dets: &[DetectionSet], gts: &[Vec<Annotation>]) -> f64 {
    let mut vals = Vec::new();
    for (d, g) in dets.iter().zip(gts) {
        let g: Vec<&Annotation> = g.iter().filter(|a| !a.is_ignore).collect();
        if d.is_empty() && g.is_empty() {
            continue;
        }
        let m = best_matching(d, &g, 0, &mut vec![false; g.len()]) as f64;
        vals.push(m / (d.len() as f64 + g.len() as f64 - m));
    }
    if vals.is_empty() {
        1.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Up to five GTs and five detections per image, detections mostly being
/// jittered copies of GTs so every IoU regime shows up.
pub fn random_instance<R: Rng>(rng: &mut R, images: usize, with_ignore: bool) -> (Vec<DetectionSet>, Vec<Vec<Annotation>>) {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..images {
        let ng = rng.gen_range(0..=5);
        let g: Vec<Annotation> = (0..ng)
            .map(|_| Annotation {
                bbox: BoundingBox::from_xywh(
                    rng.gen_range(0.0..30.0),
                    rng.gen_range(0.0..30.0),
                    rng.gen_range(3.0..12.0),
                    rng.gen_range(3.0..12.0),
                ),
                category: rng.gen_range(1..=2),
                is_ignore: with_ignore && rng.gen_bool(0.15),
            })
            .collect();
        let nd = rng.gen_range(0..=5);
        let d: DetectionSet = (0..nd)
            .map(|_| {
                let bbox = if !g.is_empty() && rng.gen_bool(0.7) {
                    let b = g[rng.gen_range(0..g.len())].bbox;
                    let j = rng.gen_range(0.0..3.0);
                    BoundingBox::from_xywh(
                        b.x_min + rng.gen_range(-j..=j),
                        b.y_min + rng.gen_range(-j..=j),
                        b.width() * rng.gen_range(0.7..1.3),
                        b.height() * rng.gen_range(0.7..1.3),
                    )
                } else {
                    BoundingBox::from_xywh(rng.gen_range(0.0..30.0), rng.gen_range(0.0..30.0), 6.0, 8.0)
                };
                Detection {
                    bbox,
                    score: rng.gen_range(0.01..1.0),
                    category: rng.gen_range(1..=2),
                }
            })
            .collect();
        dets.push(d);
        gts.push(g);
    }
    (dets, gts)
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}
