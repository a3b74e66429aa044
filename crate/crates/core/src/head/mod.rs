//! Centre-based single-stage detection head.
//!
//! Every pyramid level goes through its own lateral projection, then a
//! 3x3 convolution tower shared across levels, then three 1x1 outputs per
//! location: quality logits (one per class, trained with quality focal
//! loss), a box `(dx, dy, log w, log h)` relative to the location centre,
//! and category logits over `background + classes` trained with
//! cross-entropy.

mod loss;

pub use loss::{
    cross_entropy_with_grad, giou_loss, giou_with_grad, l1_with_grad, quality_focal_loss,
    quality_focal_with_grad,
};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Graph, Var, ZERO_INDEX};
use crate::error::{Error, Result};
use crate::params::{trunc_normal, ParamStore};
use crate::types::{Annotation, BoundingBox, Detection, DetectionSet, TokenGrid};

const LOG_SIZE_CLAMP: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub qfl: f64,
    pub ce: f64,
    pub giou: f64,
    pub l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            qfl: 1.0,
            ce: 1.0,
            giou: 2.0,
            l1: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub num_classes: usize,
    pub feat_dim: usize,
    pub tower_depth: usize,
    /// Prior probability encoded in the initial quality bias.
    pub prior_prob: f64,
    /// Box side at zero log-size, in units of the level stride.
    pub anchor_scale: f64,
    /// Positive radius around a GT centre, in units of the level stride.
    pub center_radius: f64,
    pub qfl_beta: f64,
    pub loss_weights: LossWeights,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_dets: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            num_classes: 1,
            feat_dim: 32,
            tower_depth: 1,
            prior_prob: 0.01,
            anchor_scale: 2.0,
            center_radius: 1.5,
            qfl_beta: 2.0,
            loss_weights: LossWeights::default(),
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_dets: 100,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.score_threshold) || !unit(self.nms_iou) {
            return Err(Error::config("score_threshold and nms_iou must lie in [0, 1]"));
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) {
            return Err(Error::config("prior_prob must lie in (0, 1)"));
        }
        if self.num_classes == 0 || self.feat_dim == 0 || self.max_dets == 0 {
            return Err(Error::config("num_classes, feat_dim and max_dets must be positive"));
        }
        if self.anchor_scale <= 0.0 || self.center_radius <= 0.0 || self.qfl_beta < 1.0 {
            return Err(Error::config("anchor_scale, center_radius must be positive and qfl_beta >= 1"));
        }
        Ok(())
    }

    pub fn prior_bias(&self) -> f64 {
        -((1.0 - self.prior_prob) / self.prior_prob).ln()
    }

    /// Parameters under `head.`, for pyramid levels of widths `level_dims`.
    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R, level_dims: &[usize]) -> Result<()> {
        self.validate()?;
        let f = self.feat_dim;
        let kaiming = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        for (k, &d) in level_dims.iter().enumerate() {
            store.linear(rng, &format!("head.lateral{k}"), d, f, kaiming(d));
        }
        for j in 0..self.tower_depth {
            store.linear(rng, &format!("head.tower{j}"), 9 * f, f, kaiming(9 * f));
        }
        store.insert("head.quality.w", trunc_normal(rng, (f, self.num_classes), 0.01));
        store.filled("head.quality.b", (1, self.num_classes), self.prior_bias());
        store.linear(rng, "head.box", f, 4, 0.01);
        store.linear(rng, "head.category", f, self.num_classes + 1, 0.01);
        Ok(())
    }
}

/// One level of raw head output; rows are locations in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelPrediction {
    pub shape: (usize, usize),
    pub stride: usize,
    /// `N x K` quality logits.
    pub quality: Array2<f64>,
    /// `N x 4` box parameters.
    pub boxes: Array2<f64>,
    /// `N x (K + 1)` category logits, column 0 is background.
    pub category: Array2<f64>,
}

impl LevelPrediction {
    pub fn len(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn location_center(&self, n: usize) -> (f64, f64) {
        let (i, j) = (n / self.shape.1, n % self.shape.1);
        let s = self.stride as f64;
        ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawPredictions {
    pub levels: Vec<LevelPrediction>,
    /// `(height, width)` of the input image.
    pub image_size: (usize, usize),
}

/// Graph handles for one level.
#[derive(Debug, Clone, Copy)]
pub struct LevelVars {
    pub quality: Var,
    pub boxes: Var,
    pub category: Var,
}

/// im2col for a zero-padded 3x3 convolution over an `h x w x c` grid.
fn conv3x3_index(h: usize, w: usize, c: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(h * w * 9 * c);
    for i in 0..h as isize {
        for j in 0..w as isize {
            for di in -1..=1 {
                for dj in -1..=1 {
                    let (y, x) = (i + di, j + dj);
                    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                        idx.extend(std::iter::repeat(ZERO_INDEX).take(c));
                    } else {
                        let base = (y as usize * w + x as usize) * c;
                        idx.extend(base..base + c);
                    }
                }
            }
        }
    }
    idx
}

pub fn head_forward_node(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &HeadConfig,
    pyramid: &[Var],
    shapes: &[(usize, usize)],
) -> Result<Vec<LevelVars>> {
    if pyramid.is_empty() {
        return Err(Error::config("detection head needs at least one pyramid level"));
    }
    let f = cfg.feat_dim;
    let mut out = Vec::with_capacity(pyramid.len());
    for (k, (&x, &(h, w))) in pyramid.iter().zip(shapes).enumerate() {
        let lateral = format!("head.lateral{k}.w");
        let want = store
            .get(&lateral)
            .ok_or_else(|| Error::config(format!("head has no lateral projection for level {k}")))?
            .nrows();
        let (n, d) = g.value(x).dim();
        if d != want || n != h * w {
            return Err(Error::config(format!(
                "level {k}: got {n}x{d} tokens for grid {h}x{w}, head expects width {want}"
            )));
        }
        let mut y = g.linear(store, &format!("head.lateral{k}"), x);
        y = g.gelu(y);
        for j in 0..cfg.tower_depth {
            let cols = g.gather(y, conv3x3_index(h, w, f), (n, 9 * f));
            y = g.linear(store, &format!("head.tower{j}"), cols);
            y = g.gelu(y);
        }
        out.push(LevelVars {
            quality: g.linear(store, "head.quality", y),
            boxes: g.linear(store, "head.box", y),
            category: g.linear(store, "head.category", y),
        });
    }
    Ok(out)
}

/// Copies level outputs off the tape.
pub fn collect_predictions(
    g: &Graph,
    vars: &[LevelVars],
    shapes: &[(usize, usize)],
    strides: &[usize],
    image_size: (usize, usize),
) -> RawPredictions {
    RawPredictions {
        levels: vars
            .iter()
            .zip(shapes)
            .zip(strides)
            .map(|((v, &shape), &stride)| LevelPrediction {
                shape,
                stride,
                quality: g.value(v.quality).clone(),
                boxes: g.value(v.boxes).clone(),
                category: g.value(v.category).clone(),
            })
            .collect(),
        image_size,
    }
}

/// Array-level forward over a unified pyramid.
pub fn head_forward(
    store: &ParamStore,
    cfg: &HeadConfig,
    pyramid: &[TokenGrid],
    strides: &[usize],
    image_size: (usize, usize),
) -> Result<RawPredictions> {
    if strides.len() != pyramid.len() {
        return Err(Error::config("one stride per pyramid level required"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = pyramid.iter().map(|t| g.constant(t.tokens.clone())).collect();
    let shapes: Vec<_> = pyramid.iter().map(|t| t.grid_shape).collect();
    let out = head_forward_node(&mut g, store, cfg, &vars, &shapes)?;
    Ok(collect_predictions(&g, &out, &shapes, strides, image_size))
}

/// Box corners from raw parameters at a location.
pub fn decode_box(raw: [f64; 4], center: (f64, f64), stride: f64, anchor_scale: f64) -> BoundingBox {
    let cx = center.0 + raw[0] * stride;
    let cy = center.1 + raw[1] * stride;
    let w = anchor_scale * stride * raw[2].clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP).exp();
    let h = anchor_scale * stride * raw[3].clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP).exp();
    BoundingBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}

/// Chains a corner gradient back to the raw box parameters.
fn box_param_grad(raw: [f64; 4], corner_grad: [f64; 4], stride: f64, anchor_scale: f64) -> [f64; 4] {
    let [gx1, gy1, gx2, gy2] = corner_grad;
    let size = |v: f64| {
        if v.abs() < LOG_SIZE_CLAMP {
            anchor_scale * stride * v.exp()
        } else {
            0.0
        }
    };
    [
        stride * (gx1 + gx2),
        stride * (gy1 + gy2),
        size(raw[2]) * (gx2 - gx1) / 2.0,
        size(raw[3]) * (gy2 - gy1) / 2.0,
    ]
}

/// Pyramid level for a box: `round(log2(max_side / (4 * stride_0)))`,
/// clamped to the available levels.
pub fn level_for_box(b: &BoundingBox, strides: &[usize]) -> usize {
    let side = b.width().max(b.height()).max(1e-6);
    let base = 4.0 * strides[0] as f64;
    let l = (side / base).log2().round();
    l.clamp(0.0, (strides.len() - 1) as f64) as usize
}

/// What a positive location regresses to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub gt_index: usize,
    pub bbox: BoundingBox,
    pub category: u32,
}

/// Per-level, per-location assignment; `None` is background.
pub type LevelTargets = Vec<Option<Assignment>>;

/// Centre-sampling assignment. A location is positive when its centre lies
/// within `center_radius * stride` (Chebyshev) of the centre of a GT routed
/// to its level; overlapping candidates resolve to the smallest-area GT.
/// Ignore-flagged GTs are never assigned.
pub fn assign_targets(
    shapes: &[(usize, usize)],
    strides: &[usize],
    annotations: &[Annotation],
    image_size: (usize, usize),
    cfg: &HeadConfig,
) -> Vec<LevelTargets> {
    let (ih, iw) = (image_size.0 as f64, image_size.1 as f64);
    let gts: Vec<(usize, BoundingBox, u32, usize)> = annotations
        .iter()
        .enumerate()
        .filter(|(_, a)| !a.is_ignore)
        .map(|(i, a)| (i, a.bbox.clip(iw, ih), a.category))
        .filter(|(_, b, _)| b.area() > 0.0)
        .map(|(i, b, c)| (i, b, c, level_for_box(&b, strides)))
        .collect();
    shapes
        .iter()
        .zip(strides)
        .enumerate()
        .map(|(k, (&(h, w), &stride))| {
            let s = stride as f64;
            let radius = cfg.center_radius * s;
            (0..h * w)
                .map(|n| {
                    let (i, j) = (n / w, n % w);
                    let (px, py) = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
                    gts.iter()
                        .filter(|(_, b, _, lvl)| {
                            let (cx, cy) = b.center();
                            *lvl == k && (px - cx).abs().max((py - cy).abs()) < radius
                        })
                        .min_by(|a, b| a.1.area().total_cmp(&b.1.area()).then(a.0.cmp(&b.0)))
                        .map(|&(gt_index, bbox, category, _)| Assignment {
                            gt_index,
                            bbox,
                            category,
                        })
                })
                .collect()
        })
        .collect()
}

/// Named loss components; `total` is their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub qfl: f64,
    pub ce: f64,
    pub giou: f64,
    pub l1: f64,
    pub total: f64,
    pub num_pos: usize,
}

/// Gradients of each unweighted component w.r.t. one level's outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelGrads {
    pub quality: Array2<f64>,
    pub category: Array2<f64>,
    pub giou_boxes: Array2<f64>,
    pub l1_boxes: Array2<f64>,
}

/// Loss components and their gradients. QFL, GIoU and L1 are divided by
/// `max(num_pos, 1)`; cross-entropy is averaged over all locations.
pub fn compute_losses(
    raw: &RawPredictions,
    targets: &[LevelTargets],
    cfg: &HeadConfig,
) -> Result<(LossTerms, Vec<LevelGrads>)> {
    if targets.len() != raw.levels.len() {
        return Err(Error::Invariant("targets and predictions differ in level count".into()));
    }
    let k_cls = cfg.num_classes;
    let num_pos: usize = targets.iter().flatten().filter(|t| t.is_some()).count();
    let total_locs: usize = raw.levels.iter().map(|l| l.len()).sum();
    let norm = num_pos.max(1) as f64;
    let scale = (raw.image_size.1 as f64, raw.image_size.0 as f64);
    let mut terms = LossTerms {
        num_pos,
        ..LossTerms::default()
    };
    let mut grads = Vec::with_capacity(raw.levels.len());
    for (lvl, tg) in raw.levels.iter().zip(targets) {
        let n = lvl.len();
        if tg.len() != n || lvl.quality.ncols() != k_cls || lvl.category.ncols() != k_cls + 1 {
            return Err(Error::Invariant("prediction and target shapes disagree".into()));
        }
        let s = lvl.stride as f64;
        let mut gq = Array2::zeros((n, k_cls));
        let mut gc = Array2::zeros((n, k_cls + 1));
        let mut gg = Array2::zeros((n, 4));
        let mut gl = Array2::zeros((n, 4));
        for loc in 0..n {
            let assigned = tg[loc].as_ref().filter(|a| {
                a.category >= 1 && (a.category as usize) <= k_cls
            });
            let mut soft = vec![0.0; k_cls];
            let mut ce_target = 0;
            if let Some(a) = assigned {
                let r = [
                    lvl.boxes[[loc, 0]],
                    lvl.boxes[[loc, 1]],
                    lvl.boxes[[loc, 2]],
                    lvl.boxes[[loc, 3]],
                ];
                let pred = decode_box(r, lvl.location_center(loc), s, cfg.anchor_scale);
                let cls = a.category as usize - 1;
                soft[cls] = pred.iou(&a.bbox);
                ce_target = a.category as usize;

                let (lg, dg) = giou_with_grad(pred.to_array(), a.bbox.to_array());
                let (ll, dl) = l1_with_grad(pred.to_array(), a.bbox.to_array(), scale);
                terms.giou += lg / norm;
                terms.l1 += ll / norm;
                let pg = box_param_grad(r, dg, s, cfg.anchor_scale);
                let pl = box_param_grad(r, dl, s, cfg.anchor_scale);
                for c in 0..4 {
                    gg[[loc, c]] = pg[c] / norm;
                    gl[[loc, c]] = pl[c] / norm;
                }
            }
            for (c, &y) in soft.iter().enumerate() {
                let (l, d) = quality_focal_with_grad(lvl.quality[[loc, c]], y, cfg.qfl_beta);
                terms.qfl += l / norm;
                gq[[loc, c]] = d / norm;
            }
            let row: Vec<f64> = lvl.category.row(loc).to_vec();
            let (l, d) = cross_entropy_with_grad(&row, ce_target);
            terms.ce += l / total_locs as f64;
            for (c, v) in d.into_iter().enumerate() {
                gc[[loc, c]] = v / total_locs as f64;
            }
        }
        grads.push(LevelGrads {
            quality: gq,
            category: gc,
            giou_boxes: gg,
            l1_boxes: gl,
        });
    }
    let w = &cfg.loss_weights;
    terms.total = w.qfl * terms.qfl + w.ce * terms.ce + w.giou * terms.giou + w.l1 * terms.l1;
    Ok((terms, grads))
}

/// Loss nodes on the tape, one per component plus their weighted total.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub qfl: Var,
    pub ce: Var,
    pub giou: Var,
    pub l1: Var,
    pub total: Var,
}

pub fn loss_node(
    g: &mut Graph,
    vars: &[LevelVars],
    raw: &RawPredictions,
    targets: &[LevelTargets],
    cfg: &HeadConfig,
) -> Result<(LossVars, LossTerms)> {
    let (terms, grads) = compute_losses(raw, targets, cfg)?;
    let pick = |f: &dyn Fn(&LevelVars, &LevelGrads) -> (Var, Array2<f64>)| {
        vars.iter().zip(&grads).map(|(v, gr)| f(v, gr)).collect::<Vec<_>>()
    };
    let qfl = g.custom_scalar(terms.qfl, pick(&|v, gr| (v.quality, gr.quality.clone())));
    let ce = g.custom_scalar(terms.ce, pick(&|v, gr| (v.category, gr.category.clone())));
    let giou = g.custom_scalar(terms.giou, pick(&|v, gr| (v.boxes, gr.giou_boxes.clone())));
    let l1 = g.custom_scalar(terms.l1, pick(&|v, gr| (v.boxes, gr.l1_boxes.clone())));
    let w = &cfg.loss_weights;
    let parts = [
        g.scale(qfl, w.qfl),
        g.scale(ce, w.ce),
        g.scale(giou, w.giou),
        g.scale(l1, w.l1),
    ];
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = g.add(total, p);
    }
    Ok((LossVars { qfl, ce, giou, l1, total }, terms))
}

/// Greedy NMS over score-sorted detections (per category), capped at `max_dets`.
pub fn nms(mut dets: DetectionSet, iou_thr: f64, max_dets: usize) -> DetectionSet {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: DetectionSet = Vec::new();
    for d in dets {
        if keep.len() >= max_dets {
            break;
        }
        let suppressed = keep
            .iter()
            .any(|k| k.category == d.category && k.bbox.iou(&d.bbox) > iou_thr);
        if !suppressed {
            keep.push(d);
        }
    }
    keep
}

/// Thresholds quality scores, decodes boxes clipped to the image, and
/// applies greedy NMS.
pub fn decode_and_nms(raw: &RawPredictions, cfg: &HeadConfig) -> DetectionSet {
    let (ih, iw) = (raw.image_size.0 as f64, raw.image_size.1 as f64);
    let mut dets = Vec::new();
    for lvl in &raw.levels {
        for loc in 0..lvl.len() {
            for c in 0..lvl.quality.ncols() {
                let score = sigmoid(lvl.quality[[loc, c]]);
                if score <= cfg.score_threshold {
                    continue;
                }
                let r = [
                    lvl.boxes[[loc, 0]],
                    lvl.boxes[[loc, 1]],
                    lvl.boxes[[loc, 2]],
                    lvl.boxes[[loc, 3]],
                ];
                let bbox = decode_box(r, lvl.location_center(loc), lvl.stride as f64, cfg.anchor_scale)
                    .clip(iw, ih);
                if bbox.area() <= 0.0 {
                    continue;
                }
                dets.push(Detection {
                    bbox,
                    score,
                    category: c as u32 + 1,
                });
            }
        }
    }
    nms(dets, cfg.nms_iou, cfg.max_dets)
}

/// Forward, decode and loss over a pyramid.
pub trait DetectionHead {
    fn forward(&self, store: &ParamStore, pyramid: &[TokenGrid], strides: &[usize], image_size: (usize, usize)) -> Result<RawPredictions>;
    fn decode(&self, raw: &RawPredictions) -> DetectionSet;
    fn loss(&self, raw: &RawPredictions, annotations: &[Annotation]) -> Result<LossTerms>;
}

/// The default head, parameterised by its config.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterHead {
    pub cfg: HeadConfig,
}

impl DetectionHead for CenterHead {
    fn forward(&self, store: &ParamStore, pyramid: &[TokenGrid], strides: &[usize], image_size: (usize, usize)) -> Result<RawPredictions> {
        head_forward(store, &self.cfg, pyramid, strides, image_size)
    }

    fn decode(&self, raw: &RawPredictions) -> DetectionSet {
        decode_and_nms(raw, &self.cfg)
    }

    fn loss(&self, raw: &RawPredictions, annotations: &[Annotation]) -> Result<LossTerms> {
        let shapes: Vec<_> = raw.levels.iter().map(|l| l.shape).collect();
        let strides: Vec<_> = raw.levels.iter().map(|l| l.stride).collect();
        let targets = assign_targets(&shapes, &strides, annotations, raw.image_size, &self.cfg);
        Ok(compute_losses(raw, &targets, &self.cfg)?.0)
    }
}

#[cfg(test)]
mod tests;
