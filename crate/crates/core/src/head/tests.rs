use super::*;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SHAPES: [(usize, usize); 4] = [(16, 16), (8, 8), (4, 4), (2, 2)];
const STRIDES: [usize; 4] = [4, 8, 16, 32];

fn store(cfg: &HeadConfig, d: usize, seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    cfg.init_params(&mut s, &mut ChaCha8Rng::seed_from_u64(seed), &[d; 4])
        .unwrap();
    s
}

fn pyramid(d: usize, seed: u64) -> Vec<TokenGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SHAPES
        .iter()
        .map(|&(h, w)| {
            let t = Array2::from_shape_fn((h * w, d), |_| rng.gen_range(-1.0..1.0));
            TokenGrid::new(t, (h, w), None, true).unwrap()
        })
        .collect()
}

fn random_raw(seed: u64, k: usize) -> RawPredictions {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let levels = SHAPES
        .iter()
        .zip(STRIDES)
        .map(|(&shape, stride)| {
            let n = shape.0 * shape.1;
            let mut m = |c: usize, a: f64| Array2::from_shape_fn((n, c), |_| rng.gen_range(-a..a));
            LevelPrediction {
                shape,
                stride,
                quality: m(k, 3.0),
                boxes: m(4, 0.6),
                category: m(k + 1, 2.0),
            }
        })
        .collect();
    RawPredictions {
        levels,
        image_size: (64, 64),
    }
}

fn person(x0: f64, y0: f64, x1: f64, y1: f64) -> Annotation {
    Annotation::person(BoundingBox::new(x0, y0, x1, y1))
}

#[test]
fn forward_preserves_level_shapes() {
    let cfg = HeadConfig::default();
    let s = store(&cfg, 8, 0);
    let raw = head_forward(&s, &cfg, &pyramid(8, 1), &STRIDES, (64, 64)).unwrap();
    for (lvl, &(h, w)) in raw.levels.iter().zip(&SHAPES) {
        assert_eq!(lvl.shape, (h, w));
        assert_eq!(lvl.quality.dim(), (h * w, 1));
        assert_eq!(lvl.boxes.dim(), (h * w, 4));
        assert_eq!(lvl.category.dim(), (h * w, 2));
        assert!(lvl.quality.iter().chain(&lvl.boxes).chain(&lvl.category).all(|v| v.is_finite()));
    }
}

#[test]
fn zero_final_layer_gives_prior_bias() {
    let cfg = HeadConfig::default();
    let mut s = store(&cfg, 8, 0);
    s.get_mut("head.quality.w").unwrap().fill(0.0);
    let raw = head_forward(&s, &cfg, &pyramid(8, 2), &STRIDES, (64, 64)).unwrap();
    let prior = cfg.prior_bias();
    assert!((sigmoid(prior) - cfg.prior_prob).abs() < 1e-12);
    for lvl in &raw.levels {
        assert!(lvl.quality.iter().all(|&v| v == prior));
    }
}

#[test]
fn empty_pyramid_is_config_error() {
    let cfg = HeadConfig::default();
    let s = store(&cfg, 8, 0);
    let err = head_forward(&s, &cfg, &[], &[], (64, 64)).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn no_annotations_no_positives() {
    let t = assign_targets(&SHAPES, &STRIDES, &[], (64, 64), &HeadConfig::default());
    assert_eq!(t.iter().flatten().filter(|a| a.is_some()).count(), 0);
}

#[test]
fn centred_gt_hits_its_cell() {
    // Max side 32 routes to level 1 (stride 8); the centre (20, 28) is the
    // centre of cell (row 3, col 2).
    let gt = person(4.0, 12.0, 36.0, 44.0);
    assert_eq!(level_for_box(&gt.bbox, &STRIDES), 1);
    let t = assign_targets(&SHAPES, &STRIDES, &[gt], (64, 64), &HeadConfig::default());
    let a = t[1][3 * 8 + 2].expect("centre cell positive");
    assert_eq!(a.gt_index, 0);
    assert!(t[0].iter().chain(&t[2]).chain(&t[3]).all(|a| a.is_none()));
}

#[test]
fn nested_gts_resolve_to_smaller_against_brute_force() {
    let cfg = HeadConfig::default();
    let shapes = [(4, 4)];
    let strides = [4];
    let anns = vec![person(1.0, 1.0, 15.0, 15.0), person(5.0, 5.0, 11.0, 11.0)];
    let t = assign_targets(&shapes, &strides, &anns, (16, 16), &cfg);
    for i in 0..4 {
        for j in 0..4 {
            let (px, py) = (j as f64 * 4.0 + 2.0, i as f64 * 4.0 + 2.0);
            let mut best: Option<(f64, usize)> = None;
            for (g, a) in anns.iter().enumerate() {
                let (cx, cy) = a.bbox.center();
                if (px - cx).abs() < 6.0 && (py - cy).abs() < 6.0 {
                    let area = a.bbox.area();
                    if best.map_or(true, |(ba, _)| area < ba) {
                        best = Some((area, g));
                    }
                }
            }
            assert_eq!(t[0][i * 4 + j].map(|a| a.gt_index), best.map(|b| b.1));
        }
    }
    assert_eq!(t[0][5].unwrap().gt_index, 1);
}

#[test]
fn ignore_gts_are_never_assigned() {
    let mut a = person(4.0, 4.0, 12.0, 12.0);
    a.is_ignore = true;
    let t = assign_targets(&[(4, 4)], &[4], &[a], (16, 16), &HeadConfig::default());
    assert!(t[0].iter().all(|x| x.is_none()));
}

fn single_level(boxes: &[([f64; 4], f64)], cfg: &HeadConfig) -> RawPredictions {
    // One location per box on a 1 x n grid with stride 1 and anchor 1:
    // raw = (dx, dy, ln w, ln h) relative to the cell centre.
    let n = boxes.len();
    let mut quality = Array2::zeros((n, 1));
    let mut raw = Array2::zeros((n, 4));
    for (i, (b, s)) in boxes.iter().enumerate() {
        let (cx, cy) = ((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0);
        quality[[i, 0]] = (s / (1.0 - s)).ln();
        raw[[i, 0]] = cx - (i as f64 + 0.5);
        raw[[i, 1]] = cy - 0.5;
        raw[[i, 2]] = ((b[2] - b[0]) / cfg.anchor_scale).ln();
        raw[[i, 3]] = ((b[3] - b[1]) / cfg.anchor_scale).ln();
    }
    RawPredictions {
        levels: vec![LevelPrediction {
            shape: (1, n),
            stride: 1,
            quality,
            boxes: raw,
            category: Array2::zeros((n, 2)),
        }],
        image_size: (1000, 1000),
    }
}

#[test]
fn threshold_removes_everything() {
    let cfg = HeadConfig::default();
    let raw = single_level(&[([1.0, 1.0, 5.0, 5.0], 0.01), ([2.0, 2.0, 6.0, 6.0], 0.02)], &cfg);
    assert!(decode_and_nms(&raw, &cfg).is_empty());
}

#[test]
fn duplicate_box_suppressed() {
    let cfg = HeadConfig::default();
    let b = [10.0, 10.0, 20.0, 30.0];
    let raw = single_level(&[(b, 0.8), (b, 0.9)], &cfg);
    let dets = decode_and_nms(&raw, &cfg);
    assert_eq!(dets.len(), 1);
    assert!((dets[0].score - 0.9).abs() < 1e-9);
}

fn nms_oracle(dets: &[Detection], thr: f64, max: usize) -> Vec<Detection> {
    let n = dets.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut removed = vec![false; n];
    let mut out = Vec::new();
    for (p, &i) in order.iter().enumerate() {
        if removed[i] {
            continue;
        }
        out.push(dets[i]);
        for &j in &order[p + 1..] {
            if dets[i].bbox.iou(&dets[j].bbox) > thr {
                removed[j] = true;
            }
        }
    }
    out.truncate(max);
    out
}

#[test]
fn nms_matches_quadratic_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..50 {
        let dets: Vec<Detection> = (0..20)
            .map(|_| {
                let x = rng.gen_range(0.0..30.0);
                let y = rng.gen_range(0.0..30.0);
                Detection {
                    bbox: BoundingBox::new(x, y, x + rng.gen_range(2.0..12.0), y + rng.gen_range(2.0..12.0)),
                    score: rng.gen_range(0.0..1.0),
                    category: 1,
                }
            })
            .collect();
        let max = if trial % 2 == 0 { 100 } else { 5 };
        assert_eq!(nms(dets.clone(), 0.5, max), nms_oracle(&dets, 0.5, max));
    }
}

#[test]
fn decoded_size_never_exceeds_max_dets() {
    let cfg = HeadConfig {
        score_threshold: 0.0,
        max_dets: 7,
        nms_iou: 1.0,
        ..HeadConfig::default()
    };
    let raw = random_raw(4, 1);
    assert_eq!(decode_and_nms(&raw, &cfg).len(), 7);
}

fn anns64() -> Vec<Annotation> {
    vec![
        person(6.0, 4.0, 15.0, 18.0),
        person(30.0, 20.0, 40.0, 44.0),
        person(10.0, 30.0, 60.0, 62.0),
    ]
}

fn targets_for(raw: &RawPredictions, anns: &[Annotation], cfg: &HeadConfig) -> Vec<LevelTargets> {
    assign_targets(&SHAPES, &STRIDES, anns, raw.image_size, cfg)
}

#[test]
fn losses_named_finite_and_nonnegative() {
    let cfg = HeadConfig::default();
    let raw = random_raw(5, 1);
    let t = targets_for(&raw, &anns64(), &cfg);
    let (terms, _) = compute_losses(&raw, &t, &cfg).unwrap();
    assert!(terms.num_pos > 0);
    for v in [terms.qfl, terms.ce, terms.giou, terms.l1, terms.total] {
        assert!(v.is_finite() && v >= 0.0);
    }
    assert!(terms.giou > 0.0 && terms.l1 > 0.0);

    let t0 = targets_for(&raw, &[], &cfg);
    let (empty, _) = compute_losses(&raw, &t0, &cfg).unwrap();
    assert_eq!((empty.giou, empty.l1, empty.num_pos), (0.0, 0.0, 0));
    assert!(empty.qfl > 0.0 && empty.ce > 0.0);
}

/// Central differences of one component w.r.t. one output map.
fn fd_check(
    which: &str,
    get: fn(&mut LevelPrediction) -> &mut Array2<f64>,
    component: fn(&LossTerms) -> f64,
    grad: fn(&LevelGrads) -> &Array2<f64>,
) {
    let cfg = HeadConfig::default();
    let raw = random_raw(6, 1);
    let t = targets_for(&raw, &anns64(), &cfg);
    let (_, grads) = compute_losses(&raw, &t, &cfg).unwrap();
    let eval = |r: &RawPredictions| component(&compute_losses(r, &t, &cfg).unwrap().0);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for l in 0..raw.levels.len() {
        let mut probe = raw.clone();
        let (n, c) = get(&mut probe.levels[l]).dim();
        for i in 0..n {
            // Only locations with a target (or every location for dense terms).
            if t[l][i].is_none() && which != "qfl" && which != "ce" {
                continue;
            }
            for j in 0..c {
                let mut p = raw.clone();
                get(&mut p.levels[l])[[i, j]] += h;
                let mut m = raw.clone();
                get(&mut m.levels[l])[[i, j]] -= h;
                let fd = (eval(&p) - eval(&m)) / (2.0 * h);
                let an = grad(&grads[l])[[i, j]];
                let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(err);
                checked += 1;
            }
        }
    }
    assert!(checked > 0);
    assert!(worst < 1e-4, "{which}: worst relative error {worst}");
}

#[test]
fn qfl_gradient_matches_fd() {
    fd_check("qfl", |l| &mut l.quality, |t| t.qfl, |g| &g.quality);
}

#[test]
fn ce_gradient_matches_fd() {
    fd_check("ce", |l| &mut l.category, |t| t.ce, |g| &g.category);
}

#[test]
fn giou_gradient_matches_fd() {
    fd_check("giou", |l| &mut l.boxes, |t| t.giou, |g| &g.giou_boxes);
}

#[test]
fn l1_gradient_matches_fd() {
    fd_check("l1", |l| &mut l.boxes, |t| t.l1, |g| &g.l1_boxes);
}

#[test]
fn graph_loss_backprops_into_head_params() {
    let cfg = HeadConfig::default();
    let s = store(&cfg, 8, 3);
    let pyr = pyramid(8, 4);
    let anns = anns64();
    let run = |s: &ParamStore| {
        let mut g = Graph::new();
        let vars: Vec<Var> = pyr.iter().map(|t| g.constant(t.tokens.clone())).collect();
        let lv = head_forward_node(&mut g, s, &cfg, &vars, &SHAPES).unwrap();
        let raw = collect_predictions(&g, &lv, &SHAPES, &STRIDES, (64, 64));
        let t = assign_targets(&SHAPES, &STRIDES, &anns, (64, 64), &cfg);
        let (loss, _) = loss_node(&mut g, &lv, &raw, &t, &cfg).unwrap();
        (g, loss.total)
    };
    let (g, total) = run(&s);
    let grads = g.param_grads(&g.backward(total));
    // The QFL soft target follows the predicted box, which the analytic
    // gradient treats as constant; probe parameters upstream of the
    // category and quality outputs only.
    for name in ["head.category.w", "head.quality.w", "head.quality.b"] {
        let (r, c) = s.get(name).unwrap().dim();
        for (i, j) in [(0, 0), (r - 1, c - 1), (r / 2, 0)] {
            let h = 1e-6;
            let mut sp = s.clone();
            sp.get_mut(name).unwrap()[[i, j]] += h;
            let mut sm = s.clone();
            sm.get_mut(name).unwrap()[[i, j]] -= h;
            let fd = {
                let (gp, tp) = run(&sp);
                let (gm, tm) = run(&sm);
                (gp.scalar(tp) - gm.scalar(tm)) / (2.0 * h)
            };
            let an = grads[name][[i, j]];
            let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            assert!(err < 1e-4, "{name}[{i},{j}]: {an} vs {fd}");
        }
    }
    assert!(grads["head.lateral0.w"].iter().any(|&v| v != 0.0));
    assert!(grads["head.tower0.w"].iter().any(|&v| v != 0.0));
    assert!(grads["head.box.w"].iter().any(|&v| v != 0.0));
}

#[test]
fn trait_object_roundtrip() {
    let head = CenterHead {
        cfg: HeadConfig::default(),
    };
    let s = store(&head.cfg, 8, 0);
    let raw = head.forward(&s, &pyramid(8, 5), &STRIDES, (64, 64)).unwrap();
    let dets = head.decode(&raw);
    assert!(dets.len() <= head.cfg.max_dets);
    let terms = head.loss(&raw, &anns64()).unwrap();
    assert!(terms.total.is_finite());
}
