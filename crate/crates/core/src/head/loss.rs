//! Scalar losses with closed-form gradients.

use crate::autograd::{sigmoid, softplus};
use crate::types::BoundingBox;

/// `|y - s|^beta * BCE(s, y)` with `s = sigmoid(logit)`.
pub fn quality_focal_loss(logit: f64, target: f64, beta: f64) -> f64 {
    quality_focal_with_grad(logit, target, beta).0
}

/// Loss and d(loss)/d(logit).
pub fn quality_focal_with_grad(x: f64, y: f64, beta: f64) -> (f64, f64) {
    let s = sigmoid(x);
    let d = s - y;
    let ad = d.abs();
    // softplus(x) - y*x == -(y ln s + (1-y) ln(1-s)), stable for large |x|.
    let bce = softplus(x) - y * x;
    let m = ad.powf(beta);
    let dm = if ad == 0.0 {
        0.0
    } else {
        beta * ad.powf(beta - 1.0) * d.signum() * s * (1.0 - s)
    };
    (m * bce, dm * bce + m * d)
}

/// `1 - GIoU`, in `[0, 2]`.
pub fn giou_loss(pred: &BoundingBox, gt: &BoundingBox) -> f64 {
    giou_with_grad(pred.to_array(), gt.to_array()).0
}

/// `1 - GIoU` and its gradient w.r.t. the predicted corners.
///
/// A zero-area union gives IoU 0 and a zero-area enclosure drops the
/// penalty term.
pub fn giou_with_grad(p: [f64; 4], g: [f64; 4]) -> (f64, [f64; 4]) {
    let [x1, y1, x2, y2] = p;
    let [gx1, gy1, gx2, gy2] = g;
    let pw = (x2 - x1).max(0.0);
    let ph = (y2 - y1).max(0.0);
    let ap = pw * ph;
    let ag = (gx2 - gx1).max(0.0) * (gy2 - gy1).max(0.0);
    let iw_raw = x2.min(gx2) - x1.max(gx1);
    let ih_raw = y2.min(gy2) - y1.max(gy1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let union = ap + ag - inter;
    let ew = x2.max(gx2) - x1.min(gx1);
    let eh = y2.max(gy2) - y1.min(gy1);
    let enc = ew.max(0.0) * eh.max(0.0);

    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let penalty = if enc > 0.0 { (enc - union) / enc } else { 0.0 };
    let loss = 1.0 - (iou - penalty);

    // d(inter), d(area_p), d(enc) w.r.t. [x1, y1, x2, y2].
    let overlap = iw_raw > 0.0 && ih_raw > 0.0;
    let d_inter = if overlap {
        [
            if x1 > gx1 { -ih } else { 0.0 },
            if y1 > gy1 { -iw } else { 0.0 },
            if x2 < gx2 { ih } else { 0.0 },
            if y2 < gy2 { iw } else { 0.0 },
        ]
    } else {
        [0.0; 4]
    };
    let d_ap = if x2 > x1 && y2 > y1 {
        [-ph, -pw, ph, pw]
    } else {
        [0.0; 4]
    };
    let d_enc = [
        if x1 < gx1 { -eh } else { 0.0 },
        if y1 < gy1 { -ew } else { 0.0 },
        if x2 > gx2 { eh } else { 0.0 },
        if y2 > gy2 { ew } else { 0.0 },
    ];
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_union = d_ap[k] - d_inter[k];
        let d_iou = if union > 0.0 {
            (d_inter[k] * union - inter * d_union) / (union * union)
        } else {
            0.0
        };
        // penalty = 1 - union / enc
        let d_pen = if enc > 0.0 {
            -(d_union * enc - union * d_enc[k]) / (enc * enc)
        } else {
            0.0
        };
        grad[k] = -(d_iou - d_pen);
    }
    (loss, grad)
}

/// Sum of absolute corner differences, x coordinates divided by `scale.0`
/// and y by `scale.1`.
pub fn l1_with_grad(p: [f64; 4], g: [f64; 4], scale: (f64, f64)) -> (f64, [f64; 4]) {
    let mut loss = 0.0;
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let s = if k % 2 == 0 { scale.0 } else { scale.1 };
        let d = p[k] - g[k];
        loss += d.abs() / s;
        grad[k] = if d == 0.0 { 0.0 } else { d.signum() / s };
    }
    (loss, grad)
}

/// Softmax cross-entropy of one row of logits and its gradient.
pub fn cross_entropy_with_grad(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() + max - logits[target];
    let grad = exps
        .iter()
        .enumerate()
        .map(|(k, e)| e / total - if k == target { 1.0 } else { 0.0 })
        .collect();
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn qfl_examples() {
        let x = 0.3f64;
        let s = sigmoid(x);
        assert_eq!(quality_focal_loss(x, s, 2.0), 0.0);
        assert!(quality_focal_loss(-50.0, 0.0, 2.0) < 1e-40);

        let x = (0.8f64 / 0.2).ln();
        let (s, y) = (0.8f64, 0.5f64);
        let want = (y - s).abs().powi(2) * -(y * s.ln() + (1.0 - y) * (1.0 - s).ln());
        assert!((quality_focal_loss(x, y, 2.0) - want).abs() < 1e-12);
    }

    #[test]
    fn qfl_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let x = rng.gen_range(-6.0..6.0);
            let y = rng.gen_range(0.0..1.0);
            let h = 1e-6;
            let fd = (quality_focal_loss(x + h, y, 2.0) - quality_focal_loss(x - h, y, 2.0)) / (2.0 * h);
            let (_, an) = quality_focal_with_grad(x, y, 2.0);
            assert!(rel_err(an, fd) < 1e-4 || (an - fd).abs() < 1e-9, "{an} vs {fd}");
        }
    }

    #[test]
    fn giou_examples() {
        let a = BoundingBox::new(0.0, 0.0, 1.0, 1.0);
        assert!(giou_loss(&a, &a).abs() < 1e-15);
        let b = BoundingBox::new(2.0, 2.0, 3.0, 3.0);
        assert!((giou_loss(&a, &b) - 16.0 / 9.0).abs() < 1e-12);
        let dot = BoundingBox::new(1.0, 1.0, 1.0, 1.0);
        assert_eq!(giou_loss(&dot, &dot), 1.0);
    }

    #[test]
    fn giou_range_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rb = |rng: &mut ChaCha8Rng| {
            let x = rng.gen_range(0.0..10.0);
            let y = rng.gen_range(0.0..10.0);
            BoundingBox::new(x, y, x + rng.gen_range(0.0..5.0), y + rng.gen_range(0.0..5.0))
        };
        for _ in 0..10_000 {
            let (a, b) = (rb(&mut rng), rb(&mut rng));
            let l = giou_loss(&a, &b);
            assert!((0.0..=2.0).contains(&l), "{l}");
        }
    }

    #[test]
    fn giou_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let p = [
                rng.gen_range(0.0..4.0),
                rng.gen_range(0.0..4.0),
                rng.gen_range(5.0..9.0),
                rng.gen_range(5.0..9.0),
            ];
            let g = [
                rng.gen_range(0.0..6.0),
                rng.gen_range(0.0..6.0),
                rng.gen_range(6.5..12.0),
                rng.gen_range(6.5..12.0),
            ];
            let (_, an) = giou_with_grad(p, g);
            for k in 0..4 {
                let h = 1e-6;
                let (mut pp, mut pm) = (p, p);
                pp[k] += h;
                pm[k] -= h;
                let fd = (giou_with_grad(pp, g).0 - giou_with_grad(pm, g).0) / (2.0 * h);
                assert!(rel_err(an[k], fd) < 1e-4 || (an[k] - fd).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ce_matches_direct() {
        let (l, g) = cross_entropy_with_grad(&[1.0, 2.0, 0.5], 1);
        let z: f64 = [1.0f64, 2.0, 0.5].iter().map(|v| v.exp()).sum();
        assert!((l - (z.ln() - 2.0)).abs() < 1e-12);
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
    }
}
