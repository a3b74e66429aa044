use criterion::{black_box, criterion_group, criterion_main, Criterion};
use mmfuse::eval::{coco_ap, jaccard_index, log_average_miss_rate};
use mmfuse::{Annotation, BoundingBox, Detection, DetectionSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 500 images with up to 8 pedestrians and 20 scored boxes each.
fn instance() -> (Vec<DetectionSet>, Vec<Vec<Annotation>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..500 {
        let g: Vec<Annotation> = (0..rng.gen_range(0..=8))
            .map(|_| Annotation {
                bbox: BoundingBox::from_xywh(rng.gen_range(0.0..600.0), rng.gen_range(0.0..400.0), 20.0, 50.0),
                category: 1,
                is_ignore: rng.gen_bool(0.1),
            })
            .collect();
        let d: DetectionSet = (0..20)
            .map(|i| {
                let bbox = match g.get(i) {
                    Some(a) => BoundingBox::from_xywh(
                        a.bbox.x_min + rng.gen_range(-4.0..4.0),
                        a.bbox.y_min + rng.gen_range(-4.0..4.0),
                        20.0,
                        50.0,
                    ),
                    None => BoundingBox::from_xywh(rng.gen_range(0.0..600.0), rng.gen_range(0.0..400.0), 20.0, 50.0),
                };
                Detection { bbox, score: rng.gen_range(0.0..1.0), category: 1 }
            })
            .collect();
        dets.push(d);
        gts.push(g);
    }
    (dets, gts)
}

fn metrics(c: &mut Criterion) {
    let (dets, gts) = instance();
    c.bench_function("coco_ap_500", |b| b.iter(|| coco_ap(black_box(&dets), &gts).unwrap()));
    c.bench_function("mr2_500", |b| b.iter(|| log_average_miss_rate(black_box(&dets), &gts).unwrap()));
    c.bench_function("ji_500", |b| b.iter(|| jaccard_index(black_box(&dets), &gts, 0.5).unwrap()));
}

criterion_group!(benches, metrics);
criterion_main!(benches);
