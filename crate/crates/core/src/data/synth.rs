//! Deterministic two-modality toy scenes.
//!
//! Modality A is RGB-like (three channels), modality B is IR-like (one
//! channel). Targets are axis-aligned rectangles. Three scene kinds:
//!
//! * normal: targets visible in both modalities;
//! * dark: A is dim and carries no target signal (targets are simply not
//!   drawn), B shows them; A may carry bright decoys;
//! * cold: B is warm and flat with no target signal, A shows them; B may
//!   carry hot decoys.
//!
//! Decoys look like targets in their own modality but are not annotated, so
//! neither modality alone suffices.

use std::collections::BTreeMap;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::types::{Annotation, BoundingBox, ImagePlane, MultiModalSample};

pub const A_MODALITY: Modality = Modality::Rgb;
pub const B_MODALITY: Modality = Modality::Ir;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    Normal,
    Dark,
    Cold,
}

impl SceneKind {
    pub fn name(self) -> &'static str {
        match self {
            SceneKind::Normal => "normal",
            SceneKind::Dark => "dark",
            SceneKind::Cold => "cold",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub train_count: usize,
    pub test_count: usize,
    pub image_size: (usize, usize),
    pub dark_fraction: f64,
    pub cold_fraction: f64,
    pub min_targets: usize,
    pub max_targets: usize,
    /// Inclusive target width range in pixels.
    pub target_width: (usize, usize),
    /// Inclusive target height range in pixels.
    pub target_height: (usize, usize),
    /// Decoys drawn into the unreliable modality of dark and cold scenes.
    pub decoys: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_count: 400,
            test_count: 200,
            image_size: (32, 32),
            dark_fraction: 0.35,
            cold_fraction: 0.35,
            min_targets: 1,
            max_targets: 2,
            target_width: (5, 9),
            target_height: (8, 14),
            decoys: 1,
            noise_std: 0.04,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_count == 0 || self.test_count == 0 {
            return Err(Error::config("synthetic split counts must be at least 1"));
        }
        let frac_ok = |f: f64| (0.0..=1.0).contains(&f);
        if !frac_ok(self.dark_fraction)
            || !frac_ok(self.cold_fraction)
            || self.dark_fraction + self.cold_fraction > 1.0
        {
            return Err(Error::config("dark/cold fractions must lie in [0, 1] and sum to <= 1"));
        }
        if self.min_targets == 0 || self.min_targets > self.max_targets {
            return Err(Error::config("target count range is empty"));
        }
        let (h, w) = self.image_size;
        if self.target_width.0 == 0
            || self.target_width.0 > self.target_width.1
            || self.target_height.0 == 0
            || self.target_height.0 > self.target_height.1
            || self.target_width.1 + 2 > w
            || self.target_height.1 + 2 > h
        {
            return Err(Error::config("target size range does not fit the image"));
        }
        if self.noise_std < 0.0 {
            return Err(Error::config("noise_std must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub train: Dataset,
    pub test: Dataset,
    pub train_kinds: Vec<SceneKind>,
    pub test_kinds: Vec<SceneKind>,
}

impl SynthDataset {
    /// Test samples of one scene kind.
    pub fn test_subset(&self, kind: SceneKind) -> Dataset {
        Dataset::new(
            format!("{}-{}", self.test.name, kind.name()),
            self.test
                .samples
                .iter()
                .zip(&self.test_kinds)
                .filter(|(_, &k)| k == kind)
                .map(|(s, _)| s.clone())
                .collect(),
        )
    }
}

/// Generates the train and test splits; a pure function of `cfg`.
pub fn synth_toy_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train, train_kinds) = split(cfg, "train", cfg.train_count, &mut rng)?;
    let (test, test_kinds) = split(cfg, "test", cfg.test_count, &mut rng)?;
    Ok(SynthDataset {
        train,
        test,
        train_kinds,
        test_kinds,
    })
}

fn split(
    cfg: &SynthConfig,
    name: &str,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Dataset, Vec<SceneKind>)> {
    let n_dark = (cfg.dark_fraction * count as f64).round() as usize;
    let n_cold = ((cfg.cold_fraction * count as f64).round() as usize).min(count - n_dark);
    let mut kinds: Vec<SceneKind> = std::iter::repeat(SceneKind::Dark)
        .take(n_dark)
        .chain(std::iter::repeat(SceneKind::Cold).take(n_cold))
        .chain(std::iter::repeat(SceneKind::Normal).take(count - n_dark - n_cold))
        .collect();
    kinds.shuffle(rng);
    let samples = kinds
        .iter()
        .enumerate()
        .map(|(i, &k)| scene(cfg, format!("{name}-{i:05}-{}", k.name()), k, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok((Dataset::new(name, samples), kinds))
}

fn place_boxes(
    cfg: &SynthConfig,
    count: usize,
    avoid: &[BoundingBox],
    rng: &mut ChaCha8Rng,
) -> Vec<BoundingBox> {
    let (h, w) = cfg.image_size;
    let mut placed: Vec<BoundingBox> = Vec::with_capacity(count);
    for _ in 0..count {
        for _attempt in 0..50 {
            let bw = rng.gen_range(cfg.target_width.0..=cfg.target_width.1);
            let bh = rng.gen_range(cfg.target_height.0..=cfg.target_height.1);
            let x = rng.gen_range(1..=w - bw - 1);
            let y = rng.gen_range(1..=h - bh - 1);
            let b = BoundingBox::new(x as f64, y as f64, (x + bw) as f64, (y + bh) as f64);
            // One pixel of clearance so rectangles never touch.
            let grown = BoundingBox::new(b.x_min - 1.0, b.y_min - 1.0, b.x_max + 1.0, b.y_max + 1.0);
            if placed.iter().chain(avoid).all(|o| grown.intersection(o) == 0.0) {
                placed.push(b);
                break;
            }
        }
    }
    placed
}

fn fill(plane: &mut Array3<f64>, b: &BoundingBox, color: &[f64], noise: &Normal<f64>, rng: &mut ChaCha8Rng) {
    for y in b.y_min as usize..b.y_max as usize {
        for x in b.x_min as usize..b.x_max as usize {
            for (c, &v) in color.iter().enumerate() {
                plane[[y, x, c]] = v + noise.sample(rng);
            }
        }
    }
}

fn background(
    h: usize,
    w: usize,
    base: &[f64],
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) -> Array3<f64> {
    let c = base.len();
    let mut plane = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for (k, &b) in base.iter().enumerate() {
                plane[[y, x, k]] = b + noise.sample(rng);
            }
        }
    }
    plane
}

fn scene(cfg: &SynthConfig, id: String, kind: SceneKind, rng: &mut ChaCha8Rng) -> Result<MultiModalSample> {
    let (h, w) = cfg.image_size;
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::config(e.to_string()))?;
    let n_targets = rng.gen_range(cfg.min_targets..=cfg.max_targets);
    let targets = place_boxes(cfg, n_targets, &[], rng);
    let decoys = if kind == SceneKind::Normal {
        Vec::new()
    } else {
        place_boxes(cfg, cfg.decoys, &targets, rng)
    };

    let tint: f64 = rng.gen_range(-0.05..0.05);
    let a_base: Vec<f64> = match kind {
        SceneKind::Dark => vec![0.06, 0.06, 0.08],
        _ => vec![0.45 + tint, 0.50 + tint, 0.40 + tint],
    };
    let a_target = [0.95, 0.25, 0.20];
    let mut a = background(h, w, &a_base, &noise, rng);

    let b_base = match kind {
        SceneKind::Cold => [0.55],
        _ => [0.15],
    };
    let b_target = [0.85];
    let b_decoy = [1.0];
    let mut b = background(h, w, &b_base, &noise, rng);

    match kind {
        SceneKind::Normal => {
            for t in &targets {
                fill(&mut a, t, &a_target, &noise, rng);
                fill(&mut b, t, &b_target, &noise, rng);
            }
        }
        SceneKind::Dark => {
            for t in &targets {
                fill(&mut b, t, &b_target, &noise, rng);
            }
            for d in &decoys {
                fill(&mut a, d, &a_target, &noise, rng);
            }
        }
        SceneKind::Cold => {
            for t in &targets {
                fill(&mut a, t, &a_target, &noise, rng);
            }
            for d in &decoys {
                fill(&mut b, d, &b_decoy, &noise, rng);
            }
        }
    }

    let mut planes = BTreeMap::new();
    planes.insert(A_MODALITY, ImagePlane::new(a)?);
    planes.insert(B_MODALITY, ImagePlane::new(b)?);
    let annotations = targets.into_iter().map(Annotation::person).collect();
    MultiModalSample::new(id, planes, annotations)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            train_count: 20,
            test_count: 10,
            seed: 7,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = synth_toy_dataset(&small()).unwrap();
        let b = synth_toy_dataset(&small()).unwrap();
        assert_eq!(a, b);
        let mut other = small();
        other.seed = 8;
        assert_ne!(a.train, synth_toy_dataset(&other).unwrap().train);
    }

    #[test]
    fn split_sizes_and_fractions() {
        let cfg = SynthConfig {
            train_count: 100,
            test_count: 50,
            ..small()
        };
        let d = synth_toy_dataset(&cfg).unwrap();
        assert_eq!(d.train.len(), 100);
        assert_eq!(d.test.len(), 50);
        let dark = d.train_kinds.iter().filter(|&&k| k == SceneKind::Dark).count();
        let cold = d.train_kinds.iter().filter(|&&k| k == SceneKind::Cold).count();
        assert_eq!((dark, cold), (35, 35));
    }

    #[test]
    fn samples_are_well_formed() {
        let d = synth_toy_dataset(&small()).unwrap();
        for s in d.train.samples.iter().chain(&d.test.samples) {
            s.validate().unwrap();
            assert_eq!(s.valid_count(), 2);
            assert!(!s.annotations.is_empty());
            for a in &s.annotations {
                assert!(a.bbox.is_well_formed());
                assert!(a.bbox.x_max <= 32.0 && a.bbox.y_max <= 32.0);
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = small();
        c.train_count = 0;
        assert!(synth_toy_dataset(&c).is_err());
        let mut c = small();
        c.dark_fraction = 0.8;
        c.cold_fraction = 0.5;
        assert!(c.validate().is_err());
    }
}
