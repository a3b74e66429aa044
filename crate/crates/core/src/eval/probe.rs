//! Linear separability of fusion-token features by modality combination.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{restrict_to, Dataset};
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::model::Model;
use crate::types::MultiModalSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub train_fraction: f64,
    pub l2: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Label permutations averaged for the null accuracy.
    pub permutations: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            l2: 1e-3,
            iterations: 300,
            learning_rate: 0.5,
            permutations: 10,
            seed: 0,
        }
    }
}

/// `"ir+rgb"`-style name of the valid modalities, in canonical order.
pub fn combination_label(sample: &MultiModalSample) -> String {
    sample
        .valid_modalities()
        .iter()
        .map(|m| m.name())
        .collect::<Vec<_>>()
        .join("+")
}

/// Restricts each sample to one of `combos`, round-robin over a seeded
/// shuffle so every combination gets an equal share.
pub fn assign_combinations(dataset: &Dataset, combos: &[Vec<Modality>], seed: u64) -> Result<Dataset> {
    if combos.is_empty() {
        return Err(Error::config("no modality combinations given"));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = dataset.samples.clone();
    for (k, &i) in order.iter().enumerate() {
        out[i] = restrict_to(&dataset.samples[i], &combos[k % combos.len()])?;
    }
    Ok(Dataset::new(format!("{}-combos", dataset.name), out))
}

/// Post-block MAF and MAA features, one matrix per stage (`n x D`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeFeatures {
    pub sample_ids: Vec<String>,
    pub labels: Vec<usize>,
    pub combinations: Vec<String>,
    pub maf: Vec<Array2<f64>>,
    pub maa: Vec<Array2<f64>>,
}

impl ProbeFeatures {
    pub fn maf_concat(&self) -> Array2<f64> {
        let views: Vec<_> = self.maf.iter().map(|m| m.view()).collect();
        concatenate(Axis(1), &views).expect("equal row counts")
    }

    pub fn maa_concat(&self) -> Array2<f64> {
        let views: Vec<_> = self.maa.iter().map(|m| m.view()).collect();
        concatenate(Axis(1), &views).expect("equal row counts")
    }
}

pub fn extract_probe_features(model: &Model, dataset: &Dataset) -> Result<ProbeFeatures> {
    let names: Vec<String> = dataset.samples.iter().map(combination_label).collect();
    let combinations: Vec<String> = names.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let labels = names
        .iter()
        .map(|n| combinations.binary_search(n).expect("label present"))
        .collect();
    let mut maf_rows: Vec<Vec<Array1<f64>>> = Vec::new();
    let mut maa_rows: Vec<Vec<Array1<f64>>> = Vec::new();
    for s in &dataset.samples {
        let e = model.encode(s)?;
        maf_rows.push(e.maf);
        maa_rows.push(e.maa);
    }
    let stack = |rows: &[Vec<Array1<f64>>], k: usize| {
        let views: Vec<_> = rows.iter().map(|r| r[k].view()).collect();
        ndarray::stack(Axis(0), &views).expect("equal widths")
    };
    let stages = maf_rows.first().map_or(0, |r| r.len());
    Ok(ProbeFeatures {
        sample_ids: dataset.samples.iter().map(|s| s.sample_id.clone()).collect(),
        labels,
        combinations,
        maf: (0..stages).map(|k| stack(&maf_rows, k)).collect(),
        maa: (0..stages).map(|k| stack(&maa_rows, k)).collect(),
    })
}

/// Standardised multinomial logistic regression.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row /= total;
    }
}

impl LinearProbe {
    fn standardize(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.mean) / &self.std
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<usize> {
        let z = self.standardize(x).dot(&self.w) + &self.b;
        z.rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                    .0
            })
            .collect()
    }

    pub fn accuracy(&self, x: &Array2<f64>, y: &[usize]) -> f64 {
        let hits = self.predict(x).iter().zip(y).filter(|(p, t)| p == t).count();
        hits as f64 / y.len().max(1) as f64
    }
}

/// Full-batch gradient descent on mean cross-entropy plus `l2/2 |W|^2`.
pub fn fit_probe(x: &Array2<f64>, y: &[usize], classes: usize, cfg: &ProbeConfig) -> LinearProbe {
    let (n, d) = x.dim();
    let mean = x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(d));
    let std = x
        .std_axis(Axis(0), 0.0)
        .mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let mut probe = LinearProbe {
        mean,
        std,
        w: Array2::zeros((d, classes)),
        b: Array1::zeros(classes),
    };
    if n == 0 {
        return probe;
    }
    let xs = probe.standardize(x);
    let mut onehot = Array2::zeros((n, classes));
    for (i, &c) in y.iter().enumerate() {
        onehot[[i, c]] = 1.0;
    }
    for _ in 0..cfg.iterations {
        let mut p = xs.dot(&probe.w) + &probe.b;
        softmax_rows(&mut p);
        let err = (p - &onehot) / n as f64;
        let gw = xs.t().dot(&err) + &probe.w * cfg.l2;
        let gb = err.sum_axis(Axis(0));
        probe.w.scaled_add(-cfg.learning_rate, &gw);
        probe.b.scaled_add(-cfg.learning_rate, &gb);
    }
    probe
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub combinations: Vec<String>,
    pub n_train: usize,
    pub n_test: usize,
    pub chance: f64,
    /// Held-out accuracy on MAF features of all stages concatenated.
    pub maf_accuracy: f64,
    pub maa_accuracy: f64,
    pub maf_stage_accuracy: Vec<f64>,
    pub maa_stage_accuracy: Vec<f64>,
    /// Mean held-out accuracy on concatenated MAF features after shuffling labels.
    pub maf_permuted_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub sample_id: String,
    pub combination_id: usize,
    pub x: f64,
    pub y: f64,
}

fn rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

fn held_out(x: &Array2<f64>, y: &[usize], classes: usize, train: &[usize], test: &[usize], cfg: &ProbeConfig) -> f64 {
    let ytr: Vec<usize> = train.iter().map(|&i| y[i]).collect();
    let yte: Vec<usize> = test.iter().map(|&i| y[i]).collect();
    fit_probe(&rows(x, train), &ytr, classes, cfg).accuracy(&rows(x, test), &yte)
}

/// Probe accuracies from already-extracted features.
pub fn probe_report(f: &ProbeFeatures, cfg: &ProbeConfig) -> Result<ProbeReport> {
    let k = f.combinations.len();
    if k < 2 {
        return Err(Error::config(format!(
            "probe needs at least 2 modality combinations, found {k}"
        )));
    }
    let n = f.labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order.shuffle(&mut rng);
    let n_train = ((n as f64 * cfg.train_fraction).round() as usize).clamp(1, n.saturating_sub(1));
    let (train, test) = order.split_at(n_train);
    let y = &f.labels;
    let maf = f.maf_concat();
    let mut permuted = 0.0;
    for _ in 0..cfg.permutations {
        let mut yp = y.clone();
        yp.shuffle(&mut rng);
        permuted += held_out(&maf, &yp, k, train, test, cfg);
    }
    Ok(ProbeReport {
        combinations: f.combinations.clone(),
        n_train: train.len(),
        n_test: test.len(),
        chance: 1.0 / k as f64,
        maf_accuracy: held_out(&maf, y, k, train, test, cfg),
        maa_accuracy: held_out(&f.maa_concat(), y, k, train, test, cfg),
        maf_stage_accuracy: f.maf.iter().map(|x| held_out(x, y, k, train, test, cfg)).collect(),
        maa_stage_accuracy: f.maa.iter().map(|x| held_out(x, y, k, train, test, cfg)).collect(),
        maf_permuted_accuracy: permuted / cfg.permutations.max(1) as f64,
    })
}

/// Runs the probe on `dataset` and returns a 2D PCA embedding of the
/// concatenated MAF features.
pub fn token_probe(model: &Model, dataset: &Dataset, cfg: &ProbeConfig) -> Result<(ProbeReport, Vec<EmbeddingRow>)> {
    let f = extract_probe_features(model, dataset)?;
    let report = probe_report(&f, cfg)?;
    let xy = pca_2d(&f.maf_concat());
    let emb = f
        .sample_ids
        .iter()
        .zip(&f.labels)
        .enumerate()
        .map(|(i, (id, &c))| EmbeddingRow {
            sample_id: id.clone(),
            combination_id: c,
            x: xy[[i, 0]],
            y: xy[[i, 1]],
        })
        .collect();
    Ok((report, emb))
}

/// Projection onto the top two principal components (power iteration with
/// deflation; each axis signed so its largest loading is positive).
pub fn pca_2d(x: &Array2<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut out = Array2::zeros((n, 2));
    if n == 0 || d == 0 {
        return out;
    }
    let centred = x - &x.mean_axis(Axis(0)).expect("non-empty");
    let mut cov = centred.t().dot(&centred) / n as f64;
    for k in 0..2.min(d) {
        let mut v = Array1::from_shape_fn(d, |i| 1.0 + (i as f64 * 0.618).sin());
        let mut lambda = 0.0;
        for _ in 0..500 {
            let nv = cov.dot(&v);
            let norm = nv.dot(&nv).sqrt();
            if norm < 1e-300 {
                break;
            }
            lambda = norm;
            v = nv / norm;
        }
        let lead = v.iter().fold(0.0f64, |a, &b| if b.abs() > a.abs() { b } else { a });
        if lead < 0.0 {
            v.mapv_inplace(|t| -t);
        }
        out.slice_mut(s![.., k]).assign(&centred.dot(&v));
        let vv = v.view().insert_axis(Axis(1));
        cov = cov - lambda * vv.dot(&vv.t());
    }
    out
}

pub fn write_embedding_csv(path: &Path, rows: &[EmbeddingRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}
