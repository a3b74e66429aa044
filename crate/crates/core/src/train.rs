//! Two-stage trainer: RGB-only pretraining, then multi-modal training with
//! modality dropout.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{apply_modality_dropout, restrict_to, Dataset, DropoutConfig};
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::model::Model;
use crate::params::ParamStore;
use crate::types::MultiModalSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    RgbPretrain,
    Multimodal,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb-pretrain" => Ok(Stage::RgbPretrain),
            "multimodal" => Ok(Stage::Multimodal),
            other => Err(Error::config(format!(
                "unknown stage `{other}` (expected rgb-pretrain or multimodal)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_iters: usize,
    /// Iterations at which the learning rate is multiplied by 0.1.
    pub decay_milestones: Vec<usize>,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub dropout: DropoutConfig,
    pub seed: u64,
    /// Allows the multi-modal stage to start from random weights.
    pub from_scratch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Multimodal,
            iterations: 200,
            batch_size: 4,
            base_lr: 1e-3,
            warmup_iters: 20,
            decay_milestones: vec![],
            weight_decay: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            grad_clip: Some(1.0),
            dropout: DropoutConfig::default(),
            seed: 0,
            from_scratch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::config("base_lr must be positive"));
        }
        if self.decay_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("decay_milestones must be strictly increasing"));
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return Err(Error::config("weight_decay must be >= 0 and betas in [0, 1)"));
        }
        if self.grad_clip.is_some_and(|c| c <= 0.0) {
            return Err(Error::config("grad_clip must be positive"));
        }
        self.dropout.validate()
    }

    /// Learning rate at 1-based iteration `i`.
    pub fn lr_at(&self, i: usize) -> f64 {
        if i < self.warmup_iters {
            return self.base_lr * i as f64 / self.warmup_iters as f64;
        }
        let passed = self.decay_milestones.iter().filter(|&&m| m <= i).count();
        self.base_lr * 0.1f64.powi(passed as i32)
    }
}

/// Adam moments with bias-correction step count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl OptimizerState {
    /// One decoupled-weight-decay Adam update.
    pub fn adamw_step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Array2<f64>>,
        lr: f64,
        cfg: &TrainConfig,
    ) {
        self.step += 1;
        let (b1, b2) = cfg.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let zero;
            let g = match grads.get(name) {
                Some(g) => g,
                None => {
                    zero = Array2::zeros(p.raw_dim());
                    &zero
                }
            };
            if !self.m.contains(name) {
                self.m.insert(name, Array2::zeros(p.raw_dim()));
                self.v.insert(name, Array2::zeros(p.raw_dim()));
            }
            let m = self.m.get_mut(name).expect("moment inserted");
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g);
            let v = self.v.get_mut(name).expect("moment inserted");
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let (m, v) = (&self.m.get(name).expect("m"), &self.v.get(name).expect("v"));
            ndarray::Zip::from(p).and(*m).and(*v).for_each(|p, &m, &v| {
                let update = (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
                *p -= lr * (update + cfg.weight_decay * *p);
            });
        }
    }
}

/// Rescales `grads` in place so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Array2<f64>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * k);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub lr: f64,
    pub total: f64,
    pub qfl: f64,
    pub ce: f64,
    pub giou: f64,
    pub l1: f64,
    pub grad_norm: f64,
}

/// Where a stage starts from.
#[derive(Debug, Clone, PartialEq)]
pub enum Start {
    /// Weights as given; random unless they came from a checkpoint.
    Fresh,
    /// Weights loaded from an earlier stage's checkpoint.
    Pretrained,
    /// Continue an interrupted run of this stage.
    Resume {
        iteration: usize,
        optimizer: OptimizerState,
    },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<LossRecord>,
    pub iteration: usize,
    pub optimizer: OptimizerState,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// The samples of 1-based iteration `i`, after stage restriction or
/// dropout. Each iteration draws from its own RNG streams so a resumed run
/// sees the same batches.
pub fn prepare_batch(datasets: &[Dataset], cfg: &TrainConfig, i: usize) -> Result<Vec<MultiModalSample>> {
    let nonempty: Vec<&Dataset> = datasets.iter().filter(|d| !d.is_empty()).collect();
    if nonempty.is_empty() {
        return Err(Error::config("training needs at least one non-empty dataset"));
    }
    let mut pick = stream_rng(cfg.seed, i as u64);
    let mut drop = stream_rng(cfg.dropout.rng_seed ^ cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15), i as u64);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let d = nonempty[pick.gen_range(0..nonempty.len())];
        let s = &d.samples[pick.gen_range(0..d.len())];
        let s = match cfg.stage {
            Stage::RgbPretrain => restrict_to(s, &[Modality::Rgb])?,
            Stage::Multimodal => apply_modality_dropout(s, &cfg.dropout, &mut drop),
        };
        batch.push(s);
    }
    Ok(batch)
}

/// Runs one stage to `cfg.iterations`, updating `model` in place.
pub fn train_stage(model: &mut Model, datasets: &[Dataset], cfg: &TrainConfig, start: Start) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (first, mut optimizer) = match start {
        Start::Fresh if cfg.stage == Stage::Multimodal && !cfg.from_scratch => {
            return Err(Error::config(
                "multimodal stage needs pretrained weights or from_scratch = true",
            ))
        }
        Start::Fresh | Start::Pretrained => (1, OptimizerState::default()),
        Start::Resume { iteration, optimizer } => (iteration + 1, optimizer),
    };
    let mut history = Vec::new();
    for i in first..=cfg.iterations {
        let batch = prepare_batch(datasets, cfg, i)?;
        let mut sum: BTreeMap<String, Array2<f64>> = BTreeMap::new();
        let mut rec = LossRecord {
            iteration: i,
            lr: cfg.lr_at(i),
            total: 0.0,
            qfl: 0.0,
            ce: 0.0,
            giou: 0.0,
            l1: 0.0,
            grad_norm: 0.0,
        };
        let k = 1.0 / batch.len() as f64;
        for s in &batch {
            let out = model.loss_and_grads(s)?;
            let t = out.terms;
            rec.total += k * t.total;
            rec.qfl += k * t.qfl;
            rec.ce += k * t.ce;
            rec.giou += k * t.giou;
            rec.l1 += k * t.l1;
            for (name, g) in out.grads {
                match sum.get_mut(&name) {
                    Some(acc) => acc.scaled_add(k, &g),
                    None => {
                        sum.insert(name, g * k);
                    }
                }
            }
        }
        let finite_grads = sum.values().all(|g| g.iter().all(|v| v.is_finite()));
        if !rec.total.is_finite() || !finite_grads {
            return Err(Error::NonFiniteLoss {
                iteration: i,
                sample_ids: batch.iter().map(|s| s.sample_id.clone()).collect(),
            });
        }
        rec.grad_norm = match cfg.grad_clip {
            Some(c) => clip_grad_norm(&mut sum, c),
            None => clip_grad_norm(&mut sum, f64::INFINITY),
        };
        optimizer.adamw_step(&mut model.params, &sum, rec.lr, cfg);
        history.push(rec);
    }
    Ok(TrainOutcome {
        history,
        iteration: cfg.iterations.max(first - 1),
        optimizer,
    })
}
