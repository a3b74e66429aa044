//! Modality unifier.
//!
//! The MAF token feature goes through a two-layer MLP and a sigmoid to give
//! one confidence per modality slot. Valid modality grids are then fused as
//!
//! ```text
//! X_uni = (sum_i w_i * c_i * X_i) / (sum_i w_i) + x_MAA
//! ```
//!
//! where `w_i` is 1 for a valid grid and 0 for a padded one. Confidences are
//! scalars per modality, broadcast over every token, and are not
//! renormalised.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;

use crate::autograd::{gelu, sigmoid, Graph, Var};
use crate::error::{Error, Result};
use crate::modality::{Modality, Vocabulary};
use crate::params::{trunc_normal, ParamStore};
use crate::types::{HybridSequence, ModalityConfidence, TokenGrid};

/// Weights of the confidence MLP: `D -> D -> Modality::COUNT`.
///
/// The output layer has one column per modality kind, so its size does not
/// depend on the configured vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct UnifierParams {
    pub fc1_w: Array2<f64>,
    pub fc1_b: Array1<f64>,
    pub fc2_w: Array2<f64>,
    pub fc2_b: Array1<f64>,
}

impl UnifierParams {
    pub fn zeros(dim: usize) -> Self {
        Self {
            fc1_w: Array2::zeros((dim, dim)),
            fc1_b: Array1::zeros(dim),
            fc2_w: Array2::zeros((dim, Modality::COUNT)),
            fc2_b: Array1::zeros(Modality::COUNT),
        }
    }

    pub fn random<R: Rng>(rng: &mut R, dim: usize, std: f64) -> Self {
        Self {
            fc1_w: trunc_normal(rng, (dim, dim), std),
            fc1_b: trunc_normal(rng, (1, dim), std).row(0).to_owned(),
            fc2_w: trunc_normal(rng, (dim, Modality::COUNT), std),
            fc2_b: trunc_normal(rng, (1, Modality::COUNT), std).row(0).to_owned(),
        }
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |n: &str| {
            store
                .get(&format!("{prefix}.{n}"))
                .cloned()
                .ok_or_else(|| Error::config(format!("missing parameter {prefix}.{n}")))
        };
        Ok(Self {
            fc1_w: get("fc1.w")?,
            fc1_b: get("fc1.b")?.row(0).to_owned(),
            fc2_w: get("fc2.w")?,
            fc2_b: get("fc2.b")?.row(0).to_owned(),
        })
    }

    pub fn write_to(&self, store: &mut ParamStore, prefix: &str) {
        store.insert(format!("{prefix}.fc1.w"), self.fc1_w.clone());
        store.insert(
            format!("{prefix}.fc1.b"),
            self.fc1_b.clone().insert_axis(ndarray::Axis(0)),
        );
        store.insert(format!("{prefix}.fc2.w"), self.fc2_w.clone());
        store.insert(
            format!("{prefix}.fc2.b"),
            self.fc2_b.clone().insert_axis(ndarray::Axis(0)),
        );
    }

    pub fn dim(&self) -> usize {
        self.fc1_w.nrows()
    }
}

pub(crate) fn init_params<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, dim: usize) {
    store.linear(rng, &format!("{prefix}.fc1"), dim, dim, 0.02);
    store.linear(rng, &format!("{prefix}.fc2"), dim, Modality::COUNT, 0.02);
}

/// Sigmoid outputs for every modality kind, indexed by [`Modality::index`].
pub fn confidence_all(x_maf: ArrayView1<f64>, params: &UnifierParams) -> Array1<f64> {
    let h = (x_maf.dot(&params.fc1_w) + &params.fc1_b).mapv(gelu);
    (h.dot(&params.fc2_w) + &params.fc2_b).mapv(sigmoid)
}

/// Confidences for the vocabulary's modalities in canonical order.
pub fn modality_confidence(
    x_maf: ArrayView1<f64>,
    params: &UnifierParams,
    vocab: &Vocabulary,
) -> Result<ModalityConfidence> {
    if x_maf.len() != params.dim() {
        return Err(Error::config(format!(
            "MAF feature has length {}, MLP expects {}",
            x_maf.len(),
            params.dim()
        )));
    }
    let all = confidence_all(x_maf, params);
    Ok(ModalityConfidence {
        c: vocab.modalities().map(|m| all[m.index()]).collect(),
    })
}

/// Weighted average of aligned token grids plus the MAA row.
///
/// Grids with zero weight are skipped entirely, so their contents never
/// reach the output.
pub fn fuse_tokens(
    grids: &[ArrayView2<f64>],
    conf: &[f64],
    weights: &[f64],
    maa: ArrayView1<f64>,
) -> Result<Array2<f64>> {
    let first = grids
        .first()
        .ok_or_else(|| Error::config("unify needs at least one grid"))?;
    if conf.len() != grids.len() || weights.len() != grids.len() {
        return Err(Error::config(format!(
            "unify got {} grids, {} confidences, {} weights",
            grids.len(),
            conf.len(),
            weights.len()
        )));
    }
    if grids.iter().any(|g| g.dim() != first.dim()) {
        return Err(Error::config("unify grids differ in shape"));
    }
    if maa.len() != first.ncols() {
        return Err(Error::config("MAA width differs from token width"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Invariant(
            "unify called with no valid modality".into(),
        ));
    }
    let mut out = Array2::zeros(first.raw_dim());
    for ((g, &c), &w) in grids.iter().zip(conf).zip(weights) {
        if w != 0.0 {
            out.scaled_add(w * c / total, g);
        }
    }
    out += &maa;
    Ok(out)
}

/// Collapses a hybrid sequence into one unified grid. `c` holds one
/// confidence per grid, in grid order.
pub fn unify(seq: &HybridSequence, c: &ModalityConfidence) -> Result<TokenGrid> {
    let shape = seq
        .grids
        .first()
        .ok_or_else(|| Error::config("unify needs at least one grid"))?
        .grid_shape;
    if seq.grids.iter().any(|g| g.grid_shape != shape) {
        return Err(Error::config("unify grids differ in grid shape"));
    }
    let views: Vec<_> = seq.grids.iter().map(|g| g.tokens.view()).collect();
    let weights: Vec<f64> = seq
        .grids
        .iter()
        .map(|g| if g.valid { 1.0 } else { 0.0 })
        .collect();
    let tokens = fuse_tokens(&views, &c.c, &weights, seq.maa.view())?;
    TokenGrid::new(tokens, shape, None, true)
}

/// Graph version of the confidence MLP; returns the `1 x Modality::COUNT` row.
pub fn confidence_node(g: &mut Graph, store: &ParamStore, prefix: &str, maf: Var) -> Var {
    let h = g.linear(store, &format!("{prefix}.fc1"), maf);
    let h = g.gelu(h);
    let z = g.linear(store, &format!("{prefix}.fc2"), h);
    g.sigmoid(z)
}
