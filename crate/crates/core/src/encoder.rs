//! Unified multi-modal encoder.
//!
//! Each of the four stages embeds every modality with its own patch
//! embedding, prepends the stage's MAF and MAA tokens, runs shared pre-norm
//! transformer blocks over the hybrid sequence with padded modalities masked
//! out, and collapses the result into one unified grid. The unified grid is
//! both a pyramid level and the input to the next stage, where it is
//! re-embedded once per modality.

use std::collections::BTreeMap;

use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::modality::{Modality, Vocabulary};
use crate::params::ParamStore;
use crate::types::{HybridSequence, ImagePlane, MultiModalSample, TokenGrid};
use crate::unifier;

pub const NUM_STAGES: usize = 4;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    /// Downsampling applied by this stage's patch embedding.
    pub patch_stride: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_mlp_ratio() -> usize {
    2
}

/// Ablation toggles: disabling MAF fixes every confidence at 1 and
/// disabling MAA drops the additive abstractor term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub use_maf: bool,
    pub use_maa: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            use_maf: true,
            use_maa: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocabulary: Vocabulary,
    pub stages: Vec<StageConfig>,
    /// Largest (height, width) the positional tables cover.
    pub input_size: (usize, usize),
    #[serde(default)]
    pub fusion: FusionConfig,
}

impl EncoderConfig {
    /// Small four-stage encoder (strides 4/8/16/32, width 32) for desk-scale runs.
    pub fn toy(vocabulary: Vocabulary, input_size: (usize, usize)) -> Self {
        let stage = |patch_stride| StageConfig {
            patch_stride,
            embed_dim: 32,
            depth: 1,
            num_heads: 2,
            mlp_ratio: 2,
        };
        Self {
            vocabulary,
            stages: vec![stage(4), stage(2), stage(2), stage(2)],
            input_size,
            fusion: FusionConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != NUM_STAGES {
            return Err(Error::config(format!(
                "encoder needs exactly {NUM_STAGES} stages, got {}",
                self.stages.len()
            )));
        }
        for (k, st) in self.stages.iter().enumerate() {
            if st.patch_stride < 1 || (k > 0 && st.patch_stride < 2) {
                return Err(Error::config(format!(
                    "stage {k}: cumulative strides must strictly increase"
                )));
            }
            if st.embed_dim == 0 || st.num_heads == 0 || st.embed_dim % st.num_heads != 0 {
                return Err(Error::config(format!(
                    "stage {k}: embed_dim {} not divisible by num_heads {}",
                    st.embed_dim, st.num_heads
                )));
            }
            if st.mlp_ratio == 0 {
                return Err(Error::config(format!("stage {k}: mlp_ratio must be positive")));
            }
            if k > 0 && st.embed_dim < self.stages[k - 1].embed_dim {
                return Err(Error::config("embedding dims must be non-decreasing"));
            }
        }
        let total = self.total_stride();
        if self.input_size.0 == 0 || self.input_size.0 % total != 0 || self.input_size.1 % total != 0 {
            return Err(Error::config(format!(
                "input size {:?} must be a positive multiple of {total}",
                self.input_size
            )));
        }
        Ok(())
    }

    pub fn cumulative_strides(&self) -> Vec<usize> {
        self.stages
            .iter()
            .scan(1, |acc, st| {
                *acc *= st.patch_stride;
                Some(*acc)
            })
            .collect()
    }

    pub fn total_stride(&self) -> usize {
        self.stages.iter().map(|s| s.patch_stride).product()
    }

    fn max_grid(&self, stage: usize) -> (usize, usize) {
        let s = self.cumulative_strides()[stage];
        (self.input_size.0 / s, self.input_size.1 / s)
    }

    /// Input width of a modality's patch embedding at `stage`.
    fn embed_in_dim(&self, stage: usize, modality: Modality) -> Result<usize> {
        let st = &self.stages[stage];
        let c = if stage == 0 {
            self.vocabulary.channels(modality).ok_or_else(|| {
                Error::config(format!("modality `{modality}` not in encoder vocabulary"))
            })?
        } else {
            self.stages[stage - 1].embed_dim
        };
        Ok(st.patch_stride * st.patch_stride * c)
    }

    /// Randomly initialised parameters under the `enc.` prefix.
    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.validate()?;
        for (k, st) in self.stages.iter().enumerate() {
            let d = st.embed_dim;
            for m in self.vocabulary.modalities() {
                let p = embed_prefix(k, m);
                store.linear(rng, &p, self.embed_in_dim(k, m)?, d, INIT_STD);
                store.layer_norm(&format!("{p}.ln"), d);
            }
            let (gh, gw) = self.max_grid(k);
            store.trunc_normal(rng, format!("enc.s{k}.pos"), (gh * gw, d), INIT_STD);
            store.trunc_normal(rng, format!("enc.s{k}.maf"), (1, d), INIT_STD);
            store.trunc_normal(rng, format!("enc.s{k}.maa"), (1, d), INIT_STD);
            for j in 0..st.depth {
                let b = format!("enc.s{k}.blk{j}");
                let hidden = d * st.mlp_ratio;
                store.layer_norm(&format!("{b}.ln1"), d);
                store.linear(rng, &format!("{b}.attn.qkv"), d, 3 * d, INIT_STD);
                store.linear(rng, &format!("{b}.attn.proj"), d, d, INIT_STD);
                store.layer_norm(&format!("{b}.ln2"), d);
                store.linear(rng, &format!("{b}.mlp.fc1"), d, hidden, INIT_STD);
                store.linear(rng, &format!("{b}.mlp.fc2"), hidden, d, INIT_STD);
            }
            unifier::init_params(store, rng, &unifier_prefix(k), d);
        }
        Ok(())
    }

    /// Every parameter name the encoder reads.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (k, st) in self.stages.iter().enumerate() {
            for m in self.vocabulary.modalities() {
                let p = embed_prefix(k, m);
                names.extend([
                    format!("{p}.w"),
                    format!("{p}.b"),
                    format!("{p}.ln.g"),
                    format!("{p}.ln.b"),
                ]);
            }
            names.extend([
                format!("enc.s{k}.pos"),
                format!("enc.s{k}.maf"),
                format!("enc.s{k}.maa"),
            ]);
            for j in 0..st.depth {
                let b = format!("enc.s{k}.blk{j}");
                for layer in ["ln1", "attn.qkv", "attn.proj", "ln2", "mlp.fc1", "mlp.fc2"] {
                    let suffixes: &[&str] = if layer.starts_with("ln") {
                        &["g", "b"]
                    } else {
                        &["w", "b"]
                    };
                    for s in suffixes {
                        names.push(format!("{b}.{layer}.{s}"));
                    }
                }
            }
            let u = unifier_prefix(k);
            for layer in ["fc1", "fc2"] {
                names.push(format!("{u}.{layer}.w"));
                names.push(format!("{u}.{layer}.b"));
            }
        }
        names
    }
}

pub fn embed_prefix(stage: usize, m: Modality) -> String {
    format!("enc.s{stage}.embed.{}", m.name())
}

pub fn unifier_prefix(stage: usize) -> String {
    format!("enc.s{stage}.unifier")
}

/// Parameter groups used when reasoning about how the encoder scales with
/// the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub patch_embedding: usize,
    pub blocks: usize,
    pub unifier: usize,
    pub tokens_and_positions: usize,
    pub total: usize,
}

pub fn param_breakdown(store: &ParamStore) -> ParamBreakdown {
    let enc = |n: &str| n.starts_with("enc.");
    let patch_embedding = store.count_where(|n| enc(n) && n.contains(".embed."));
    let blocks = store.count_where(|n| enc(n) && n.contains(".blk"));
    let unifier = store.count_where(|n| enc(n) && n.contains(".unifier."));
    let total = store.count_where(enc);
    ParamBreakdown {
        patch_embedding,
        blocks,
        unifier,
        tokens_and_positions: total - patch_embedding - blocks - unifier,
        total,
    }
}

/// Row-major patch extraction: a `(h*w) x c` grid becomes
/// `(h/s * w/s) x (s*s*c)`.
pub fn patchify_index(h: usize, w: usize, c: usize, s: usize) -> Vec<usize> {
    let (oh, ow) = (h / s, w / s);
    let mut idx = Vec::with_capacity(oh * ow * s * s * c);
    for pi in 0..oh {
        for pj in 0..ow {
            for di in 0..s {
                for dj in 0..s {
                    let base = ((pi * s + di) * w + pj * s + dj) * c;
                    idx.extend(base..base + c);
                }
            }
        }
    }
    idx
}

fn pos_index(grid: (usize, usize), table: (usize, usize), d: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(grid.0 * grid.1 * d);
    for i in 0..grid.0 {
        for j in 0..grid.1 {
            let base = (i * table.1 + j) * d;
            idx.extend(base..base + d);
        }
    }
    idx
}

/// Graph-level patch embedding of one modality at one stage.
///
/// `input` is a `(h*w) x c` matrix laid out over an `h x w` grid.
pub fn patch_embed_node(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    stage: usize,
    modality: Modality,
    input: Var,
    shape: (usize, usize),
) -> Result<(Var, (usize, usize))> {
    if !cfg.vocabulary.contains(modality) {
        return Err(Error::config(format!(
            "modality `{modality}` not in encoder vocabulary"
        )));
    }
    let st = &cfg.stages[stage];
    let s = st.patch_stride;
    let (h, w) = shape;
    if h % s != 0 || w % s != 0 {
        return Err(Error::config(format!(
            "stage {stage}: input {h}x{w} not divisible by stride {s}"
        )));
    }
    let c = g.value(input).ncols();
    if s * s * c != cfg.embed_in_dim(stage, modality)? {
        return Err(Error::config(format!(
            "stage {stage}: modality `{modality}` input has {c} channels"
        )));
    }
    let out_shape = (h / s, w / s);
    let (mh, mw) = cfg.max_grid(stage);
    if out_shape.0 > mh || out_shape.1 > mw {
        return Err(Error::config(format!(
            "stage {stage}: grid {out_shape:?} exceeds positional table {mh}x{mw}"
        )));
    }
    let n = out_shape.0 * out_shape.1;
    let patches = if s == 1 {
        input
    } else {
        g.gather(input, patchify_index(h, w, c, s), (n, s * s * c))
    };
    let prefix = embed_prefix(stage, modality);
    let x = g.linear(store, &prefix, patches);
    let x = g.layer_norm_p(store, &format!("{prefix}.ln"), x);
    let pos = g.param(store, &format!("enc.s{stage}.pos"));
    let d = st.embed_dim;
    let pos = if out_shape == (mh, mw) {
        pos
    } else {
        g.gather(pos, pos_index(out_shape, (mh, mw), d), (n, d))
    };
    Ok((g.add(x, pos), out_shape))
}

/// Builds `[MAF, MAA, grid_1, ..., grid_m]` and its token mask.
pub fn assemble_hybrid_node(
    g: &mut Graph,
    store: &ParamStore,
    stage: usize,
    grids: &[Var],
    valid: &[bool],
) -> Result<(Var, Vec<bool>)> {
    let maf = g.param(store, &format!("enc.s{stage}.maf"));
    let maa = g.param(store, &format!("enc.s{stage}.maa"));
    let d = g.value(maf).ncols();
    if grids.iter().any(|&x| g.value(x).ncols() != d) {
        return Err(Error::config(format!(
            "stage {stage}: token grids must have width {d}"
        )));
    }
    let mut mask = vec![true, true];
    for (&x, &v) in grids.iter().zip(valid) {
        mask.extend(std::iter::repeat(v).take(g.value(x).nrows()));
    }
    let mut parts = vec![maf, maa];
    parts.extend_from_slice(grids);
    Ok((g.concat_rows(&parts), mask))
}

/// One pre-norm transformer block; masked rows are excluded as keys and
/// zeroed on output.
pub fn block_node(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    num_heads: usize,
    x: Var,
    mask: &[bool],
) -> Var {
    let d = g.value(x).ncols();
    let hd = d / num_heads;
    let h = g.layer_norm_p(store, &format!("{prefix}.ln1"), x);
    let qkv = g.linear(store, &format!("{prefix}.attn.qkv"), h);
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(num_heads);
    for i in 0..num_heads {
        let q = g.slice_cols(qkv, i * hd, hd);
        let k = g.slice_cols(qkv, d + i * hd, hd);
        let v = g.slice_cols(qkv, 2 * d + i * hd, hd);
        let s = g.matmul_nt(q, k);
        let s = g.scale(s, scale);
        let p = g.softmax_rows(s, Some(mask));
        heads.push(g.matmul(p, v));
    }
    let o = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)
    };
    let o = g.linear(store, &format!("{prefix}.attn.proj"), o);
    let x = g.add(x, o);
    let h = g.layer_norm_p(store, &format!("{prefix}.ln2"), x);
    let h = g.linear(store, &format!("{prefix}.mlp.fc1"), h);
    let h = g.gelu(h);
    let h = g.linear(store, &format!("{prefix}.mlp.fc2"), h);
    let x = g.add(x, h);
    let factors = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    g.row_scale(x, factors)
}

pub fn stage_blocks_node(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    stage: usize,
    mut x: Var,
    mask: &[bool],
) -> Result<Var> {
    if mask.len() < 2 || !mask[0] || !mask[1] {
        return Err(Error::Invariant(
            "MAF and MAA positions must be unmasked".into(),
        ));
    }
    if mask.len() > 2 && !mask[2..].iter().any(|&m| m) {
        return Err(Error::Invariant(
            "hybrid sequence has no valid modality tokens".into(),
        ));
    }
    let st = &cfg.stages[stage];
    for j in 0..st.depth {
        x = block_node(g, store, &format!("enc.s{stage}.blk{j}"), st.num_heads, x, mask);
    }
    Ok(x)
}

/// Graph handles produced by one encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub pyramid: Vec<Var>,
    pub grid_shapes: Vec<(usize, usize)>,
    /// Post-block MAF feature per stage (`1 x D`).
    pub maf: Vec<Var>,
    /// Post-block MAA feature per stage (`1 x D`).
    pub maa: Vec<Var>,
    /// Sigmoid confidence row per stage (`1 x Modality::COUNT`), when MAF is on.
    pub confidence: Vec<Option<Var>>,
}

/// Places each vocabulary plane on the tape as a `(H*W) x C` matrix.
pub fn plane_inputs(
    g: &mut Graph,
    cfg: &EncoderConfig,
    sample: &MultiModalSample,
    requires_grad: bool,
) -> Result<BTreeMap<Modality, Var>> {
    let mut out = BTreeMap::new();
    for m in cfg.vocabulary.modalities() {
        let plane = sample.planes.get(&m).ok_or_else(|| {
            Error::config(format!(
                "sample `{}` lacks modality `{m}`; pad it to the vocabulary first",
                sample.sample_id
            ))
        })?;
        let mat = plane.to_pixel_matrix();
        let v = if requires_grad {
            g.input(mat)
        } else {
            g.constant(mat)
        };
        out.insert(m, v);
    }
    Ok(out)
}

/// Runs all four stages on `planes` and returns the unified pyramid.
pub fn encode_node(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    sample: &MultiModalSample,
    planes: &BTreeMap<Modality, Var>,
) -> Result<EncoderOutput> {
    sample.check_vocabulary(&cfg.vocabulary)?;
    let (h, w) = sample.resolution()?;
    let total = cfg.total_stride();
    if h % total != 0 || w % total != 0 {
        return Err(Error::config(format!(
            "sample `{}` is {h}x{w}; pad to a multiple of {total} first",
            sample.sample_id
        )));
    }
    let modalities: Vec<Modality> = cfg.vocabulary.modalities().collect();
    let valid: Vec<bool> = modalities.iter().map(|&m| sample.is_valid(m)).collect();
    if !valid.iter().any(|&v| v) {
        return Err(Error::Invariant(format!(
            "sample `{}` has no valid modality in the vocabulary",
            sample.sample_id
        )));
    }
    let weights: Vec<f64> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let conf_cols: Vec<usize> = modalities.iter().map(|m| m.index()).collect();

    let mut out = EncoderOutput {
        pyramid: Vec::new(),
        grid_shapes: Vec::new(),
        maf: Vec::new(),
        maa: Vec::new(),
        confidence: Vec::new(),
    };
    let mut prev: Option<(Var, (usize, usize))> = None;
    for k in 0..NUM_STAGES {
        let mut grids = Vec::with_capacity(modalities.len());
        let mut shape = (0, 0);
        for &m in &modalities {
            let (input, in_shape) = match prev {
                None => (planes[&m], (h, w)),
                Some(p) => p,
            };
            let (tok, s) = patch_embed_node(g, store, cfg, k, m, input, in_shape)?;
            shape = s;
            grids.push(tok);
        }
        let (seq, mask) = assemble_hybrid_node(g, store, k, &grids, &valid)?;
        let seq = stage_blocks_node(g, store, cfg, k, seq, &mask)?;
        let n = shape.0 * shape.1;
        let maf = g.slice_rows(seq, 0, 1);
        let maa = g.slice_rows(seq, 1, 1);
        let token_vars: Vec<Var> = (0..modalities.len())
            .map(|i| g.slice_rows(seq, 2 + i * n, n))
            .collect();
        let conf = if cfg.fusion.use_maf {
            Some(unifier::confidence_node(g, store, &unifier_prefix(k), maf))
        } else {
            None
        };
        let uni = g.unify(
            &token_vars,
            &weights,
            conf.map(|c| (c, conf_cols.clone())),
            cfg.fusion.use_maa.then_some(maa),
        );
        out.pyramid.push(uni);
        out.grid_shapes.push(shape);
        out.maf.push(maf);
        out.maa.push(maa);
        out.confidence.push(conf);
        prev = Some((uni, shape));
    }
    Ok(out)
}

/// Input to [`patch_embed`]: a raw plane (stage 1) or a unified grid.
pub enum PatchInput<'a> {
    Plane(&'a ImagePlane),
    Grid(&'a TokenGrid),
}

/// Embeds one modality at `stage`, returning its token grid.
pub fn patch_embed(
    store: &ParamStore,
    cfg: &EncoderConfig,
    stage: usize,
    modality: Modality,
    input: PatchInput<'_>,
    valid: bool,
) -> Result<TokenGrid> {
    let mut g = Graph::new();
    let (x, shape) = match input {
        PatchInput::Plane(p) => (g.constant(p.to_pixel_matrix()), (p.height(), p.width())),
        PatchInput::Grid(t) => (g.constant(t.tokens.clone()), t.grid_shape),
    };
    let (tok, out_shape) = patch_embed_node(&mut g, store, cfg, stage, modality, x, shape)?;
    TokenGrid::new(g.value(tok).clone(), out_shape, Some(modality), valid)
}

/// Prepends the stage's learnable MAF/MAA tokens to `grids`.
pub fn assemble_hybrid(store: &ParamStore, stage: usize, grids: Vec<TokenGrid>) -> Result<HybridSequence> {
    let name = |t: &str| format!("enc.s{stage}.{t}");
    let maf = store
        .get(&name("maf"))
        .ok_or_else(|| Error::config(format!("stage {stage} has no MAF token")))?
        .row(0)
        .to_owned();
    let maa = store
        .get(&name("maa"))
        .ok_or_else(|| Error::config(format!("stage {stage} has no MAA token")))?
        .row(0)
        .to_owned();
    let d = maf.len();
    if let Some(bad) = grids.iter().find(|t| t.dim() != d) {
        return Err(Error::config(format!(
            "grid width {} differs from stage width {d}",
            bad.dim()
        )));
    }
    let mut token_mask = vec![true, true];
    for t in &grids {
        token_mask.extend(std::iter::repeat(t.valid).take(t.len()));
    }
    Ok(HybridSequence {
        maf,
        maa,
        grids,
        token_mask,
    })
}

/// Applies the stage's transformer blocks to a hybrid sequence.
pub fn run_stage_blocks(
    store: &ParamStore,
    cfg: &EncoderConfig,
    stage: usize,
    seq: &HybridSequence,
) -> Result<HybridSequence> {
    let mut g = Graph::new();
    let x = g.constant(seq.to_matrix());
    let y = stage_blocks_node(&mut g, store, cfg, stage, x, &seq.token_mask)?;
    Ok(seq.with_matrix(g.value(y)))
}

/// Array-level result of [`encode`].
#[derive(Debug, Clone)]
pub struct EncodedSample {
    pub pyramid: Vec<TokenGrid>,
    pub maf: Vec<Array1<f64>>,
    pub maa: Vec<Array1<f64>>,
    pub confidence: Vec<Option<Array1<f64>>>,
}

pub fn encode(store: &ParamStore, cfg: &EncoderConfig, sample: &MultiModalSample) -> Result<EncodedSample> {
    let mut g = Graph::new();
    let planes = plane_inputs(&mut g, cfg, sample, false)?;
    let out = encode_node(&mut g, store, cfg, sample, &planes)?;
    let row = |g: &Graph, v: Var| g.value(v).row(0).to_owned();
    Ok(EncodedSample {
        pyramid: out
            .pyramid
            .iter()
            .zip(&out.grid_shapes)
            .map(|(&v, &s)| TokenGrid::new(g.value(v).clone(), s, None, true))
            .collect::<Result<_>>()?,
        maf: out.maf.iter().map(|&v| row(&g, v)).collect(),
        maa: out.maa.iter().map(|&v| row(&g, v)).collect(),
        confidence: out
            .confidence
            .iter()
            .map(|c| c.map(|v| row(&g, v)))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_modal_cfg() -> EncoderConfig {
        let vocab = Vocabulary::with_defaults(&[Modality::Rgb, Modality::Ir]).unwrap();
        EncoderConfig::toy(vocab, (64, 64))
    }

    fn store_for(cfg: &EncoderConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        cfg.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap();
        store
    }

    fn random_plane(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ImagePlane {
        ImagePlane::new(ndarray::Array3::from_shape_fn((h, w, c), |_| {
            rng.gen_range(-1.0..1.0)
        }))
        .unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = two_modal_cfg();
        cfg.validate().unwrap();
        assert_eq!(cfg.cumulative_strides(), vec![4, 8, 16, 32]);
        cfg.stages.pop();
        assert!(cfg.validate().is_err());
        let mut cfg = two_modal_cfg();
        cfg.stages[1].num_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = two_modal_cfg();
        cfg.stages[2].patch_stride = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = two_modal_cfg();
        cfg.stages[0].embed_dim = 64;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn patchify_index_layout() {
        // 4x4 grid, one channel, stride 2: first patch holds pixels 0,1,4,5.
        let idx = patchify_index(4, 4, 1, 2);
        assert_eq!(&idx[..4], &[0, 1, 4, 5]);
        assert_eq!(&idx[12..], &[10, 11, 14, 15]);
    }

    #[test]
    fn patch_embed_shapes() {
        let cfg = two_modal_cfg();
        let store = store_for(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let plane = random_plane(&mut rng, 64, 64, 3);
        let t = patch_embed(&store, &cfg, 0, Modality::Rgb, PatchInput::Plane(&plane), true).unwrap();
        assert_eq!(t.grid_shape, (16, 16));
        assert_eq!(t.len(), 256);
        assert_eq!(t.dim(), 32);
        let t2 = patch_embed(&store, &cfg, 1, Modality::Rgb, PatchInput::Grid(&t), true).unwrap();
        assert_eq!(t2.grid_shape, (8, 8));
    }

    #[test]
    fn patch_embed_rejects_unknown_modality() {
        let cfg = two_modal_cfg();
        let store = store_for(&cfg, 1);
        let plane = ImagePlane::zeros(64, 64, 1);
        let r = patch_embed(&store, &cfg, 0, Modality::Event, PatchInput::Plane(&plane), true);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn modality_specific_weights_differ() {
        let vocab = Vocabulary::new([
            crate::modality::ModalitySpec { modality: Modality::Ir, channels: 1 },
            crate::modality::ModalitySpec { modality: Modality::Depth, channels: 1 },
        ])
        .unwrap();
        let cfg = EncoderConfig::toy(vocab, (32, 32));
        let store = store_for(&cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let plane = random_plane(&mut rng, 32, 32, 1);
        let a = patch_embed(&store, &cfg, 0, Modality::Ir, PatchInput::Plane(&plane), true).unwrap();
        let b = patch_embed(&store, &cfg, 0, Modality::Depth, PatchInput::Plane(&plane), true).unwrap();
        assert_ne!(a.tokens, b.tokens);
        assert_ne!(
            store.get("enc.s0.embed.ir.w").unwrap(),
            store.get("enc.s0.embed.depth.w").unwrap()
        );
    }

    fn grid(n: usize, d: usize, v: f64, valid: bool) -> TokenGrid {
        TokenGrid::new(Array2::from_elem((n, d), v), (n, 1), Some(Modality::Rgb), valid).unwrap()
    }

    #[test]
    fn hybrid_layout_and_mask() {
        let cfg = two_modal_cfg();
        let store = store_for(&cfg, 5);
        let d = 32;
        let seq = assemble_hybrid(&store, 0, vec![grid(4, d, 1.0, true), grid(4, d, 2.0, false)]).unwrap();
        assert_eq!(seq.len(), 10);
        let want: Vec<bool> = (0..10).map(|i| i < 6).collect();
        assert_eq!(seq.token_mask, want);
        assert_eq!(seq.maf.view(), store.get("enc.s0.maf").unwrap().row(0));

        let uni = assemble_hybrid(&store, 0, vec![grid(4, d, 1.0, true)]).unwrap();
        assert_eq!(uni.len(), 6);
        assert!(uni.token_mask.iter().all(|&m| m));

        assert!(assemble_hybrid(&store, 0, vec![grid(4, d + 1, 1.0, true)]).is_err());
    }

    #[test]
    fn masked_values_do_not_reach_valid_outputs() {
        let cfg = two_modal_cfg();
        let store = store_for(&cfg, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut rnd = |n: usize, valid| {
            TokenGrid::new(
                Array2::from_shape_fn((n, 32), |_| rng.gen_range(-1.0..1.0)),
                (n, 1),
                Some(Modality::Rgb),
                valid,
            )
            .unwrap()
        };
        let a = rnd(6, true);
        let b1 = rnd(6, false);
        let b2 = rnd(6, false);
        let s1 = assemble_hybrid(&store, 0, vec![a.clone(), b1]).unwrap();
        let s2 = assemble_hybrid(&store, 0, vec![a, b2]).unwrap();
        let o1 = run_stage_blocks(&store, &cfg, 0, &s1).unwrap();
        let o2 = run_stage_blocks(&store, &cfg, 0, &s2).unwrap();
        assert_eq!(o1.maf, o2.maf);
        assert_eq!(o1.maa, o2.maa);
        assert_eq!(o1.grids[0].tokens, o2.grids[0].tokens);
        assert!(o1.grids[1].tokens.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn appended_masked_grid_matches_truncated_sequence() {
        let cfg = two_modal_cfg();
        let store = store_for(&cfg, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = TokenGrid::new(
            Array2::from_shape_fn((9, 32), |_| rng.gen_range(-1.0..1.0)),
            (3, 3),
            Some(Modality::Rgb),
            true,
        )
        .unwrap();
        let pad = TokenGrid::new(
            Array2::from_shape_fn((9, 32), |_| rng.gen_range(-5.0..5.0)),
            (3, 3),
            Some(Modality::Ir),
            false,
        )
        .unwrap();
        let short = run_stage_blocks(&store, &cfg, 0, &assemble_hybrid(&store, 0, vec![a.clone()]).unwrap()).unwrap();
        let long = run_stage_blocks(&store, &cfg, 0, &assemble_hybrid(&store, 0, vec![a, pad]).unwrap()).unwrap();
        let diff = (&short.to_matrix() - &long.to_matrix().slice(ndarray::s![..11, ..]))
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-6, "max diff {diff}");
    }

    #[test]
    fn zero_depth_is_identity() {
        let mut cfg = two_modal_cfg();
        cfg.stages[0].depth = 0;
        let store = store_for(&cfg, 10);
        let seq = assemble_hybrid(&store, 0, vec![grid(4, 32, 0.5, true)]).unwrap();
        assert_eq!(run_stage_blocks(&store, &cfg, 0, &seq).unwrap(), seq);
    }
}
