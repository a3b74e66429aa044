//! Reverse-mode differentiation over dense row-major matrices.
//!
//! Every value on the tape is an `Array2<f64>`; vectors are `1 x n` rows and
//! scalars are `1 x 1`. A [`Graph`] is built per forward pass and consumed by
//! [`Graph::backward`].

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis, Zip};

use crate::params::ParamStore;
use crate::unifier;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Gather index meaning "emit zero" (padding).
pub const ZERO_INDEX: usize = usize::MAX;

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a . b^T`
    MatMulNt(Var, Var),
    Add(Var, Var),
    /// `a + b` with `b` a `1 x n` row broadcast over rows.
    AddRow(Var, Var),
    Mul(Var, Var),
    /// `a * s` with `s` a `1 x 1` node.
    ScaleBy(Var, Var),
    Scale(Var, f64),
    RowScale(Var, Vec<f64>),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Gather {
        src: Var,
        index: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Unify {
        grids: Vec<Var>,
        weights: Vec<f64>,
        conf: Option<(Var, Vec<usize>)>,
        maa: Option<Var>,
    },
    /// Scalar with local gradients computed during the forward pass.
    Custom(Vec<(Var, Array2<f64>)>),
    SumAll(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// A leaf that receives a gradient.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a named parameter once per graph.
    ///
    /// Panics if the store lacks `name`; models validate their stores up front.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let value = store
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"))
            .clone();
        let v = self.push(value, Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMulNt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a 1 x n row");
        let value = self.value(a) + self.value(row);
        let ng = self.ng(&[a, row]);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let value = self.value(a) * k;
        let ng = self.ng(&[a, s]);
        self.push(value, Op::ScaleBy(a, s), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let ng = self.ng(&[a]);
        self.push(value, Op::Scale(a, k), ng)
    }

    /// Multiplies row `i` by `factors[i]`.
    pub fn row_scale(&mut self, a: Var, factors: Vec<f64>) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(value.nrows(), factors.len());
        for (mut row, &f) in value.axis_iter_mut(Axis(0)).zip(&factors) {
            if f == 0.0 {
                row.fill(0.0);
            } else {
                row *= f;
            }
        }
        let ng = self.ng(&[a]);
        self.push(value, Op::RowScale(a, factors), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let ng = self.ng(&[a]);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let ng = self.ng(&[a]);
        self.push(value, Op::Sigmoid(a), ng)
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` (`1 x n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.axis_iter_mut(Axis(0)) {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Row-wise softmax. Columns with `key_mask[j] == false` get probability
    /// exactly zero and never enter the max or the normaliser.
    pub fn softmax_rows(&mut self, x: Var, key_mask: Option<&[bool]>) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.axis_iter_mut(Axis(0)) {
            let keep = |j: usize| key_mask.map_or(true, |m| m[j]);
            let max = row
                .iter()
                .enumerate()
                .filter(|(j, _)| keep(*j))
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                if keep(j) {
                    *v = (*v - max).exp();
                    total += *v;
                } else {
                    *v = 0.0;
                }
            }
            if total > 0.0 {
                row.mapv_inplace(|v| v / total);
            }
        }
        let ng = self.ng(&[x]);
        self.push(value, Op::Softmax(x), ng)
    }

    /// `out.flat[k] = src.flat[index[k]]`, or zero for [`ZERO_INDEX`].
    pub fn gather(&mut self, src: Var, index: Vec<usize>, shape: (usize, usize)) -> Var {
        assert_eq!(index.len(), shape.0 * shape.1);
        let sv = self.value(src);
        let flat = sv.as_slice().expect("standard layout");
        let data: Vec<f64> = index
            .iter()
            .map(|&i| if i == ZERO_INDEX { 0.0 } else { flat[i] })
            .collect();
        let value = Array2::from_shape_vec(shape, data).expect("gather shape");
        let ng = self.ng(&[src]);
        self.push(value, Op::Gather { src, index }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows widths");
        let ng = self.ng(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols heights");
        let ng = self.ng(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ng = self.ng(&[a]);
        self.push(value, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(&[a]);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    /// Weighted modality fusion; see [`unifier::fuse_tokens`].
    ///
    /// `conf` is a `1 x K` row together with the column each grid reads; when
    /// absent every confidence is 1. When `maa` is absent nothing is added.
    pub fn unify(
        &mut self,
        grids: &[Var],
        weights: &[f64],
        conf: Option<(Var, Vec<usize>)>,
        maa: Option<Var>,
    ) -> Var {
        let c: Vec<f64> = match &conf {
            Some((cv, cols)) => cols.iter().map(|&j| self.value(*cv)[[0, j]]).collect(),
            None => vec![1.0; grids.len()],
        };
        let d = self.value(grids[0]).ncols();
        let maa_row = match maa {
            Some(m) => self.value(m).row(0).to_owned(),
            None => ndarray::Array1::zeros(d),
        };
        let views: Vec<_> = grids.iter().map(|&g| self.value(g).view()).collect();
        let value = unifier::fuse_tokens(&views, &c, weights, maa_row.view())
            .expect("unify inputs checked by caller");
        let mut deps = grids.to_vec();
        if let Some((cv, _)) = &conf {
            deps.push(*cv);
        }
        if let Some(m) = maa {
            deps.push(m);
        }
        let ng = self.ng(&deps);
        self.push(
            value,
            Op::Unify {
                grids: grids.to_vec(),
                weights: weights.to_vec(),
                conf,
                maa,
            },
            ng,
        )
    }

    /// A scalar node whose value and local gradients were computed elsewhere.
    pub fn custom_scalar(&mut self, value: f64, local: Vec<(Var, Array2<f64>)>) -> Var {
        let deps: Vec<Var> = local.iter().map(|(v, _)| *v).collect();
        let ng = self.ng(&deps);
        self.push(Array2::from_elem((1, 1), value), Op::Custom(local), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(value, Op::SumAll(a), ng)
    }

    /// Fully connected layer `x . W + b` using parameters `{prefix}.w`, `{prefix}.b`.
    pub fn linear(&mut self, store: &ParamStore, prefix: &str, x: Var) -> Var {
        let w = self.param(store, &format!("{prefix}.w"));
        let b = self.param(store, &format!("{prefix}.b"));
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn layer_norm_p(&mut self, store: &ParamStore, prefix: &str, x: Var) -> Var {
        let g = self.param(store, &format!("{prefix}.g"));
        let b = self.param(store, &format!("{prefix}.b"));
        self.layer_norm(x, g, b)
    }

    /// Names and nodes of every parameter bound in this graph.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradients of every bound parameter, zero-filled when unreached.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Array2<f64>> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(self.value(v).raw_dim()));
                (name.clone(), g)
            })
            .collect()
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, g.dot(&val(*b).t()));
                }
                if want(*b) {
                    accumulate(grads, *b, val(*a).t().dot(g));
                }
            }
            Op::MatMulNt(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, g.dot(val(*b)));
                }
                if want(*b) {
                    accumulate(grads, *b, g.t().dot(val(*a)));
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if want(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::AddRow(a, r) => {
                if want(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if want(*r) {
                    accumulate(grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, g * val(*b));
                }
                if want(*b) {
                    accumulate(grads, *b, g * val(*a));
                }
            }
            Op::ScaleBy(a, sv) => {
                if want(*a) {
                    accumulate(grads, *a, g * val(*sv)[[0, 0]]);
                }
                if want(*sv) {
                    let d = (g * val(*a)).sum();
                    accumulate(grads, *sv, Array2::from_elem((1, 1), d));
                }
            }
            Op::Scale(a, k) => accumulate(grads, *a, g * *k),
            Op::RowScale(a, factors) => {
                let mut d = g.clone();
                for (mut row, &f) in d.axis_iter_mut(Axis(0)).zip(factors) {
                    if f == 0.0 {
                        row.fill(0.0);
                    } else {
                        row *= f;
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::Gelu(a) => {
                let mut d = val(*a).mapv(gelu_grad);
                d *= g;
                accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = node.value.mapv(|y| y * (1.0 - y));
                d *= g;
                accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if want(*gamma) {
                    accumulate(
                        grads,
                        *gamma,
                        (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                }
                if want(*beta) {
                    accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if want(*x) {
                    let n = xhat.ncols() as f64;
                    let dxhat = g * val(*gamma);
                    let mut dx = Array2::zeros(xhat.raw_dim());
                    for (r, mut out) in dx.axis_iter_mut(Axis(0)).enumerate() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_xh = dh.dot(&xh);
                        let is = inv_std[r];
                        Zip::from(&mut out).and(&dh).and(&xh).for_each(|o, &d, &h| {
                            *o = is / n * (n * d - sum_dh - h * sum_dh_xh);
                        });
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut d = g * y;
                for (mut row, yr) in d.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))) {
                    let dot = row.sum();
                    Zip::from(&mut row).and(&yr).for_each(|o, &p| *o -= p * dot);
                }
                accumulate(grads, *a, d);
            }
            Op::Gather { src, index } => {
                let mut d = Array2::zeros(val(*src).raw_dim());
                {
                    let flat = d.as_slice_mut().expect("standard layout");
                    for (&i, &gv) in index.iter().zip(g.iter()) {
                        if i != ZERO_INDEX {
                            flat[i] += gv;
                        }
                    }
                }
                accumulate(grads, *src, d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).nrows();
                    if want(p) {
                        accumulate(grads, p, g.slice(s![off..off + n, ..]).to_owned());
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).ncols();
                    if want(p) {
                        accumulate(grads, p, g.slice(s![.., off..off + n]).to_owned());
                    }
                    off += n;
                }
            }
            Op::SliceRows(a, start) => {
                let mut d = Array2::zeros(val(*a).raw_dim());
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                accumulate(grads, *a, d);
            }
            Op::SliceCols(a, start) => {
                let mut d = Array2::zeros(val(*a).raw_dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                accumulate(grads, *a, d);
            }
            Op::Unify {
                grids,
                weights,
                conf,
                maa,
            } => {
                let total: f64 = weights.iter().sum();
                let mut dconf: Option<Array2<f64>> = None;
                if let Some((cv, _)) = conf {
                    if want(*cv) {
                        dconf = Some(Array2::zeros(val(*cv).raw_dim()));
                    }
                }
                for (i, &x) in grids.iter().enumerate() {
                    if weights[i] == 0.0 {
                        continue;
                    }
                    let ci = match conf {
                        Some((cv, cols)) => val(*cv)[[0, cols[i]]],
                        None => 1.0,
                    };
                    if want(x) {
                        accumulate(grads, x, g * (weights[i] * ci / total));
                    }
                    if let (Some(dc), Some((_, cols))) = (dconf.as_mut(), conf) {
                        let s: f64 = Zip::from(g)
                            .and(val(x))
                            .fold(0.0, |acc, &a, &b| acc + a * b);
                        dc[[0, cols[i]]] += weights[i] / total * s;
                    }
                }
                if let (Some(dc), Some((cv, _))) = (dconf, conf) {
                    accumulate(grads, *cv, dc);
                }
                if let Some(m) = maa {
                    if want(*m) {
                        accumulate(grads, *m, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                }
            }
            Op::Custom(local) => {
                let k = g[[0, 0]];
                for (v, lg) in local {
                    if want(*v) {
                        accumulate(grads, *v, lg * k);
                    }
                }
            }
            Op::SumAll(a) => {
                accumulate(grads, *a, Array2::from_elem(val(*a).raw_dim(), g[[0, 0]]));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
    match &mut grads[v.0] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
