//! A small reverse-mode tape over dense `f64` matrices.
//!
//! Only the operations the encoder, predictor and probes need are provided.
//! Attention is a fused node: queries and keys/values are stacked for a whole
//! batch and `AttnGroup`s say which query rows may look at which key rows, so
//! a batch of images (or a set of independent mask queries) shares one graph
//! without any cross-talk between groups.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Query rows `queries` attend to key/value rows `keys`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnGroup {
    pub queries: Range<usize>,
    pub keys: Range<usize>,
}

enum Op {
    Input,
    Param(String),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    RowScale(Var, Array1<f64>),
    RmsNorm {
        x: Var,
        weight: Var,
        inv_rms: Array1<f64>,
    },
    Gelu(Var),
    Rope {
        x: Var,
        cos: Array2<f64>,
        sin: Array2<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: Vec<AttnGroup>,
        probs: Vec<Vec<Array2<f64>>>,
    },
    SoftCrossEntropy {
        logits: Var,
        targets: Array2<f64>,
        tau: f64,
        probs: Array2<f64>,
    },
    WeightedSum(Var, Array2<f64>),
    MeanRows(Var),
    L2NormalizeRows(Var, Array1<f64>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation so it can be differentiated.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    attention_calls: usize,
    param_nodes: HashMap<String, Var>,
    namespace: String,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    params: BTreeMap<String, usize>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a named parameter; `None` when the loss does not depend on it.
    pub fn param(&self, name: &str) -> Option<&Array2<f64>> {
        self.params.get(name).and_then(|&i| self.grads[i].as_ref())
    }

    /// All parameter gradients, keyed by name. Parameters the loss does not
    /// reach are reported as exact zeros of the right shape.
    pub fn into_param_map(self, shapes: &Tape) -> BTreeMap<String, Array2<f64>> {
        let mut out = BTreeMap::new();
        let mut grads = self.grads;
        for (name, idx) in self.params {
            let g = grads[idx]
                .take()
                .unwrap_or_else(|| Array2::zeros(shapes.nodes[idx].value.raw_dim()));
            out.insert(name, g);
        }
        out
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            attention_calls: 0,
            param_nodes: HashMap::new(),
            namespace: String::new(),
        }
    }

    /// A tape whose parameters do not require gradients (inference only).
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of attention nodes recorded so far.
    pub fn attention_calls(&self) -> usize {
        self.attention_calls
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Prefix prepended to parameter names registered from now on. Lets two
    /// copies of the same network (student and teacher) share one tape.
    pub fn set_namespace(&mut self, prefix: &str) {
        self.namespace = prefix.to_string();
    }

    /// Leaf for a named parameter. Repeated calls with the same name return
    /// the same node, so gradients of shared parameters accumulate.
    pub fn param(&mut self, name: &str, value: &Array2<f64>) -> Var {
        let key = format!("{}{name}", self.namespace);
        if let Some(&v) = self.param_nodes.get(&key) {
            return v;
        }
        let ng = self.grad_enabled;
        let v = self.push(value.clone(), Op::Param(key.clone()), ng);
        self.param_nodes.insert(key, v);
        v
    }

    /// `a · b`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · wᵀ`, the bias-free linear map with weight `w: out × in`.
    pub fn linear(&mut self, a: Var, w: Var) -> Var {
        let v = self.value(a).dot(&self.value(w).t());
        let ng = self.ng(a) || self.ng(w);
        self.push(v, Op::MatMulT(a, w), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).dim(),
            self.value(b).dim(),
            "add: shape mismatch"
        );
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    /// Multiplies row `i` by `scales[i]`.
    pub fn row_scale(&mut self, a: Var, scales: Array1<f64>) -> Var {
        let mut v = self.value(a).clone();
        for (mut row, &c) in v.axis_iter_mut(Axis(0)).zip(scales.iter()) {
            row *= c;
        }
        let ng = self.ng(a);
        self.push(v, Op::RowScale(a, scales), ng)
    }

    /// Root-mean-square normalisation of each row with a learned gain `weight: 1 × d`.
    pub fn rms_norm(&mut self, x: Var, weight: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let wv = self.value(weight).row(0).to_owned();
        let d = xv.ncols() as f64;
        let inv_rms: Array1<f64> = xv
            .axis_iter(Axis(0))
            .map(|r| 1.0 / (r.dot(&r) / d + eps).sqrt())
            .collect();
        let mut v = xv.clone();
        for (mut row, &r) in v.axis_iter_mut(Axis(0)).zip(inv_rms.iter()) {
            row *= r;
            row *= &wv;
        }
        let ng = self.ng(x) || self.ng(weight);
        self.push(v, Op::RmsNorm { x, weight, inv_rms }, ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        let ng = self.ng(a);
        self.push(v, Op::Gelu(a), ng)
    }

    /// Rotates channel pairs `(2j, 2j+1)` of every row by the angle whose
    /// cosine and sine are `cos[[row, j]]`, `sin[[row, j]]`.
    pub fn rope(&mut self, x: Var, cos: Array2<f64>, sin: Array2<f64>) -> Var {
        let v = rotate_pairs(self.value(x).view(), &cos, &sin, false);
        let ng = self.ng(x);
        self.push(v, Op::Rope { x, cos, sin }, ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let v = self.value(a).select(Axis(0), &idx);
        let ng = self.ng(a);
        self.push(v, Op::GatherRows(a, idx), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Multi-head scaled dot-product attention restricted to `groups`.
    ///
    /// Query rows outside every group produce zero output.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: Vec<AttnGroup>,
    ) -> Var {
        self.attention_calls += 1;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let dim = qv.ncols();
        assert_eq!(dim % heads, 0, "attention: dim not divisible by heads");
        let hd = dim / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = Array2::zeros((qv.nrows(), vv.ncols()));
        let vd = vv.ncols() / heads;
        let mut probs = Vec::with_capacity(groups.len());
        for g in &groups {
            let mut per_head = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = qv.slice(s![g.queries.clone(), h * hd..(h + 1) * hd]);
                let kh = kv.slice(s![g.keys.clone(), h * hd..(h + 1) * hd]);
                let vh = vv.slice(s![g.keys.clone(), h * vd..(h + 1) * vd]);
                let mut scores = qh.dot(&kh.t()) * scale;
                softmax_rows_inplace(&mut scores);
                out.slice_mut(s![g.queries.clone(), h * vd..(h + 1) * vd])
                    .assign(&scores.dot(&vh));
                per_head.push(scores);
            }
            probs.push(per_head);
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
            },
            ng,
        )
    }

    /// Mean over rows of `−Σ_k t_k log softmax(logits / tau)_k`, as a 1×1 node.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Array2<f64>, tau: f64) -> Var {
        let lv = self.value(logits);
        assert_eq!(
            lv.dim(),
            targets.dim(),
            "soft_cross_entropy: shape mismatch"
        );
        let log_probs = log_softmax_rows(&(lv / tau));
        let m = lv.nrows().max(1) as f64;
        let loss = Zip::from(&log_probs)
            .and(&targets)
            .fold(0.0, |acc, &lp, &t| acc - t * lp)
            / m;
        let probs = log_probs.mapv(f64::exp);
        let ng = self.ng(logits);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::SoftCrossEntropy {
                logits,
                targets,
                tau,
                probs,
            },
            ng,
        )
    }

    /// `Σ a ⊙ c` as a 1×1 node; turns any output into a scalar for gradient checks.
    pub fn weighted_sum(&mut self, a: Var, c: Array2<f64>) -> Var {
        let s = (self.value(a) * &c).sum();
        let ng = self.ng(a);
        self.push(Array2::from_elem((1, 1), s), Op::WeightedSum(a, c), ng)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean_rows: empty")
            .insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(v, Op::MeanRows(a), ng)
    }

    /// Each row divided by its Euclidean norm (rows must be nonzero).
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        let norms: Array1<f64> = v.axis_iter(Axis(0)).map(|r| r.dot(&r).sqrt()).collect();
        for (mut row, &n) in v.axis_iter_mut(Axis(0)).zip(norms.iter()) {
            row /= n;
        }
        let ng = self.ng(a);
        self.push(v, Op::L2NormalizeRows(a, norms), ng)
    }

    /// A constant copy of `a`: gradients stop here.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.input(v)
    }

    /// Reverse pass from a 1×1 node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.value(loss).dim(),
            (1, 1),
            "backward: loss must be scalar"
        );
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; n];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, nd)| match &nd.op {
                Op::Param(name) if nd.needs_grad => Some((name.clone(), i)),
                _ => None,
            })
            .collect();
        Gradients { grads, params }
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let acc = |v: Var, delta: Array2<f64>, grads: &mut [Option<Array2<f64>>]| {
            if !self.ng(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.dot(&self.value(*b).t()), grads);
                }
                if self.ng(*b) {
                    acc(*b, self.value(*a).t().dot(g), grads);
                }
            }
            Op::MatMulT(a, w) => {
                if self.ng(*a) {
                    acc(*a, g.dot(self.value(*w)), grads);
                }
                if self.ng(*w) {
                    acc(*w, g.t().dot(self.value(*a)), grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::Scale(a, c) => acc(*a, g * *c, grads),
            Op::RowScale(a, scales) => {
                let mut d = g.clone();
                for (mut row, &c) in d.axis_iter_mut(Axis(0)).zip(scales.iter()) {
                    row *= c;
                }
                acc(*a, d, grads);
            }
            Op::RmsNorm { x, weight, inv_rms } => {
                let xv = self.value(*x);
                let wv = self.value(*weight).row(0).to_owned();
                let d = xv.ncols() as f64;
                let mut normed = xv.clone();
                for (mut row, &r) in normed.axis_iter_mut(Axis(0)).zip(inv_rms.iter()) {
                    row *= r;
                }
                if self.ng(*weight) {
                    let dw = (g * &normed).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(*weight, dw, grads);
                }
                if self.ng(*x) {
                    let mut dx = g * &wv;
                    for ((mut dr, nr), &r) in dx
                        .axis_iter_mut(Axis(0))
                        .zip(normed.axis_iter(Axis(0)))
                        .zip(inv_rms.iter())
                    {
                        let proj = dr.dot(&nr) / d;
                        Zip::from(&mut dr)
                            .and(&nr)
                            .for_each(|dv, &nv| *dv = r * (*dv - nv * proj));
                    }
                    acc(*x, dx, grads);
                }
            }
            Op::Gelu(a) => {
                let mut d = self.value(*a).mapv(gelu_grad);
                d *= g;
                acc(*a, d, grads);
            }
            Op::Rope { x, cos, sin } => acc(*x, rotate_pairs(g.view(), cos, sin, true), grads),
            Op::GatherRows(a, idx) => {
                let mut d = Array2::zeros(self.value(*a).raw_dim());
                for (r, &src) in idx.iter().enumerate() {
                    let mut row = d.row_mut(src);
                    row += &g.row(r);
                }
                acc(*a, d, grads);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).nrows();
                    acc(p, g.slice(s![start..start + rows, ..]).to_owned(), grads);
                    start += rows;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let hd = qv.ncols() / heads;
                let vd = vv.ncols() / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let mut dq = Array2::zeros(qv.raw_dim());
                let mut dk = Array2::zeros(kv.raw_dim());
                let mut dv = Array2::zeros(vv.raw_dim());
                for (gi, grp) in groups.iter().enumerate() {
                    for h in 0..*heads {
                        let p = &probs[gi][h];
                        let go = g.slice(s![grp.queries.clone(), h * vd..(h + 1) * vd]);
                        let vh = vv.slice(s![grp.keys.clone(), h * vd..(h + 1) * vd]);
                        let qh = qv.slice(s![grp.queries.clone(), h * hd..(h + 1) * hd]);
                        let kh = kv.slice(s![grp.keys.clone(), h * hd..(h + 1) * hd]);
                        let mut dvs = dv.slice_mut(s![grp.keys.clone(), h * vd..(h + 1) * vd]);
                        dvs += &p.t().dot(&go);
                        let dp = go.dot(&vh.t());
                        let mut ds = p * &dp;
                        for (mut row, prow) in ds.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))) {
                            let sum: f64 = row.sum();
                            Zip::from(&mut row)
                                .and(&prow)
                                .for_each(|d, &pp| *d -= pp * sum);
                        }
                        ds *= scale;
                        let mut dqs = dq.slice_mut(s![grp.queries.clone(), h * hd..(h + 1) * hd]);
                        dqs += &ds.dot(&kh);
                        let mut dks = dk.slice_mut(s![grp.keys.clone(), h * hd..(h + 1) * hd]);
                        dks += &ds.t().dot(&qh);
                    }
                }
                acc(*q, dq, grads);
                acc(*k, dk, grads);
                acc(*v, dv, grads);
            }
            Op::SoftCrossEntropy {
                logits,
                targets,
                tau,
                probs,
            } => {
                let m = probs.nrows().max(1) as f64;
                let c = g[[0, 0]] / (m * tau);
                let mut d = probs.clone();
                for ((mut row, trow), s) in d
                    .axis_iter_mut(Axis(0))
                    .zip(targets.axis_iter(Axis(0)))
                    .zip(targets.sum_axis(Axis(1)).iter())
                {
                    Zip::from(&mut row)
                        .and(&trow)
                        .for_each(|p, &t| *p = c * (*p * s - t));
                }
                acc(*logits, d, grads);
            }
            Op::WeightedSum(a, c) => acc(*a, c * g[[0, 0]], grads),
            Op::L2NormalizeRows(a, norms) => {
                let y = &node.value;
                let mut d = g.clone();
                for ((mut dr, yr), &n) in d
                    .axis_iter_mut(Axis(0))
                    .zip(y.axis_iter(Axis(0)))
                    .zip(norms.iter())
                {
                    let proj = dr.dot(&yr);
                    Zip::from(&mut dr)
                        .and(&yr)
                        .for_each(|dv, &yv| *dv = (*dv - yv * proj) / n);
                }
                acc(*a, d, grads);
            }
            Op::MeanRows(a) => {
                let rows = self.value(*a).nrows();
                let row = g.row(0).to_owned() / rows as f64;
                let d = Array2::from_shape_fn((rows, row.len()), |(_, j)| row[j]);
                acc(*a, d, grads);
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stable in-place row softmax.
pub fn softmax_rows_inplace(m: &mut Array2<f64>) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Row-wise `x − logsumexp(x)`, exact even where the softmax underflows.
pub fn log_softmax_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|x| x - lse);
    }
    out
}

pub(crate) fn rotate_pairs(
    x: ArrayView2<f64>,
    cos: &Array2<f64>,
    sin: &Array2<f64>,
    inverse: bool,
) -> Array2<f64> {
    assert_eq!(x.ncols(), 2 * cos.ncols(), "rope: table width mismatch");
    assert_eq!(x.nrows(), cos.nrows(), "rope: table rows mismatch");
    let sign = if inverse { -1.0 } else { 1.0 };
    let mut out = Array2::zeros(x.raw_dim());
    for r in 0..x.nrows() {
        for j in 0..cos.ncols() {
            let (c, s) = (cos[[r, j]], sign * sin[[r, j]]);
            let (a, b) = (x[[r, 2 * j]], x[[r, 2 * j + 1]]);
            out[[r, 2 * j]] = a * c - b * s;
            out[[r, 2 * j + 1]] = a * s + b * c;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn rand_mat(rng: &mut impl Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central differences of `f` with respect to every entry of `x0`.
    fn numeric_grad(x0: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x0.raw_dim());
        for idx in 0..x0.len() {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            g.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn max_rel(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let scale = b.iter().fold(1e-8_f64, |m, v| m.max(v.abs()));
        (a - b).iter().fold(0.0_f64, |m, v| m.max(v.abs())) / scale
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = seeded(11);
        let x0 = rand_mat(&mut rng, 5, 8);
        let w0 = rand_mat(&mut rng, 8, 8);
        let n0 = rand_mat(&mut rng, 1, 8);
        let c0 = rand_mat(&mut rng, 3, 8);
        let t0 = {
            let mut t = rand_mat(&mut rng, 3, 8).mapv(f64::abs);
            for mut r in t.axis_iter_mut(Axis(0)) {
                let s = r.sum();
                r /= s;
            }
            t
        };
        let angles = rand_mat(&mut rng, 5, 4);
        let groups = vec![
            AttnGroup {
                queries: 0..2,
                keys: 0..3,
            },
            AttnGroup {
                queries: 2..3,
                keys: 1..5,
            },
        ];
        let forward = |x: &Array2<f64>, w: &Array2<f64>, n: &Array2<f64>, tape: &mut Tape| {
            let xv = tape.param("x", x);
            let wv = tape.param("w", w);
            let nv = tape.param("n", n);
            let h = tape.rms_norm(xv, nv, 1e-5);
            let h = tape.l2_normalize_rows(h);
            let h = tape.linear(h, wv);
            let h = tape.gelu(h);
            let h = tape.rope(h, angles.mapv(f64::cos), angles.mapv(f64::sin));
            let h = tape.row_scale(h, Array1::from(vec![1.0, 0.5, 2.0, 0.0, 1.5]));
            let h = tape.add(h, xv);
            let q = tape.gather_rows(h, vec![4, 0, 2]);
            let a = tape.attention(q, h, xv, 2, groups.clone());
            let a = tape.scale(a, 0.7);
            let logits = tape.matmul(a, wv);
            let both = tape.concat_rows(&[logits, q]);
            let pooled = tape.mean_rows(both);
            let ce = tape.soft_cross_entropy(logits, t0.clone(), 0.3);
            let ws = tape.weighted_sum(pooled, c0.row(0).to_owned().insert_axis(Axis(0)));
            tape.add(ce, ws)
        };
        let mut tape = Tape::new();
        let loss = forward(&x0, &w0, &n0, &mut tape);
        let grads = tape.backward(loss);
        let f_x = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let l = forward(x, &w0, &n0, &mut t);
            t.value(l)[[0, 0]]
        };
        let f_w = |w: &Array2<f64>| {
            let mut t = Tape::new();
            let l = forward(&x0, w, &n0, &mut t);
            t.value(l)[[0, 0]]
        };
        let f_n = |n: &Array2<f64>| {
            let mut t = Tape::new();
            let l = forward(&x0, &w0, n, &mut t);
            t.value(l)[[0, 0]]
        };
        assert!(max_rel(grads.param("x").unwrap(), &numeric_grad(&x0, f_x)) < 1e-6);
        assert!(max_rel(grads.param("w").unwrap(), &numeric_grad(&w0, f_w)) < 1e-6);
        assert!(max_rel(grads.param("n").unwrap(), &numeric_grad(&n0, f_n)) < 1e-6);
    }

    #[test]
    fn no_grad_tape_skips_parameters() {
        let mut tape = Tape::no_grad();
        let w = tape.param("w", &Array2::ones((2, 2)));
        let s = tape.weighted_sum(w, Array2::ones((2, 2)));
        let g = tape.backward(s);
        assert!(g.param("w").is_none());
    }

    #[test]
    fn attention_groups_do_not_mix() {
        let mut rng = seeded(3);
        let q = rand_mat(&mut rng, 4, 4);
        let kv = rand_mat(&mut rng, 6, 4);
        let mut t = Tape::new();
        let (qv, kvv) = (t.input(q.clone()), t.input(kv.clone()));
        let out = t.attention(
            qv,
            kvv,
            kvv,
            1,
            vec![
                AttnGroup {
                    queries: 0..2,
                    keys: 0..3,
                },
                AttnGroup {
                    queries: 2..4,
                    keys: 3..6,
                },
            ],
        );
        let full = t.value(out).clone();
        let mut t2 = Tape::new();
        let (qv2, kv2) = (
            t2.input(q.slice(s![2..4, ..]).to_owned()),
            t2.input(kv.slice(s![3..6, ..]).to_owned()),
        );
        let part = t2.attention(
            qv2,
            kv2,
            kv2,
            1,
            vec![AttnGroup {
                queries: 0..2,
                keys: 0..3,
            }],
        );
        let diff = (&full.slice(s![2..4, ..]) - t2.value(part))
            .mapv(f64::abs)
            .sum();
        assert!(diff < 1e-14);
    }

    #[test]
    fn saturated_cross_entropy_is_exact() {
        let mut t = Tape::new();
        let l = t.param("l", &ndarray::array![[120.0, 0.0, -30.0]]);
        let loss = t.soft_cross_entropy(l, ndarray::array![[0.0, 1.0, 0.0]], 0.12);
        assert!((t.value(loss)[[0, 0]] - 1000.0).abs() < 1e-9);
        let g = t.backward(loss);
        assert!((g.param("l").unwrap()[[0, 1]] + 1.0 / 0.12).abs() < 1e-9);
    }
}
