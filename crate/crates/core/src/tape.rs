//! Reverse-mode differentiation over a linear record of primitive
//! applications.
//!
//! Every primitive appends one node holding its forward value. Because a
//! node can only reference earlier nodes, the record is already in
//! topological order and the backward pass is a single reverse sweep.

use crate::error::{contract_err, shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{
    add_into, dot, matmul_acc, matmul_at_acc, matmul_bt_acc, moments, softmax_lane, AxisLayout, Scalar, Tensor,
};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which keys a query may not attend to.
#[derive(Clone, Debug, Default)]
pub struct AttnMask {
    /// `true` marks a padded key.
    pub key_padding: Option<Vec<bool>>,
    /// Query `i` sees only keys `j <= i`.
    pub causal: bool,
}

impl AttnMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn causal() -> Self {
        AttnMask {
            key_padding: None,
            causal: true,
        }
    }

    pub fn padding(mask: Vec<bool>) -> Self {
        AttnMask {
            key_padding: Some(mask),
            causal: false,
        }
    }

    fn allows(&self, query: usize, key: usize) -> bool {
        if self.causal && key > query {
            return false;
        }
        !self.key_padding.as_ref().is_some_and(|m| m[key])
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    MatMulBt {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: S,
    },
    AddBias {
        x: Var,
        b: Var,
        d: usize,
    },
    Gelu {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Square {
        x: Var,
    },
    LayerNorm {
        x: Var,
        g: Var,
        b: Var,
        d: usize,
    },
    Softmax {
        x: Var,
        layout: AxisLayout,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        nq: usize,
        nk: usize,
        d: usize,
    },
    CrossEntropy {
        logits: Var,
        classes: usize,
        targets: Vec<Option<usize>>,
        count: usize,
    },
    BceWithLogits {
        logits: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    SliceRows {
        x: Var,
        start: usize,
        d: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
        d: usize,
    },
    MaxRows {
        x: Var,
        d: usize,
    },
    MeanRows {
        x: Var,
        rows: usize,
        d: usize,
    },
    L2NormalizeRows {
        x: Var,
        d: usize,
    },
    Reshape {
        x: Var,
    },
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Vec<S>,
    shape: Vec<usize>,
    op: Op<S>,
    /// Forward intermediates the backward rule needs.
    saved: Vec<S>,
    saved_idx: Vec<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    param_vars: Vec<Option<Var>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    let c = S::lit(GELU_C);
    let a = S::lit(GELU_A);
    let half = S::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (S::one() + t);
    let dy = half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::lit(3.0) * a * x * x);
    (y, dy)
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_vars: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<S>, shape: Vec<usize>, op: Op<S>) -> Var {
        self.push_saved(value, shape, op, Vec::new(), Vec::new())
    }

    fn push_saved(&mut self, value: Vec<S>, shape: Vec<usize>, op: Op<S>, saved: Vec<S>, saved_idx: Vec<usize>) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            saved,
            saved_idx,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Number of rows when the value is viewed as `[rows, last_dim]`.
    pub fn rows(&self, v: Var) -> usize {
        let node = &self.nodes[v.0];
        let d = last_dim(&node.shape);
        if d == 0 {
            0
        } else {
            node.value.len() / d
        }
    }

    pub fn to_tensor(&self, v: Var) -> Result<Tensor<S>> {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.clone())
    }

    pub fn scalar_value(&self, v: Var) -> Result<S> {
        match self.value(v) {
            [x] => Ok(*x),
            other => Err(contract_err!("expected a scalar, found {} values", other.len())),
        }
    }

    /// Attention probabilities `[heads, queries, keys]` saved by an
    /// attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[S]> {
        match self.nodes[v.0].op {
            Op::Attention { .. } => Some(&self.nodes[v.0].saved),
            _ => None,
        }
    }

    pub fn constant(&mut self, t: &Tensor<S>) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf)
    }

    /// Constant with an arbitrary (possibly empty) shape.
    pub fn constant_raw(&mut self, shape: Vec<usize>, data: Vec<S>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(shape_err!("shape {shape:?} does not hold {} values", data.len()));
        }
        Ok(self.push(data, shape, Op::Leaf))
    }

    /// Records a parameter once per tape; later calls reuse the same node.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.0) {
            return *v;
        }
        let t = store.get(id);
        let v = self.push(t.data().to_vec(), t.shape().to_vec(), Op::Param(id));
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        self.param_vars[id.0] = Some(v);
        v
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err!("expected a matrix, got shape {s:?}")),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(shape_err!(
                "matmul of {:?} by {:?}: inner dimensions disagree",
                self.shape(a),
                self.shape(b)
            ));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(out, vec![m, n], Op::MatMul { a, b, m, k, n }))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(shape_err!(
                "matmul of {:?} by transpose of {:?}: inner dimensions disagree",
                self.shape(a),
                self.shape(b)
            ));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_bt_acc(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(out, vec![m, n], Op::MatMulBt { a, b, m, k, n }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{what} of {:?} and {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, what: &str, op: Op<S>, f: impl Fn(S, S) -> S) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "add", Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "sub", Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "mul", Op::Mul { a, b }, |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(out, shape, Op::Scale { x, c })
    }

    /// Adds a `[d]` vector to every row of `x: [.., d]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = last_dim(self.shape(x));
        if self.value(b).len() != d {
            return Err(shape_err!(
                "bias of shape {:?} for input {:?}",
                self.shape(b),
                self.shape(x)
            ));
        }
        let bias = self.value(b);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(d.max(1)) {
            add_into(row, bias);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::AddBias { x, b, d }))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu_parts(v).0).collect();
        let shape = self.shape(x).to_vec();
        self.push(out, shape, Op::Gelu { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(S::zero())).collect();
        let shape = self.shape(x).to_vec();
        self.push(out, shape, Op::Relu { x })
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v * v).collect();
        let shape = self.shape(x).to_vec();
        self.push(out, shape, Op::Square { x })
    }

    /// Normalizes each `[d]` row of `x`, then applies `g ⊙ · + b`.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Result<Var> {
        let d = last_dim(self.shape(x));
        if d < 2 {
            return Err(shape_err!("layer_norm needs at least 2 features, got {d}"));
        }
        if self.value(g).len() != d || self.value(b).len() != d {
            return Err(shape_err!("layer_norm affine does not match feature size {d}"));
        }
        let rows = self.rows(x);
        let mut out = vec![S::zero(); rows * d];
        let mut saved = vec![S::zero(); rows * d + rows];
        {
            let (xv, gv, bv) = (self.value(x), self.value(g), self.value(b));
            for r in 0..rows {
                let xr = &xv[r * d..(r + 1) * d];
                let (mean, rstd) = moments(xr);
                for j in 0..d {
                    let xhat = (xr[j] - mean) * rstd;
                    saved[r * d + j] = xhat;
                    out[r * d + j] = xhat * gv[j] + bv[j];
                }
                saved[rows * d + r] = rstd;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push_saved(out, shape, Op::LayerNorm { x, g, b, d }, saved, Vec::new()))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let layout = AxisLayout::new(self.shape(x), axis)?;
        let mut out = self.value(x).to_vec();
        layout.for_each_lane(|idx| softmax_lane(&mut out, idx));
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::Softmax { x, layout }))
    }

    /// Scaled dot-product attention over already-projected `q: [nq, d]`,
    /// `k, v: [nk, d]`, split into `heads` contiguous head slices.
    ///
    /// A query with no visible key gets an all-zero output row.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &AttnMask) -> Result<Var> {
        let d = last_dim(self.shape(q));
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model dim {d} is not divisible by {heads} heads"
            )));
        }
        let (nq, nk) = (self.rows(q), self.rows(k));
        if last_dim(self.shape(k)) != d || self.shape(k) != self.shape(v) {
            return Err(shape_err!(
                "attention with q {:?}, k {:?}, v {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            ));
        }
        if mask.key_padding.as_ref().is_some_and(|m| m.len() != nk) {
            return Err(shape_err!("key padding mask length differs from {nk} keys"));
        }
        if mask.causal && nq != nk {
            return Err(shape_err!("causal attention needs as many queries as keys"));
        }
        let dh = d / heads;
        let scale = S::lit(1.0 / (dh as f64).sqrt());
        let mut probs = vec![S::zero(); heads * nq * nk];
        let mut out = vec![S::zero(); nq * d];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        for h in 0..heads {
            let off = h * dh;
            for i in 0..nq {
                let qi = &qv[i * d + off..i * d + off + dh];
                let p = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let mut max = S::neg_infinity();
                for j in 0..nk {
                    if mask.allows(i, j) {
                        let s = dot(qi, &kv[j * d + off..j * d + off + dh]) * scale;
                        p[j] = s;
                        max = max.max(s);
                    }
                }
                if max == S::neg_infinity() {
                    continue;
                }
                let mut total = S::zero();
                for j in 0..nk {
                    if mask.allows(i, j) {
                        let e = (p[j] - max).exp();
                        p[j] = e;
                        total = total + e;
                    }
                }
                let o = &mut out[i * d + off..i * d + off + dh];
                for j in 0..nk {
                    if mask.allows(i, j) {
                        p[j] = p[j] / total;
                        let w = p[j];
                        for (oo, &vj) in o.iter_mut().zip(&vv[j * d + off..j * d + off + dh]) {
                            *oo = *oo + w * vj;
                        }
                    }
                }
            }
        }
        let op = Op::Attention {
            q,
            k,
            v,
            heads,
            nq,
            nk,
            d,
        };
        Ok(self.push_saved(out, vec![nq, d], op, probs, Vec::new()))
    }

    /// Mean token cross-entropy of `logits: [n, classes]`; rows whose target
    /// is `None` are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (n, classes) = self.dims2(logits)?;
        if targets.len() != n {
            return Err(shape_err!("{} targets for {n} rows of logits", targets.len()));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= classes) {
            return Err(contract_err!("target class {bad} out of range for {classes} classes"));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(contract_err!("cross-entropy over an empty target"));
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = S::zero();
        for (r, t) in targets.iter().enumerate() {
            let row = &mut probs[r * classes..(r + 1) * classes];
            let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<S>().ln() + max;
            if let Some(t) = t {
                total = total + lse - row[*t];
            }
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        let loss = total / S::lit(count as f64);
        let op = Op::CrossEntropy {
            logits,
            classes,
            targets: targets.to_vec(),
            count,
        };
        Ok(self.push_saved(vec![loss], Vec::new(), op, probs, Vec::new()))
    }

    /// Mean binary cross-entropy of sigmoid(logits) against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[S]) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != targets.len() || z.is_empty() {
            return Err(shape_err!("{} targets for {} logits", targets.len(), z.len()));
        }
        let mut total = S::zero();
        for (&zi, &yi) in z.iter().zip(targets) {
            total = total + zi.max(S::zero()) - zi * yi + (S::one() + (-zi.abs()).exp()).ln();
        }
        let loss = total / S::lit(z.len() as f64);
        let op = Op::BceWithLogits { logits };
        Ok(self.push_saved(vec![loss], Vec::new(), op, targets.to_vec(), Vec::new()))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.push(vec![s], Vec::new(), Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(contract_err!("mean of an empty value"));
        }
        let s = self.value(x).iter().copied().sum::<S>() / S::lit(n as f64);
        Ok(self.push(vec![s], Vec::new(), Op::Mean { x }))
    }

    /// Stacks `[r_i, d]` blocks into `[Σ r_i, d]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| contract_err!("concat of nothing"))?;
        let d = last_dim(self.shape(first));
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.shape(p).len() != 2 || last_dim(self.shape(p)) != d {
                return Err(shape_err!("cannot stack {:?} under width {d}", self.shape(p)));
            }
            rows += self.rows(p);
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(out, vec![rows, d], Op::ConcatRows { parts: parts.to_vec() }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, d) = self.dims2(x)?;
        if start + len > rows {
            return Err(shape_err!("rows {start}..{} out of range for {rows} rows", start + len));
        }
        let out = self.value(x)[start * d..(start + len) * d].to_vec();
        Ok(self.push(out, vec![len, d], Op::SliceRows { x, start, d }))
    }

    /// Row lookup `table[ids]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims2(table)?;
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(contract_err!("row id {id} out of range for {rows} rows"));
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
            d,
        };
        Ok(self.push(out, vec![ids.len(), d], op))
    }

    /// Coordinatewise maximum over the rows of `x: [rows, d]`; ties go to
    /// the earliest row.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, d) = self.dims2(x)?;
        if rows == 0 {
            return Err(shape_err!("max over zero rows"));
        }
        let xv = self.value(x);
        let mut out = xv[..d].to_vec();
        let mut arg = vec![0usize; d];
        for r in 1..rows {
            for j in 0..d {
                if xv[r * d + j] > out[j] {
                    out[j] = xv[r * d + j];
                    arg[j] = r;
                }
            }
        }
        Ok(self.push_saved(out, vec![d], Op::MaxRows { x, d }, Vec::new(), arg))
    }

    /// Winning row of every column of every max-pool node, in tape order.
    /// Two evaluations with equal signatures lie on the same smooth piece
    /// of the max-pool nonlinearity.
    pub fn max_pool_signature(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::MaxRows { .. }))
            .flat_map(|n| n.saved_idx.iter().copied())
            .collect()
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, d) = self.dims2(x)?;
        if rows == 0 {
            return Err(shape_err!("mean over zero rows"));
        }
        let mut out = vec![S::zero(); d];
        for row in self.value(x).chunks(d) {
            add_into(&mut out, row);
        }
        let inv = S::lit(1.0 / rows as f64);
        out.iter_mut().for_each(|v| *v = *v * inv);
        Ok(self.push(out, vec![d], Op::MeanRows { x, rows, d }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(shape_err!("cannot view {:?} as {shape:?}", self.shape(x)));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(out, shape, Op::Reshape { x }))
    }

    /// Scales each row to unit Euclidean length.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, d) = self.dims2(x)?;
        let mut out = self.value(x).to_vec();
        let mut norms = vec![S::zero(); rows];
        for (r, row) in out.chunks_mut(d).enumerate() {
            let n = dot(row, row).sqrt().max(S::lit(1e-12));
            norms[r] = n;
            row.iter_mut().for_each(|v| *v = *v / n);
        }
        Ok(self.push_saved(out, vec![rows, d], Op::L2NormalizeRows { x, d }, norms, Vec::new()))
    }

    fn sweep(&self, loss: Var) -> Result<Vec<Option<Vec<S>>>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            ));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(grads)
    }

    /// Reverse sweep from a scalar `loss`; gradients of parameters reached
    /// by the sweep are added into their tensors' gradient slots.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<S>) -> Result<()> {
        let grads = self.sweep(loss)?;
        for (i, g) in grads.into_iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&self.nodes[i].op, g) {
                store.get_mut(*id).accumulate_grad(&g);
            }
        }
        Ok(())
    }

    /// Gradient of a scalar `loss` with respect to leaf or parameter nodes.
    pub fn grad(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Vec<S>>> {
        let grads = self.sweep(loss)?;
        Ok(wrt
            .iter()
            .map(|v| {
                grads
                    .get(v.0)
                    .and_then(Clone::clone)
                    .unwrap_or_else(|| vec![S::zero(); self.value(*v).len()])
            })
            .collect())
    }

    fn backprop_node(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let nodes = &self.nodes;
        macro_rules! buf {
            ($v:expr) => {{
                let v: Var = $v;
                let len = nodes[v.0].value.len();
                grads[v.0].get_or_insert_with(|| vec![S::zero(); len])
            }};
        }
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul { a, b, m, k, n } => {
                matmul_bt_acc(g, val(b), buf!(a), m, n, k);
                matmul_at_acc(val(a), g, buf!(b), m, k, n);
            }
            &Op::MatMulBt { a, b, m, k, n } => {
                matmul_acc(g, val(b), buf!(a), m, n, k);
                matmul_at_acc(g, val(a), buf!(b), m, n, k);
            }
            &Op::Add { a, b } => {
                add_into(buf!(a), g);
                add_into(buf!(b), g);
            }
            &Op::Sub { a, b } => {
                add_into(buf!(a), g);
                for (d, &s) in buf!(b).iter_mut().zip(g) {
                    *d = *d - s;
                }
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (val(a), val(b));
                for ((d, &s), &y) in buf!(a).iter_mut().zip(g).zip(bv) {
                    *d = *d + s * y;
                }
                for ((d, &s), &x) in buf!(b).iter_mut().zip(g).zip(av) {
                    *d = *d + s * x;
                }
            }
            &Op::Scale { x, c } => {
                for (d, &s) in buf!(x).iter_mut().zip(g) {
                    *d = *d + s * c;
                }
            }
            &Op::AddBias { x, b, d } => {
                add_into(buf!(x), g);
                let gb = buf!(b);
                for row in g.chunks(d.max(1)) {
                    add_into(gb, row);
                }
            }
            &Op::Gelu { x } => {
                let xv = val(x);
                for ((d, &s), &xi) in buf!(x).iter_mut().zip(g).zip(xv) {
                    *d = *d + s * gelu_parts(xi).1;
                }
            }
            &Op::Relu { x } => {
                let xv = val(x);
                for ((d, &s), &xi) in buf!(x).iter_mut().zip(g).zip(xv) {
                    if xi > S::zero() {
                        *d = *d + s;
                    }
                }
            }
            &Op::Square { x } => {
                let xv = val(x);
                for ((d, &s), &xi) in buf!(x).iter_mut().zip(g).zip(xv) {
                    *d = *d + S::lit(2.0) * xi * s;
                }
            }
            &Op::LayerNorm { x, g: gain, b, d } => {
                let rows = g.len() / d;
                let (xhat, rstd) = node.saved.split_at(rows * d);
                let gv = val(gain);
                let inv_d = S::lit(1.0 / d as f64);
                let mut dx = vec![S::zero(); rows * d];
                let mut dg = vec![S::zero(); d];
                let mut db = vec![S::zero(); d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dxhat = S::zero();
                    let mut mean_dxhat_xhat = S::zero();
                    for j in 0..d {
                        let dxh = gr[j] * gv[j];
                        mean_dxhat = mean_dxhat + dxh;
                        mean_dxhat_xhat = mean_dxhat_xhat + dxh * xr[j];
                        dg[j] = dg[j] + gr[j] * xr[j];
                        db[j] = db[j] + gr[j];
                    }
                    mean_dxhat = mean_dxhat * inv_d;
                    mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
                    for j in 0..d {
                        let dxh = gr[j] * gv[j];
                        dx[r * d + j] = rstd[r] * (dxh - mean_dxhat - xr[j] * mean_dxhat_xhat);
                    }
                }
                add_into(buf!(x), &dx);
                add_into(buf!(gain), &dg);
                add_into(buf!(b), &db);
            }
            &Op::Softmax { x, layout } => {
                let y = &node.value;
                let mut dx = vec![S::zero(); y.len()];
                layout.for_each_lane(|idx| {
                    let inner: S = idx.iter().map(|&i| y[i] * g[i]).sum();
                    for &i in idx {
                        dx[i] = y[i] * (g[i] - inner);
                    }
                });
                add_into(buf!(x), &dx);
            }
            &Op::Attention {
                q,
                k,
                v,
                heads,
                nq,
                nk,
                d,
            } => {
                let dh = d / heads;
                let scale = S::lit(1.0 / (dh as f64).sqrt());
                let probs = &node.saved;
                let (qv, kv, vv) = (val(q), val(k), val(v));
                let mut dq = vec![S::zero(); nq * d];
                let mut dk = vec![S::zero(); nk * d];
                let mut dv = vec![S::zero(); nk * d];
                let mut dp = vec![S::zero(); nk];
                for h in 0..heads {
                    let off = h * dh;
                    for i in 0..nq {
                        let p = &probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                        let go = &g[i * d + off..i * d + off + dh];
                        let mut inner = S::zero();
                        for j in 0..nk {
                            if p[j] == S::zero() {
                                dp[j] = S::zero();
                                continue;
                            }
                            dp[j] = dot(go, &vv[j * d + off..j * d + off + dh]);
                            inner = inner + p[j] * dp[j];
                            for (dvj, &goc) in dv[j * d + off..j * d + off + dh].iter_mut().zip(go) {
                                *dvj = *dvj + p[j] * goc;
                            }
                        }
                        for j in 0..nk {
                            if p[j] == S::zero() {
                                continue;
                            }
                            let ds = p[j] * (dp[j] - inner) * scale;
                            for c in 0..dh {
                                dq[i * d + off + c] = dq[i * d + off + c] + ds * kv[j * d + off + c];
                                dk[j * d + off + c] = dk[j * d + off + c] + ds * qv[i * d + off + c];
                            }
                        }
                    }
                }
                add_into(buf!(q), &dq);
                add_into(buf!(k), &dk);
                add_into(buf!(v), &dv);
            }
            Op::CrossEntropy {
                logits,
                classes,
                targets,
                count,
            } => {
                let scale = g[0] / S::lit(*count as f64);
                let probs = &node.saved;
                let dl = buf!(*logits);
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = t else { continue };
                    for c in 0..*classes {
                        let y = if c == *t { S::one() } else { S::zero() };
                        dl[r * classes + c] = dl[r * classes + c] + scale * (probs[r * classes + c] - y);
                    }
                }
            }
            &Op::BceWithLogits { logits } => {
                let z = val(logits);
                let scale = g[0] / S::lit(z.len() as f64);
                let targets = &node.saved;
                let dl = buf!(logits);
                for i in 0..z.len() {
                    let p = S::one() / (S::one() + (-z[i]).exp());
                    dl[i] = dl[i] + scale * (p - targets[i]);
                }
            }
            &Op::Sum { x } => {
                buf!(x).iter_mut().for_each(|d| *d = *d + g[0]);
            }
            &Op::Mean { x } => {
                let n = S::lit(val(x).len() as f64);
                buf!(x).iter_mut().for_each(|d| *d = *d + g[0] / n);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    add_into(buf!(p), &g[offset..offset + len]);
                    offset += len;
                }
            }
            &Op::SliceRows { x, start, d } => {
                let dx = buf!(x);
                add_into(&mut dx[start * d..start * d + g.len()], g);
            }
            Op::Gather { table, ids, d } => {
                let dt = buf!(*table);
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
            &Op::MaxRows { x, d } => {
                let dx = buf!(x);
                for (j, &r) in node.saved_idx.iter().enumerate() {
                    dx[r * d + j] = dx[r * d + j] + g[j];
                }
            }
            &Op::MeanRows { x, rows, d } => {
                let inv = S::lit(1.0 / rows as f64);
                let dx = buf!(x);
                for r in 0..rows {
                    for j in 0..d {
                        dx[r * d + j] = dx[r * d + j] + g[j] * inv;
                    }
                }
            }
            &Op::Reshape { x } => add_into(buf!(x), g),
            &Op::L2NormalizeRows { x, d } => {
                let y = &node.value;
                let norms = &node.saved;
                let dx = buf!(x);
                for (r, &n) in norms.iter().enumerate() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let proj = dot(yr, gr);
                    for j in 0..d {
                        dx[r * d + j] = dx[r * d + j] + (gr[j] - yr[j] * proj) / n;
                    }
                }
            }
        }
    }
}
