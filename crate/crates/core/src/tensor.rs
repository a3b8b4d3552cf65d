//! Dense row-major tensors and the raw kernels shared by the forward and
//! backward passes.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{contract_err, shape_err, Result};

/// Element type of every tensor. Production code runs on `f32`; the
/// gradient checker instantiates the same code with `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
}

fn check_dims(shape: &[usize]) -> Result<usize> {
    if let Some(pos) = shape.iter().position(|&d| d == 0) {
        return Err(shape_err!("dimension {pos} of shape {shape:?} is zero"));
    }
    Ok(shape.iter().product())
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        let n = check_dims(&shape)?;
        if n != data.len() {
            return Err(shape_err!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            ));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n = check_dims(&shape)?;
        Ok(Tensor {
            shape,
            data: vec![S::zero(); n],
            grad: None,
        })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: S) -> Result<Self> {
        let mut t = Self::zeros(shape)?;
        t.data.iter_mut().for_each(|x| *x = value);
        Ok(t)
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
        }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err!("ragged rows"));
        }
        Self::new([rows.len(), cols], rows.concat())
    }

    /// Normal(0, std) initialization from the caller's RNG.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Result<Self> {
        let shape = shape.into();
        let n = check_dims(&shape)?;
        let dist = Normal::new(0.0, std).map_err(|e| contract_err!("bad std {std}: {e}"))?;
        let data = (0..n).map(|_| S::lit(dist.sample(rng))).collect();
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [S]> {
        self.grad.as_deref_mut()
    }

    pub fn set_grad(&mut self, grad: Vec<S>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(shape_err!(
                "gradient of length {} for tensor of shape {:?}",
                grad.len(),
                self.shape
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|x| *x = S::zero()),
            None => self.grad = Some(vec![S::zero(); self.data.len()]),
        }
    }

    /// Adds `delta` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[S]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let g = self.grad.get_or_insert_with(|| vec![S::zero(); delta.len()]);
        add_into(g, delta);
    }

    /// Splits a rank-2 shape into `(rows, cols)`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(shape_err!("expected a matrix, got shape {:?}", self.shape)),
        }
    }

    pub fn row(&self, i: usize) -> &[S] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| T::lit(x.to_f64_lossy())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|x| T::lit(x.to_f64_lossy())).collect()),
        }
    }

    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(shape_err!(
                "matmul of {:?} by {:?}: inner dimensions disagree",
                self.shape,
                other.shape
            ));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_acc(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new([m, n], out)
    }

    /// Softmax along `axis`, max-subtracted so large inputs cannot overflow.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<S>> {
        let layout = AxisLayout::new(&self.shape, axis)?;
        let mut out = self.data.clone();
        layout.for_each_lane(|idx| softmax_lane(&mut out, idx));
        Tensor::new(self.shape.clone(), out)
    }

    /// Layer normalization over the last axis followed by the affine map.
    pub fn layer_norm(&self, gain: &[S], bias: &[S]) -> Result<Tensor<S>> {
        let d = *self.shape.last().ok_or_else(|| shape_err!("layer_norm of a scalar"))?;
        if d < 2 {
            return Err(shape_err!("layer_norm needs at least 2 features, got {d}"));
        }
        if gain.len() != d || bias.len() != d {
            return Err(shape_err!(
                "layer_norm affine of length {}/{} for feature size {d}",
                gain.len(),
                bias.len()
            ));
        }
        let mut out = vec![S::zero(); self.data.len()];
        for (x, y) in self.data.chunks(d).zip(out.chunks_mut(d)) {
            let (mean, rstd) = moments(x);
            for j in 0..d {
                y[j] = (x[j] - mean) * rstd * gain[j] + bias[j];
            }
        }
        Tensor::new(self.shape.clone(), out)
    }
}

/// Index arithmetic for reducing along one axis of a row-major array.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisLayout {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
}

impl AxisLayout {
    pub fn new(shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(shape_err!("axis {axis} out of range for shape {shape:?}"));
        }
        let len = shape[axis];
        if len == 0 {
            return Err(shape_err!("softmax over an empty axis"));
        }
        Ok(AxisLayout {
            outer: shape[..axis].iter().product(),
            len,
            inner: shape[axis + 1..].iter().product(),
        })
    }

    /// Calls `f` with the flat indices of every lane along the axis.
    pub fn for_each_lane(&self, mut f: impl FnMut(&[usize])) {
        let mut idx = vec![0; self.len];
        for o in 0..self.outer {
            for i in 0..self.inner {
                for (a, slot) in idx.iter_mut().enumerate() {
                    *slot = (o * self.len + a) * self.inner + i;
                }
                f(&idx);
            }
        }
    }
}

pub(crate) fn softmax_lane<S: Scalar>(buf: &mut [S], idx: &[usize]) {
    let max = idx.iter().fold(S::neg_infinity(), |m, &i| m.max(buf[i]));
    let mut total = S::zero();
    for &i in idx {
        let e = (buf[i] - max).exp();
        buf[i] = e;
        total = total + e;
    }
    for &i in idx {
        buf[i] = buf[i] / total;
    }
}

/// Returns `(mean, 1/sqrt(var + eps))` of a feature vector.
pub(crate) fn moments<S: Scalar>(x: &[S]) -> (S, S) {
    let n = S::lit(x.len() as f64);
    let mean = x.iter().copied().sum::<S>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
    (mean, (var + S::lit(LAYER_NORM_EPS)).sqrt().recip())
}

pub(crate) fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aip * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_bt_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = out[i * n + j] + dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn matmul_at_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == S::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aip * bv;
            }
        }
    }
}

pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    // Four accumulators let the compiler vectorize without reassociating.
    let mut acc = [S::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] = acc[l] + a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut tail = S::zero();
    for i in chunks * 4..a.len() {
        tail = tail + a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Cosine similarity; zero vectors give 0.
pub fn cosine<S: Scalar>(a: &[S], b: &[S]) -> S {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == S::zero() || nb == S::zero() {
        return S::zero();
    }
    dot(a, b) / (na * nb)
}
