//! Dense row-major `f64` tensors and the numeric kernels shared by the
//! autodiff graph and the eager decoding path.
//!
//! Sequence matrices are stored position-major: a representation of `S`
//! positions with width `d` has shape `[S, d]`, one row per position.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix (all leading axes folded).
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    /// Extent of the trailing axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn select_rows(&self, start: usize, end: usize) -> Tensor {
        let c = self.cols();
        Tensor { shape: vec![end - start, c], data: self.data[start * c..end * c].to_vec() }
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let [r, c] = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor { shape: vec![c, r], data: out })
    }

    pub fn dims2(&self) -> Result<[usize; 2]> {
        match self.shape.as_slice() {
            &[r, c] => Ok([r, c]),
            s => Err(Error::Shape(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let [m, k] = self.dims2()?;
        let [k2, n] = other.dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &other.data, false, &mut out, 0.0);
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "elementwise shapes disagree: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = axis_split(&self.shape, axis)?;
        let mut out = self.data.clone();
        softmax_strided(&mut out, outer, len, inner);
        Ok(Tensor { shape: self.shape.clone(), data: out })
    }
}

/// Splits a shape around `axis` into (outer, axis extent, inner) counts.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub(crate) fn softmax_strided(data: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(data[base + j * inner]);
            }
            let mut total = 0.0;
            for j in 0..len {
                let e = (data[base + j * inner] - max).exp();
                data[base + j * inner] = e;
                total += e;
            }
            for j in 0..len {
                data[base + j * inner] /= total;
            }
        }
    }
}

/// `out = beta * out + op(a) · op(b)` where `op` optionally transposes.
///
/// `a` is `m×k` after `op`, `b` is `k×n` after `op`; both are stored row-major
/// in their untransposed layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    out: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every access the strides can produce.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row layout of packed variable-length sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn from_lens(lens: impl IntoIterator<Item = usize>) -> Self {
        let mut offsets = vec![0];
        for len in lens {
            let last = *offsets.last().unwrap();
            offsets.push(last + len);
        }
        Segments { offsets }
    }

    pub fn count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn len_of(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }
}

/// Which query/key pairs may attend to each other.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub queries: Segments,
    pub keys: Segments,
    /// One flag per packed key row; padding keys are `false`.
    pub key_valid: Vec<bool>,
    pub causal: bool,
    pub heads: usize,
}

impl AttentionLayout {
    pub fn allowed(&self, seg: usize, qi: usize, kj: usize) -> bool {
        self.key_valid[self.keys.range(seg).start + kj] && (!self.causal || kj <= qi)
    }
}

/// Multi-head scaled dot-product attention over packed segments.
///
/// Returns the `[Tq, d]` output and the attention probabilities, laid out
/// per segment then per head as dense `lq × lk` blocks.
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    layout: &AttentionLayout,
) -> (Vec<f64>, Vec<f64>) {
    let heads = layout.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; layout.queries.total() * d];
    let mut probs = Vec::new();
    for seg in 0..layout.queries.count() {
        let qr = layout.queries.range(seg);
        let kr = layout.keys.range(seg);
        let (lq, lk) = (qr.len(), kr.len());
        for h in 0..heads {
            let base = probs.len();
            probs.resize(base + lq * lk, 0.0);
            let p = &mut probs[base..];
            for i in 0..lq {
                let qrow = &q[(qr.start + i) * d + h * dh..][..dh];
                let prow = &mut p[i * lk..(i + 1) * lk];
                let mut max = f64::NEG_INFINITY;
                for j in 0..lk {
                    if layout.allowed(seg, i, j) {
                        let krow = &k[(kr.start + j) * d + h * dh..][..dh];
                        let s = dot(qrow, krow) * scale;
                        prow[j] = s;
                        max = max.max(s);
                    }
                }
                if max == f64::NEG_INFINITY {
                    prow.iter_mut().for_each(|x| *x = 0.0);
                    continue;
                }
                let mut total = 0.0;
                for j in 0..lk {
                    if layout.allowed(seg, i, j) {
                        let e = (prow[j] - max).exp();
                        prow[j] = e;
                        total += e;
                    } else {
                        prow[j] = 0.0;
                    }
                }
                let orow = &mut out[(qr.start + i) * d + h * dh..][..dh];
                for j in 0..lk {
                    prow[j] /= total;
                    let pj = prow[j];
                    if pj != 0.0 {
                        let vrow = &v[(kr.start + j) * d + h * dh..][..dh];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += pj * x;
                        }
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Gradients of [`attention_forward`] with respect to q, k and v.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    grad_out: &[f64],
    d: usize,
    layout: &AttentionLayout,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let heads = layout.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut offset = 0;
    let mut dp = Vec::new();
    for seg in 0..layout.queries.count() {
        let qr = layout.queries.range(seg);
        let kr = layout.keys.range(seg);
        let (lq, lk) = (qr.len(), kr.len());
        for h in 0..heads {
            let p = &probs[offset..offset + lq * lk];
            offset += lq * lk;
            dp.clear();
            dp.resize(lk, 0.0);
            for i in 0..lq {
                let go = &grad_out[(qr.start + i) * d + h * dh..][..dh];
                let prow = &p[i * lk..(i + 1) * lk];
                let mut weighted = 0.0;
                for j in 0..lk {
                    if prow[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let vrow = &v[(kr.start + j) * d + h * dh..][..dh];
                    dp[j] = dot(go, vrow);
                    weighted += dp[j] * prow[j];
                    let dvrow = &mut dv[(kr.start + j) * d + h * dh..][..dh];
                    for (x, &g) in dvrow.iter_mut().zip(go) {
                        *x += prow[j] * g;
                    }
                }
                let qrow = &q[(qr.start + i) * d + h * dh..][..dh];
                for j in 0..lk {
                    if prow[j] == 0.0 {
                        continue;
                    }
                    let ds = prow[j] * (dp[j] - weighted) * scale;
                    let krow = &k[(kr.start + j) * d + h * dh..][..dh];
                    let dqrow = &mut dq[(qr.start + i) * d + h * dh..][..dh];
                    for (x, &kv) in dqrow.iter_mut().zip(krow) {
                        *x += ds * kv;
                    }
                    let dkrow = &mut dk[(kr.start + j) * d + h * dh..][..dh];
                    for (x, &qv) in dkrow.iter_mut().zip(qrow) {
                        *x += ds * qv;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-wise layer normalization. Returns `(y, xhat, rstd)`.
pub(crate) fn layer_norm_forward(
    x: &[f64],
    width: usize,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / width;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        rstds.push(rstd);
        for c in 0..width {
            let h = (row[c] - mean) * rstd;
            xhat[r * width + c] = h;
            y[r * width + c] = h * gain[c] + bias[c];
        }
    }
    (y, xhat, rstds)
}

/// Positional table `pe[pos, 2i] = sin(pos / 10000^(2i/d))`,
/// `pe[pos, 2i+1] = cos(pos / 10000^(2i/d))`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len.max(1), d]);
    for pos in 0..len {
        for c in 0..d {
            let pair = (c / 2) * 2;
            let angle = pos as f64 / 10000f64.powf(pair as f64 / d as f64);
            t.data[pos * d + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}
