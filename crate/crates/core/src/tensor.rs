//! Dense row-major tensors of f64 and the small fixed contraction set the
//! attention modules are built on.
//!
//! Tensors are immutable values once constructed; every operation returns a
//! fresh tensor. All arithmetic is in 64-bit floats so the exact theorem
//! constructions verify to near machine precision.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// A boolean mask with the same row-major layout as a 2-D tensor.
/// `true` means the entry is visible/valid.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    keep: Vec<bool>,
}

impl Mask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut keep = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                keep.push(f(i, j));
            }
        }
        Mask { rows, cols, keep }
    }

    pub fn all_visible(rows: usize, cols: usize) -> Self {
        Mask {
            rows,
            cols,
            keep: vec![true; rows * cols],
        }
    }

    #[inline]
    pub fn visible(&self, i: usize, j: usize) -> bool {
        self.keep[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.keep[i * self.cols..(i + 1) * self.cols]
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&s| s == 0) {
            return Err(Error::InvalidShape {
                shape,
                reason: "all dimensions must be >= 1".into(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("shape product {} != data length {}", numel, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|x| x.len()).unwrap_or(0);
        if rows.iter().any(|x| x.len() != c) {
            return Err(Error::InvalidShape {
                shape: vec![r, c],
                reason: "ragged rows".into(),
            });
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    /// Column vector from a slice of values.
    pub fn column(values: &[f64]) -> Self {
        Tensor {
            shape: vec![values.len(), 1],
            data: values.to_vec(),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f(&idx));
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Number of rows / columns of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    #[inline]
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.flat_index(index)]
    }

    #[inline]
    pub fn set(&mut self, index: &[usize], v: f64) {
        let i = self.flat_index(index);
        self.data[i] = v;
    }

    #[inline]
    fn flat_index(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0usize;
        for (ax, &i) in index.iter().enumerate() {
            debug_assert!(i < self.shape[ax]);
            flat = flat * self.shape[ax] + i;
        }
        flat
    }

    /// Metadata-only reshape; the row-major layout makes this free.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.iter().any(|&s| s == 0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "transpose expects a 2-D tensor".into(),
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(out)
    }

    /// Swap the first two axes of a tensor with rank >= 2.
    pub fn swap_axes01(&self) -> Result<Tensor> {
        if self.shape.len() < 2 {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "swap_axes01 expects rank >= 2".into(),
            });
        }
        let a = self.shape[0];
        let b = self.shape[1];
        let inner: usize = self.shape[2..].iter().product();
        let mut shape = self.shape.clone();
        shape.swap(0, 1);
        let mut data = vec![0.0; self.data.len()];
        for i in 0..a {
            for j in 0..b {
                let src = (i * b + j) * inner;
                let dst = (j * a + i) * inner;
                data[dst..dst + inner].copy_from_slice(&self.data[src..src + inner]);
            }
        }
        Ok(Tensor { shape, data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape("add", &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape("sub", &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|a| a * s).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    /// Max absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Horizontal concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let m = parts
            .first()
            .ok_or_else(|| Error::Other("concat_cols of empty list".into()))?
            .rows();
        let mut total = 0usize;
        for p in parts {
            if p.shape.len() != 2 || p.rows() != m {
                return Err(Error::shape("concat_cols", &parts[0].shape, &p.shape));
            }
            total += p.cols();
        }
        let mut out = Tensor::zeros(&[m, total]);
        for i in 0..m {
            let mut off = 0usize;
            for p in parts {
                let c = p.cols();
                out.data[i * total + off..i * total + off + c]
                    .copy_from_slice(&p.data[i * c..(i + 1) * c]);
                off += c;
            }
        }
        Ok(out)
    }

    /// Vertical concatenation of 2-D tensors with equal column counts.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let c = parts
            .first()
            .ok_or_else(|| Error::Other("concat_rows of empty list".into()))?
            .cols();
        let mut rows = 0usize;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.len() != 2 || p.cols() != c {
                return Err(Error::shape("concat_rows", &parts[0].shape, &p.shape));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Tensor::new(vec![rows, c], data)
    }

    /// Columns `[lo, hi)` of a 2-D tensor.
    pub fn slice_cols(&self, lo: usize, hi: usize) -> Result<Tensor> {
        if self.shape.len() != 2 || hi > self.cols() || lo >= hi {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("slice_cols {}..{} out of range", lo, hi),
            });
        }
        let m = self.rows();
        let n = self.cols();
        let w = hi - lo;
        let mut out = Tensor::zeros(&[m, w]);
        for i in 0..m {
            out.data[i * w..(i + 1) * w].copy_from_slice(&self.data[i * n + lo..i * n + hi]);
        }
        Ok(out)
    }
}

/// A^i by repeated multiplication; A^0 is the identity.
pub fn matrix_power(a: &Tensor, i: usize) -> Result<Tensor> {
    if a.shape().len() != 2 || a.rows() != a.cols() {
        return Err(Error::InvalidShape {
            shape: a.shape().to_vec(),
            reason: "matrix_power expects a square matrix".into(),
        });
    }
    let mut acc = Tensor::eye(a.rows());
    for _ in 0..i {
        acc = matmul(&acc, a)?;
    }
    Ok(acc)
}

/// Standard matrix product of 2-D tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Row-wise softmax with optional visibility mask. Masked entries come out
/// exactly 0; each row is stabilized by subtracting its max over the visible
/// set before exponentiation.
pub fn softmax_rows(s: &Tensor, mask: Option<&Mask>) -> Result<Tensor> {
    if s.shape().len() != 2 {
        return Err(Error::InvalidShape {
            shape: s.shape().to_vec(),
            reason: "softmax_rows expects a 2-D tensor".into(),
        });
    }
    let (m, n) = (s.rows(), s.cols());
    if let Some(mk) = mask {
        if mk.rows != m || mk.cols != n {
            return Err(Error::shape("softmax mask", s.shape(), &[mk.rows, mk.cols]));
        }
    }
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let row = &s.data[i * n..(i + 1) * n];
        let vis = |j: usize| mask.map_or(true, |mk| mk.visible(i, j));
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if vis(j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: i });
        }
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if vis(j) {
                let e = (v - max).exp();
                out.data[i * n + j] = e;
                sum += e;
            }
        }
        for j in 0..n {
            out.data[i * n + j] /= sum;
        }
    }
    Ok(out)
}

/// The fixed contraction set. Descriptors follow einsum notation but only
/// these three are implemented:
///
/// * `"mhp,nmd->hpnd"` — mix per-head projections into pseudo-heads
/// * `"hp,hnpd->hnd"`  — block-diagonal collapse of pseudo outputs
/// * `"hq,qnd->hnd"`   — general collapse over the flattened HP axis
pub fn contract(descriptor: &str, operands: &[&Tensor]) -> Result<Tensor> {
    match descriptor {
        "mhp,nmd->hpnd" => {
            let [alpha, x] = two(operands)?;
            let (sm, sh, sp) = dims3(alpha, "mhp")?;
            let (sn, xm, sd) = dims3(x, "nmd")?;
            if xm != sm {
                return Err(Error::shape("mhp,nmd->hpnd", alpha.shape(), x.shape()));
            }
            let mut out = Tensor::zeros(&[sh, sp, sn, sd]);
            for h in 0..sh {
                for p in 0..sp {
                    for n in 0..sn {
                        for m in 0..sm {
                            let a = alpha.data[(m * sh + h) * sp + p];
                            if a == 0.0 {
                                continue;
                            }
                            let xoff = (n * sm + m) * sd;
                            let ooff = ((h * sp + p) * sn + n) * sd;
                            for d in 0..sd {
                                out.data[ooff + d] += a * x.data[xoff + d];
                            }
                        }
                    }
                }
            }
            Ok(out)
        }
        "hp,hnpd->hnd" => {
            let [r, t] = two(operands)?;
            let (rh, rp) = dims2(r, "hp")?;
            if t.shape().len() != 4 || t.shape()[0] != rh || t.shape()[2] != rp {
                return Err(Error::shape("hp,hnpd->hnd", r.shape(), t.shape()));
            }
            let (sn, sd) = (t.shape()[1], t.shape()[3]);
            let mut out = Tensor::zeros(&[rh, sn, sd]);
            for h in 0..rh {
                for n in 0..sn {
                    for p in 0..rp {
                        let c = r.data[h * rp + p];
                        if c == 0.0 {
                            continue;
                        }
                        let toff = ((h * sn + n) * rp + p) * sd;
                        let ooff = (h * sn + n) * sd;
                        for d in 0..sd {
                            out.data[ooff + d] += c * t.data[toff + d];
                        }
                    }
                }
            }
            Ok(out)
        }
        "hq,qnd->hnd" => {
            let [r, t] = two(operands)?;
            let (rh, rq) = dims2(r, "hq")?;
            let (tq, sn, sd) = dims3(t, "qnd")?;
            if tq != rq {
                return Err(Error::shape("hq,qnd->hnd", r.shape(), t.shape()));
            }
            let mut out = Tensor::zeros(&[rh, sn, sd]);
            for h in 0..rh {
                for q in 0..rq {
                    let c = r.data[h * rq + q];
                    if c == 0.0 {
                        continue;
                    }
                    for n in 0..sn {
                        let toff = (q * sn + n) * sd;
                        let ooff = (h * sn + n) * sd;
                        for d in 0..sd {
                            out.data[ooff + d] += c * t.data[toff + d];
                        }
                    }
                }
            }
            Ok(out)
        }
        other => Err(Error::UnknownContraction(other.to_string())),
    }
}

fn two<'a>(operands: &[&'a Tensor]) -> Result<[&'a Tensor; 2]> {
    if operands.len() != 2 {
        return Err(Error::Other(format!(
            "contraction expects 2 operands, got {}",
            operands.len()
        )));
    }
    Ok([operands[0], operands[1]])
}

fn dims2(t: &Tensor, what: &'static str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: format!("operand `{}` must be rank 2", what),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn dims3(t: &Tensor, what: &'static str) -> Result<(usize, usize, usize)> {
    if t.shape().len() != 3 {
        return Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: format!("operand `{}` must be rank 3", what),
        });
    }
    Ok((t.shape()[0], t.shape()[1], t.shape()[2]))
}

/// Numerical rank by Gaussian elimination with partial pivoting. A pivot is
/// accepted iff |pivot| > tol * max|entry of the input|. Row reduction is
/// cheaper than an SVD and adequate for upper-bound rank checks.
pub fn numerical_rank(a: &Tensor, tol: f64) -> Result<usize> {
    if a.shape().len() != 2 {
        return Err(Error::InvalidShape {
            shape: a.shape().to_vec(),
            reason: "numerical_rank expects a 2-D tensor".into(),
        });
    }
    if tol <= 0.0 {
        return Err(Error::InvalidConfig("numerical_rank tol must be > 0".into()));
    }
    let (m, n) = (a.rows(), a.cols());
    let threshold = tol * a.max_abs();
    let mut w = a.data.clone();
    let mut rank = 0usize;
    let mut row = 0usize;
    for col in 0..n {
        if row >= m {
            break;
        }
        let mut best = row;
        for r in row + 1..m {
            if w[r * n + col].abs() > w[best * n + col].abs() {
                best = r;
            }
        }
        if w[best * n + col].abs() <= threshold {
            continue;
        }
        if best != row {
            for j in 0..n {
                w.swap(row * n + j, best * n + j);
            }
        }
        let pivot = w[row * n + col];
        for r in row + 1..m {
            let factor = w[r * n + col] / pivot;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                w[r * n + j] -= factor * w[row * n + j];
            }
        }
        rank += 1;
        row += 1;
    }
    Ok(rank)
}
