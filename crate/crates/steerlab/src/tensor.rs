//! Dense row-major f64 tensors and the pure kernels behind every operation.
//!
//! Tensors are immutable once built; all kernels allocate fresh outputs and
//! never mutate their inputs. The differentiation tape ([`crate::tape`]) calls
//! the same kernels for its forward values, so tracked and untracked
//! evaluation of the same expression produce bitwise-identical numbers.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Row-major dense tensor of f64 values. Cloning is cheap (shared storage).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Shape {
                op: "Tensor::new",
                detail: format!("shape {:?} wants {} values, got {}", shape, expect, data.len()),
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "Tensor::new",
                detail: format!("zero-sized dimension in {:?}", shape),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![x]),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; n]),
        }
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        Tensor {
            shape: vec![v.len()],
            data: Arc::new(v),
        }
    }

    /// Gaussian init with the given std, from the caller's RNG stream.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Take the storage out without copying when uniquely owned.
    pub fn into_data(self) -> Vec<f64> {
        match Arc::try_unwrap(self.data) {
            Ok(v) => v,
            Err(arc) => arc.as_ref().clone(),
        }
    }

    /// Mutable view for optimizers. Copies on write if the storage is shared
    /// (e.g. still referenced by a tape), so other holders never observe the
    /// mutation.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Rows of a 2-d tensor (a 1-d tensor counts as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on rank-{} tensor", self.shape.len()),
        }
    }

    /// Columns of a 1-d or 2-d tensor.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Same storage, new shape (element count must match).
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != self.len() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape, shape),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

pub(crate) fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            detail: format!(
                "inner dimensions disagree: {:?} x {:?} ({} vs {})",
                a.shape(),
                b.shape(),
                k,
                k2
            ),
        });
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    // 4-row blocks with the k-loop outside: each B row is loaded once per
    // block instead of once per output row. Per-output accumulation order is
    // unchanged (increasing k).
    let mut i = 0;
    while i + 4 <= m {
        let (o0, rest) = out[i * n..].split_at_mut(n);
        let (o1, rest) = rest.split_at_mut(n);
        let (o2, o3full) = rest.split_at_mut(n);
        let o3 = &mut o3full[..n];
        for p in 0..k {
            let brow = &bd[p * n..(p + 1) * n];
            let a0 = ad[i * k + p];
            let a1 = ad[(i + 1) * k + p];
            let a2 = ad[(i + 2) * k + p];
            let a3 = ad[(i + 3) * k + p];
            for j in 0..n {
                let bv = brow[j];
                o0[j] += a0 * bv;
                o1[j] += a1 * bv;
                o2[j] += a2 * bv;
                o3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    while i < m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
        i += 1;
    }
    Tensor::new(vec![m, n], out)
}

#[inline]
fn chunk8(s: &[f64], o: usize) -> &[f64; 8] {
    s[o..o + 8].try_into().expect("8-wide chunk")
}

/// Four dot products sharing one right-hand row load.
#[inline]
fn dot4(a0: &[f64], a1: &[f64], a2: &[f64], a3: &[f64], b: &[f64]) -> [f64; 4] {
    let k = b.len();
    let k8 = k - k % 8;
    let mut acc = [[0.0f64; 8]; 4];
    let mut o = 0;
    while o < k8 {
        let bb = chunk8(b, o);
        let c0 = chunk8(a0, o);
        let c1 = chunk8(a1, o);
        let c2 = chunk8(a2, o);
        let c3 = chunk8(a3, o);
        for l in 0..8 {
            acc[0][l] += c0[l] * bb[l];
            acc[1][l] += c1[l] * bb[l];
            acc[2][l] += c2[l] * bb[l];
            acc[3][l] += c3[l] * bb[l];
        }
        o += 8;
    }
    let mut out = [0.0f64; 4];
    for (r, bank) in acc.iter().enumerate() {
        out[r] = ((bank[0] + bank[4]) + (bank[1] + bank[5])) + ((bank[2] + bank[6]) + (bank[3] + bank[7]));
        for p in k8..k {
            out[r] += [a0, a1, a2, a3][r][p] * b[p];
        }
    }
    out
}

/// `a [m,k]` times `b^T` where `b` is `[n,k]`. Dot products over contiguous
/// rows of both operands; the hot kernel for linear layers stored `[out,in]`.
/// Rows are processed four at a time so each `b` row is loaded once per block.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul_bt",
            detail: format!("{:?} x {:?}^T", a.shape(), b.shape()),
        });
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m * n];
    let mut i = 0;
    while i + 4 <= m {
        let a0 = &ad[i * k..(i + 1) * k];
        let a1 = &ad[(i + 1) * k..(i + 2) * k];
        let a2 = &ad[(i + 2) * k..(i + 3) * k];
        let a3 = &ad[(i + 3) * k..(i + 4) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            let d = dot4(a0, a1, a2, a3, brow);
            out[i * n + j] = d[0];
            out[(i + 1) * n + j] = d[1];
            out[(i + 2) * n + j] = d[2];
            out[(i + 3) * n + j] = d[3];
        }
        i += 4;
    }
    while i < m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &bd[j * k..(j + 1) * k]);
        }
        i += 1;
    }
    Tensor::new(vec![m, n], out)
}

/// Dot product over 32-element chunks with four independent banks of eight
/// accumulator lanes: enough parallel chains to hide FMA latency, while the
/// summation order stays fixed and deterministic.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut l0 = [0.0f64; 8];
    let mut l1 = [0.0f64; 8];
    let mut l2 = [0.0f64; 8];
    let mut l3 = [0.0f64; 8];
    let ca = a.chunks_exact(32);
    let cb = b.chunks_exact(32);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            l0[k] += x[k] * y[k];
        }
        for k in 0..8 {
            l1[k] += x[8 + k] * y[8 + k];
        }
        for k in 0..8 {
            l2[k] += x[16 + k] * y[16 + k];
        }
        for k in 0..8 {
            l3[k] += x[24 + k] * y[24 + k];
        }
    }
    for k in 0..8 {
        l0[k] += l2[k];
        l1[k] += l3[k];
    }
    for k in 0..8 {
        l0[k] += l1[k];
    }
    let mut acc = ((l0[0] + l0[4]) + (l0[1] + l0[5])) + ((l0[2] + l0[6]) + (l0[3] + l0[7]));
    for (x, y) in ra.iter().zip(rb.iter()) {
        acc += x * y;
    }
    acc
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let ad = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out).expect("transpose preserves size")
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    zip_map(a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    zip_map(a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    zip_map(a, b, |x, y| x * y)
}

pub fn minimum(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("minimum", a, b)?;
    zip_map(a, b, |x, y| if x <= y { x } else { y })
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = a.data().iter().map(|&x| f(x)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("map preserves shape")
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    map(a, |x| x * s)
}

pub fn add_scalar(a: &Tensor, s: f64) -> Tensor {
    map(a, |x| x + s)
}

/// `[m,n] + [n]` (row broadcast).
pub fn add_row(a: &Tensor, row: &Tensor) -> Result<Tensor> {
    broadcast_row("add_row", a, row, |x, y| x + y)
}

/// `[m,n] * [n]` (row broadcast).
pub fn mul_row(a: &Tensor, row: &Tensor) -> Result<Tensor> {
    broadcast_row("mul_row", a, row, |x, y| x * y)
}

fn broadcast_row(
    op: &'static str,
    a: &Tensor,
    row: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let n = a.cols();
    if row.len() != n {
        return Err(Error::Shape {
            op,
            detail: format!("matrix {:?} vs row {:?}", a.shape(), row.shape()),
        });
    }
    let rd = row.data();
    let mut out = Vec::with_capacity(a.len());
    for r in 0..a.rows() {
        for (x, y) in a.row(r).iter().zip(rd.iter()) {
            out.push(f(*x, *y));
        }
    }
    Tensor::new(a.shape().to_vec(), out)
}

/// Add `vec` to every row of `a` starting at `start_row` (rows before it are
/// copied through unchanged).
pub fn add_to_rows_from(a: &Tensor, vec: &Tensor, start_row: usize) -> Result<Tensor> {
    let n = a.cols();
    if vec.len() != n {
        return Err(Error::Shape {
            op: "add_to_rows_from",
            detail: format!("matrix {:?} vs vec {:?}", a.shape(), vec.shape()),
        });
    }
    if start_row >= a.rows() {
        return Err(Error::InvalidArgument(format!(
            "start_row {} out of range for {} rows",
            start_row,
            a.rows()
        )));
    }
    let vd = vec.data();
    let mut out = a.data().to_vec();
    for r in start_row..a.rows() {
        for (o, v) in out[r * n..(r + 1) * n].iter_mut().zip(vd.iter()) {
            *o += v;
        }
    }
    Tensor::new(a.shape().to_vec(), out)
}

pub fn relu(a: &Tensor) -> Tensor {
    map(a, |x| if x > 0.0 { x } else { 0.0 })
}

pub fn gelu(a: &Tensor) -> Tensor {
    map(a, gelu_scalar)
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    map(a, sigmoid_scalar)
}

pub fn tanh(a: &Tensor) -> Tensor {
    map(a, f64::tanh)
}

pub fn exp(a: &Tensor) -> Tensor {
    map(a, f64::exp)
}

pub fn clip(a: &Tensor, lo: f64, hi: f64) -> Tensor {
    map(a, |x| x.clamp(lo, hi))
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Exact GELU: `x * Phi(x)` with the Gaussian CDF via `erf`.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// d/dx GELU = Phi(x) + x * phi(x).
#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    normal_cdf(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Error function to near machine precision: Maclaurin series for small |x|,
/// continued-fraction erfc for the tail.
pub fn erf(x: f64) -> f64 {
    if x < 0.0 {
        return -erf(-x);
    }
    if x == 0.0 {
        return 0.0;
    }
    if x < 2.5 {
        // erf(x) = 2/sqrt(pi) * sum_n (-1)^n x^(2n+1) / (n! (2n+1))
        let two_over_sqrt_pi = 1.128_379_167_095_512_6;
        let x2 = x * x;
        let mut term = x;
        let mut sum = x;
        let mut n = 1.0f64;
        loop {
            term *= -x2 / n;
            let contrib = term / (2.0 * n + 1.0);
            sum += contrib;
            if contrib.abs() < 1e-18 * sum.abs().max(1e-300) {
                break;
            }
            n += 1.0;
            if n > 200.0 {
                break;
            }
        }
        two_over_sqrt_pi * sum
    } else if x > 6.5 {
        1.0
    } else {
        1.0 - erfc_cf(x)
    }
}

/// erfc via the continued fraction in 1/(2x^2), evaluated bottom-up.
/// Accurate to machine precision for x >= ~2.
fn erfc_cf(x: f64) -> f64 {
    let u = 1.0 / (2.0 * x * x);
    let mut t = 1.0f64;
    for n in (1..=80u32).rev() {
        t = 1.0 + n as f64 * u / t;
    }
    (-x * x).exp() / (x * std::f64::consts::PI.sqrt()) / t
}

/// Row-wise softmax with a log-sum-exp shift. With `causal`, entry `(i, j)` is
/// masked out for `j > i` (requires a square matrix).
pub fn softmax_rows(a: &Tensor, causal: bool) -> Result<Tensor> {
    let (m, n) = (a.rows(), a.cols());
    if causal && m != n {
        return Err(Error::Shape {
            op: "softmax_rows",
            detail: format!("causal mask requires square matrix, got {:?}", a.shape()),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let lim = if causal { i + 1 } else { n };
        let row = &a.row(i)[..lim];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[i * n..i * n + lim];
        let mut z = 0.0;
        for (o, &v) in orow.iter_mut().zip(row.iter()) {
            let e = (v - mx).exp();
            *o = e;
            z += e;
        }
        for o in orow.iter_mut() {
            *o /= z;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Row-wise log-softmax (shifted).
pub fn log_softmax_rows(a: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = a.row(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
        let lz = mx + z.ln();
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row.iter()) {
            *o = v - lz;
        }
    }
    Tensor::new(vec![m, n], out).expect("shape preserved")
}

/// Row-wise RMS normalization: `x / sqrt(mean(x^2) + eps)`.
pub fn rmsnorm_rows(a: &Tensor, eps: f64) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = a.row(i);
        let inv = rms_inv(row, eps);
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row.iter()) {
            *o = v * inv;
        }
    }
    Tensor::new(vec![m, n], out).expect("shape preserved")
}

#[inline]
pub fn rms_inv(row: &[f64], eps: f64) -> f64 {
    let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
    1.0 / (ms + eps).sqrt()
}

/// Rows of `table` selected by `ids`.
pub fn gather_rows(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let n = table.cols();
    let mut out = Vec::with_capacity(ids.len() * n);
    for &id in ids {
        if id >= table.rows() {
            return Err(Error::InvalidArgument(format!(
                "row index {} out of range ({} rows)",
                id,
                table.rows()
            )));
        }
        out.extend_from_slice(table.row(id));
    }
    Tensor::new(vec![ids.len(), n], out)
}

pub fn slice_cols(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (m, n) = (a.rows(), a.cols());
    if start + len > n {
        return Err(Error::Shape {
            op: "slice_cols",
            detail: format!("cols {}..{} of {:?}", start, start + len, a.shape()),
        });
    }
    let mut out = Vec::with_capacity(m * len);
    for i in 0..m {
        out.extend_from_slice(&a.row(i)[start..start + len]);
    }
    Tensor::new(vec![m, len], out)
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::InvalidArgument("concat_cols of nothing".into()));
    }
    let m = parts[0].rows();
    if parts.iter().any(|p| p.rows() != m) {
        return Err(Error::Shape {
            op: "concat_cols",
            detail: "row counts differ".into(),
        });
    }
    let n: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for p in parts {
            out.extend_from_slice(p.row(i));
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn sum_all(a: &Tensor) -> f64 {
    a.data().iter().sum()
}

pub fn mean_all(a: &Tensor) -> f64 {
    sum_all(a) / a.len() as f64
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// `-log softmax(logits)[target]` for a 1-d logits vector.
pub fn softmax_crossentropy(logits: &Tensor, target: usize) -> Result<f64> {
    if logits.shape().len() > 2 || logits.rows() != 1 {
        return Err(Error::Shape {
            op: "softmax_crossentropy",
            detail: format!("expected a single logits row, got {:?}", logits.shape()),
        });
    }
    if target >= logits.cols() {
        return Err(Error::InvalidArgument(format!(
            "target {} out of vocabulary range {}",
            target,
            logits.cols()
        )));
    }
    let ls = log_softmax_rows(logits);
    Ok(-ls.data()[target])
}

// ---------------------------------------------------------------------------
// Finite-difference gradient oracle
// ---------------------------------------------------------------------------

/// Central-difference gradient estimate of a scalar function of a tensor.
///
/// Each non-finite evaluation is reported with the offending coordinate.
pub fn finite_difference_grad(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    step: f64,
) -> Result<Tensor> {
    if step <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {}",
            step
        )));
    }
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let mut plus = x.data().to_vec();
        let mut minus = x.data().to_vec();
        plus[i] += step;
        minus[i] -= step;
        let fp = f(&Tensor::new(x.shape().to_vec(), plus)?)?;
        let fm = f(&Tensor::new(x.shape().to_vec(), minus)?)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite evaluation at coordinate {} (f+={}, f-={})",
                i, fp, fm
            )));
        }
        grad[i] = (fp - fm) / (2.0 * step);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Max relative error between two gradients, with an absolute floor so that
/// near-zero entries compare absolutely.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: usize, cols: usize, v: Vec<f64>) -> Tensor {
        Tensor::new(vec![rows, cols], v).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let id = t2(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let v = t2(2, 1, vec![3.0, 4.0]);
        assert_eq!(matmul(&id, &v).unwrap().data(), &[3.0, 4.0]);
        let a = t2(1, 1, vec![2.0]);
        let b = t2(1, 1, vec![5.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[10.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        // independent triple-loop product
        let mut expect = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for p in 0..4 {
                    acc += a.data()[i * 4 + p] * b.data()[p * 2 + j];
                }
                expect[i * 2 + j] = acc;
            }
        }
        for (x, y) in c.data().iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-12, "{} vs {}", x, y);
        }
    }

    #[test]
    fn matmul_rejects_shape_mismatch() {
        let a = t2(2, 3, vec![0.0; 6]);
        let b = t2(2, 2, vec![0.0; 4]);
        let err = matmul(&a, &b).unwrap_err();
        assert!(err.to_string().contains("inner dimensions"));
    }

    #[test]
    fn matmul_bt_agrees_with_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let via_bt = matmul_bt(&a, &b).unwrap();
        let via_t = matmul(&a, &transpose(&b)).unwrap();
        for (x, y) in via_bt.data().iter().zip(via_t.data().iter()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn sigmoid_symmetry_and_relu() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        let r = relu(&Tensor::from_vec(vec![-3.0, 0.0, 2.0]));
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
    }

    /// Quadrature oracle for the Gaussian CDF, independent of `erf`.
    fn cdf_by_simpson(x: f64) -> f64 {
        // integrate pdf from 0 to x with composite Simpson
        let n = 20_000;
        let h = x / n as f64;
        let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut acc = pdf(0.0) + pdf(x);
        for i in 1..n {
            let t = i as f64 * h;
            acc += pdf(t) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        0.5 + acc * h / 3.0
    }

    #[test]
    fn gelu_matches_quadrature_oracle() {
        let xs: Vec<f64> = vec![-4.0, -2.5, -1.0, -0.3, 0.0, 0.2, 0.9, 1.7, 2.6, 3.9];
        for &x in &xs {
            let expect = x * cdf_by_simpson(x);
            let got = gelu_scalar(x);
            assert!(
                (got - expect).abs() < 1e-10,
                "gelu({}) = {} vs quadrature {}",
                x,
                got,
                expect
            );
        }
    }

    #[test]
    fn erf_reference_points() {
        // Abramowitz & Stegun table values
        assert!((erf(0.5) - 0.520_499_877_813_046_5).abs() < 1e-14);
        assert!((erf(1.0) - 0.842_700_792_949_714_9).abs() < 1e-14);
        assert!((erf(3.0) - 0.999_977_909_503_001_4).abs() < 1e-13);
        assert!((erf(-1.0) + erf(1.0)).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = Tensor::randn(&[4, 7], 3.0, &mut rng);
            let s = softmax_rows(&a, false).unwrap();
            for i in 0..4 {
                let z: f64 = s.row(i).iter().sum();
                assert!((z - 1.0).abs() < 1e-12);
                assert!(s.row(i).iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn causal_softmax_masks_future() {
        let a = t2(3, 3, vec![1.0; 9]);
        let s = softmax_rows(&a, true).unwrap();
        assert_eq!(s.row(0)[1], 0.0);
        assert_eq!(s.row(0)[2], 0.0);
        assert_eq!(s.row(1)[2], 0.0);
        assert!((s.row(2).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn crossentropy_uniform_and_saturated() {
        let logits = t2(1, 4, vec![0.7; 4]);
        let loss = softmax_crossentropy(&logits, 2).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);

        let mut big = vec![0.0; 4];
        big[1] = 1e3;
        let loss = softmax_crossentropy(&t2(1, 4, big), 1).unwrap();
        assert!(loss.abs() < 1e-9);

        assert!(softmax_crossentropy(&t2(1, 4, vec![0.0; 4]), 4).is_err());
    }

    #[test]
    fn finite_difference_on_square() {
        let x = Tensor::from_vec(vec![3.0]);
        let g = finite_difference_grad(
            &mut |t: &Tensor| Ok(t.data()[0] * t.data()[0]),
            &x,
            1e-5,
        )
        .unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);

        let c = finite_difference_grad(&mut |_| Ok(7.0), &x, 1e-5).unwrap();
        assert_eq!(c.data(), &[0.0]);
    }

    #[test]
    fn kernels_do_not_mutate_inputs() {
        let a = t2(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = t2(2, 2, vec![5.0, 6.0, 7.0, 8.0]);
        let a0 = a.data().to_vec();
        let _ = matmul(&a, &b).unwrap();
        let _ = add(&a, &b).unwrap();
        let _ = gelu(&a);
        let _ = softmax_rows(&a, false).unwrap();
        assert_eq!(a.data(), &a0[..]);
    }
}
