//! Dense row-major tensors and the handful of kernels the rest of the crate
//! is built from.
//!
//! Every reduction runs in a fixed order so repeated runs are bit-identical.
//! Parallel kernels split work across independent output rows only.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Work below this many multiply-adds stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

/// Floating-point precision tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::Single => "single",
            Precision::Double => "double",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "f32" => Ok(Precision::Single),
            "double" | "f64" => Ok(Precision::Double),
            other => Err(Error::Config(format!("unknown precision '{other}'"))),
        }
    }
}

/// Element type of a [`Tensor`]: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const PRECISION: Precision;

    /// Denominator guard used by kernel row normalization.
    fn gka_epsilon() -> Self;

    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::Single;

    fn gka_epsilon() -> Self {
        1e-6
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::Double;

    fn gka_epsilon() -> Self {
        1e-12
    }
}

/// Dense row-major array with an explicit shape.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Param(format!("tensor extents must be >= 1, got {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::Param(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// # Panics
    /// If any extent is zero or `shape` is empty.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = check_shape(shape).expect("valid shape");
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = check_shape(shape).expect("valid shape");
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// 2-D tensor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        let data = rows.iter().flatten().map(|&v| T::of(v)).collect();
        Self::new(&[r, c], data).expect("valid rows")
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::of(v)).collect())
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
    }

    /// Entries drawn i.i.d. from U(-bound, bound).
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::of(rng.gen_range(-bound..=bound)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// Number of rows when viewed as `[prod(leading), last]`.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.last_dim();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Param(format!(
                "expected a rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// `[B, N, D]` extents of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [b, n, d] => Ok((b, n, d)),
            _ => Err(Error::Param(format!(
                "expected a rank-3 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn at(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: T) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank");
        idx.iter().zip(&self.shape).fold(0, |acc, (&i, &e)| {
            assert!(i < e, "index {idx:?} out of bounds for {:?}", self.shape);
            acc * e + i
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn into_reshape(self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = Self::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("sub", &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: T, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("axpy", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Adds `bias` (length = last axis) to every row.
    pub fn add_row_vector(&mut self, bias: &[T]) -> Result<()> {
        if bias.len() != self.last_dim() {
            return Err(Error::shape("add_row_vector", &self.shape, &[bias.len()]));
        }
        let c = bias.len();
        for row in self.data.chunks_mut(c) {
            for (v, &b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(())
    }

    /// Column sums over all rows: the gradient of a broadcast bias.
    pub fn sum_rows(&self) -> Vec<T> {
        let c = self.last_dim();
        let mut acc = vec![T::zero(); c];
        for row in self.data.chunks(c) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        acc
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    /// Max-norm relative difference `max|a-b| / max|b|` (0 when both are 0).
    pub fn rel_diff(&self, reference: &Self) -> f64 {
        let diff = self.max_abs_diff(reference);
        let scale = reference.max_abs().as_f64();
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }

    /// Converts to another precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }
}

/// `a [M×K] · b [K×P]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, p) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(&[m, p]);
    gemm_into(a.data(), b.data(), out.data_mut(), m, k, p);
    Ok(out)
}

/// Raw kernel: `c[M×P] += a[M×K] · b[K×P]`. Each output element accumulates
/// over `k` in ascending order regardless of threading.
pub fn gemm_into<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, p: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(c.len(), m * p);
    let row_kernel = |(i, crow): (usize, &mut [T])| {
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[kk * p..(kk + 1) * p];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if m * k * p >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(p).enumerate().for_each(row_kernel);
    } else {
        c.chunks_mut(p).enumerate().for_each(row_kernel);
    }
}

/// `aᵀ · b` for `a [K×M]`, `b [K×P]`, without materializing the transpose.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = a.dims2()?;
    let (k2, p) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = Tensor::zeros(&[m, p]);
    let row_kernel = |(i, crow): (usize, &mut [T])| {
        for kk in 0..k {
            let av = ad[kk * m + i];
            if av == T::zero() {
                continue;
            }
            let brow = &bd[kk * p..(kk + 1) * p];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if m * k * p >= PAR_THRESHOLD && m > 1 {
        out.data_mut().par_chunks_mut(p).enumerate().for_each(row_kernel);
    } else {
        out.data_mut().chunks_mut(p).enumerate().for_each(row_kernel);
    }
    Ok(out)
}

/// `a · bᵀ` for `a [M×K]`, `b [P×K]`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (p, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = Tensor::zeros(&[m, p]);
    let row_kernel = |(i, crow): (usize, &mut [T])| {
        let arow = &ad[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            *cv = dot(arow, &bd[j * k..(j + 1) * k]);
        }
    };
    if m * k * p >= PAR_THRESHOLD && m > 1 {
        out.data_mut().par_chunks_mut(p).enumerate().for_each(row_kernel);
    } else {
        out.data_mut().chunks_mut(p).enumerate().for_each(row_kernel);
    }
    Ok(out)
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Layer normalization over the last axis.
///
/// `gamma`/`beta` may be omitted for a parameter-free normalization.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gamma: Option<&[T]>, beta: Option<&[T]>, eps: T) -> Result<Tensor<T>> {
    let d = x.last_dim();
    for p in [gamma, beta].into_iter().flatten() {
        if p.len() != d {
            return Err(Error::shape("layer_norm", x.shape(), &[p.len()]));
        }
    }
    let mut out = x.clone();
    let inv_d = T::one() / T::of(d as f64);
    for row in out.data_mut().chunks_mut(d) {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            let mut y = (*v - mean) * rstd;
            if let Some(g) = gamma {
                y *= g[j];
            }
            if let Some(b) = beta {
                y += b[j];
            }
            *v = y;
        }
    }
    Ok(out)
}

/// Gradients of [`layer_norm`]: `(grad_x, grad_gamma, grad_beta)`.
pub fn layer_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: Option<&[T]>,
    grad_out: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    if x.shape() != grad_out.shape() {
        return Err(Error::shape("layer_norm_backward", x.shape(), grad_out.shape()));
    }
    let d = x.last_dim();
    let inv_d = T::one() / T::of(d as f64);
    let mut gx = Tensor::zeros(x.shape());
    let mut ggamma = vec![T::zero(); d];
    let mut gbeta = vec![T::zero(); d];
    let mut xhat = vec![T::zero(); d];
    let mut gxhat = vec![T::zero(); d];
    for ((row, grow), gxrow) in x
        .data()
        .chunks(d)
        .zip(grad_out.data().chunks(d))
        .zip(gx.data_mut().chunks_mut(d))
    {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        for j in 0..d {
            xhat[j] = (row[j] - mean) * rstd;
            ggamma[j] += grow[j] * xhat[j];
            gbeta[j] += grow[j];
            gxhat[j] = match gamma {
                Some(g) => grow[j] * g[j],
                None => grow[j],
            };
        }
        let mean_g = gxhat.iter().copied().sum::<T>() * inv_d;
        let mean_gx = gxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
        for j in 0..d {
            gxrow[j] = rstd * (gxhat[j] - mean_g - xhat[j] * mean_gx);
        }
    }
    Ok((gx, ggamma, gbeta))
}

/// Row-wise max-shifted softmax over the last axis.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if !x.is_finite() && x.data().iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("softmax_rows input".into()));
    }
    let mut out = x.clone();
    let c = x.last_dim();
    for row in out.data_mut().chunks_mut(c) {
        softmax_in_place(row);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh-approximated GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k) = a.dims2().unwrap();
        let (_, p) = b.dims2().unwrap();
        let mut out = Tensor::zeros(&[m, p]);
        for i in 0..m {
            for j in 0..p {
                let mut s = 0.0;
                for kk in 0..k {
                    s += a.at(&[i, kk]) * b.at(&[kk, j]);
                }
                out.set(&[i, j], s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let a = Tensor::<f64>::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.5]]);
        assert_eq!(matmul(&Tensor::eye(3), &a).unwrap(), a);

        let a = Tensor::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Tensor::<f64>::from_rows(&[vec![1.0], vec![1.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f64>::randn(&[7, 5], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng);
        let got = matmul(&a, &b).unwrap();
        assert!(got.max_abs_diff(&naive_matmul(&a, &b)) <= 1e-12);
        assert!(matmul_tn(&a.transpose().unwrap(), &b).unwrap().max_abs_diff(&got) <= 1e-12);
        assert!(matmul_nt(&a, &b.transpose().unwrap()).unwrap().max_abs_diff(&got) <= 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn matmul_is_bit_reproducible_when_parallel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f32>::randn(&[64, 96], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(&[96, 80], 1.0, &mut rng);
        let first = matmul(&a, &b).unwrap();
        for _ in 0..3 {
            assert_eq!(matmul(&a, &b).unwrap(), first);
        }
    }

    #[test]
    fn matmul_associativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let a = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
            let b = Tensor::<f64>::randn(&[3, 5], 1.0, &mut rng);
            let c = Tensor::<f64>::randn(&[5, 2], 1.0, &mut rng);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            assert!(left.max_abs_diff(&right) <= 1e-10);
        }
    }

    #[test]
    fn layer_norm_cases() {
        let x = Tensor::<f64>::from_rows(&[vec![3.0, 3.0, 3.0]]);
        let y = layer_norm(&x, Some(&[1.0; 3]), Some(&[0.0; 3]), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let x = Tensor::<f64>::from_rows(&[vec![1.0, 3.0]]);
        let y = layer_norm(&x, Some(&[1.0; 2]), Some(&[0.0; 2]), 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::randn(&[1, 32], 3.0, &mut rng);
        let y = layer_norm(&x, None, None, 1e-5).unwrap();
        let mean = y.sum() / 32.0;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
        assert!(mean.abs() <= 1e-6);
        assert!((var - 1.0).abs() <= 1e-4);

        let shifted = layer_norm(&x.map(|v| v + 17.0), None, None, 1e-5).unwrap();
        assert!(shifted.max_abs_diff(&y) <= 1e-6);

        let err = layer_norm(&x, Some(&[1.0; 3]), None, 1e-5);
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(&[3, 6], 1.0, &mut rng);
        let gamma: Vec<f64> = (0..6).map(|i| 0.5 + i as f64 * 0.1).collect();
        let beta: Vec<f64> = (0..6).map(|i| i as f64 * -0.2).collect();
        let w = Tensor::<f64>::randn(&[3, 6], 1.0, &mut rng);
        let loss = |x: &Tensor<f64>, g: &[f64], b: &[f64]| {
            let y = layer_norm(x, Some(g), Some(b), 1e-5).unwrap();
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (gx, gg, gb) = layer_norm_backward(&x, Some(&gamma), &w, 1e-5).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&xp, &gamma, &beta) - loss(&xm, &gamma, &beta)) / (2.0 * h);
            assert!((fd - gx.data()[i]).abs() < 1e-7, "x[{i}]");
        }
        for j in 0..6 {
            let mut gp = gamma.clone();
            gp[j] += h;
            let mut gm = gamma.clone();
            gm[j] -= h;
            let fd = (loss(&x, &gp, &beta) - loss(&x, &gm, &beta)) / (2.0 * h);
            assert!((fd - gg[j]).abs() < 1e-7);
            let mut bp = beta.clone();
            bp[j] += h;
            let mut bm = beta.clone();
            bm[j] -= h;
            let fd = (loss(&x, &gamma, &bp) - loss(&x, &gamma, &bm)) / (2.0 * h);
            assert!((fd - gb[j]).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_cases() {
        let y = softmax_rows(&Tensor::<f64>::zeros(&[1, 4])).unwrap();
        assert_eq!(y.data(), &[0.25; 4]);

        let y = softmax_rows(&Tensor::<f64>::from_rows(&[vec![1f64.ln(), 3f64.ln()]])).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15 && (y.data()[1] - 0.75).abs() < 1e-15);

        let big = softmax_rows(&Tensor::<f64>::from_rows(&[vec![1000.0, 1001.0]])).unwrap();
        let small = softmax_rows(&Tensor::<f64>::from_rows(&[vec![0.0, 1.0]])).unwrap();
        assert!(big.max_abs_diff(&small) < 1e-15);

        let nan = Tensor::<f64>::from_rows(&[vec![f64::NAN, 1.0]]);
        assert!(matches!(softmax_rows(&nan), Err(Error::NonFinite(_))));
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn reshape_preserves_contents_and_rejects_bad_counts() {
        let t = Tensor::<f32>::from_fn(&[2, 3, 4], |i| i as f32);
        let r = t.reshape(&[6, 4]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(&[5, 5]).is_err());
        assert!(Tensor::<f32>::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
    }
}
