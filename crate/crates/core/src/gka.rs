//! Gaussian kernel attention.
//!
//! Per head, tokens are compared directly (no query/key/value projections):
//!
//! ```text
//! K_ij = exp(-|x_i - x_j|^2 / (2 sigma^2)) * allowed(i, j)
//! W_ij = K_ij / (sum_j' K_ij' + eps)
//! Y_i  = sum_j W_ij x_j
//! ```
//!
//! Heads are concatenated and passed through one output projection. Each
//! head's only attention parameter is its log-bandwidth.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mask::{LayerMask, MaskSpec};
use crate::tensor::{dot, matmul, matmul_nt, matmul_tn, Scalar, Tensor};

/// Norm guard for per-head unit normalization.
const UNIT_NORM_GUARD: f64 = 1e-12;

/// Optional transform applied to per-head features before distances are
/// taken. Values (the vectors being averaged) are never transformed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeaturePrep {
    /// Rotary position encoding base, if enabled.
    pub rope_base: Option<f64>,
    /// Rescale each per-head token vector to unit length.
    pub unit_norm: bool,
}

impl FeaturePrep {
    pub const NONE: FeaturePrep = FeaturePrep {
        rope_base: None,
        unit_norm: false,
    };

    /// RoPE followed by unit normalization.
    pub fn causal(rope_base: f64) -> Self {
        Self {
            rope_base: Some(rope_base),
            unit_norm: true,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rope_base.is_none() && !self.unit_norm
    }
}

impl Default for FeaturePrep {
    fn default() -> Self {
        Self::NONE
    }
}

/// Parameters of one kernel-attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GkaLayerParams<T> {
    pub heads: usize,
    /// `[H]` log-bandwidths; `sigma_h = exp(log_sigma[h])`.
    pub log_sigma: Tensor<T>,
    /// `[D, D]`, applied as `y = x · w_o + b_o`.
    pub w_o: Tensor<T>,
    pub b_o: Option<Tensor<T>>,
    pub epsilon: T,
    pub prep: FeaturePrep,
}

impl<T: Scalar> GkaLayerParams<T> {
    /// `log_sigma = 0`, identity output projection, zero bias.
    pub fn identity(width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Param(format!("width {width} is not divisible by {heads} heads")));
        }
        Ok(Self {
            heads,
            log_sigma: Tensor::zeros(&[heads]),
            w_o: Tensor::eye(width),
            b_o: Some(Tensor::zeros(&[width])),
            epsilon: T::gka_epsilon(),
            prep: FeaturePrep::NONE,
        })
    }

    pub fn width(&self) -> usize {
        self.w_o.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.heads
    }

    pub fn sigma(&self, h: usize) -> T {
        self.log_sigma.data()[h].exp()
    }

    fn validate(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let (b, n, d) = x.dims3()?;
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::Param(format!(
                "width {d} is not divisible by {} heads",
                self.heads
            )));
        }
        if self.w_o.shape() != [d, d] {
            return Err(Error::shape("gka w_o", self.w_o.shape(), &[d, d]));
        }
        if self.log_sigma.shape() != [self.heads] {
            return Err(Error::shape("gka log_sigma", self.log_sigma.shape(), &[self.heads]));
        }
        if let Some(bias) = &self.b_o {
            if bias.shape() != [d] {
                return Err(Error::shape("gka b_o", bias.shape(), &[d]));
            }
        }
        if !(self.epsilon > T::zero()) {
            return Err(Error::Param("epsilon must be > 0".into()));
        }
        if let Some(base) = self.prep.rope_base {
            if !(d / self.heads).is_multiple_of(2) {
                return Err(Error::Param(format!(
                    "rope needs an even head dimension, got {}",
                    d / self.heads
                )));
            }
            if !(base > 0.0) {
                return Err(Error::Param("rope base must be > 0".into()));
            }
        }
        Ok((b, n, d))
    }
}

/// Learned bandwidths of a whole model, `[L, H]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthParams<T> {
    pub log_sigma: Tensor<T>,
}

impl<T: Scalar> BandwidthParams<T> {
    pub fn layers(&self) -> usize {
        self.log_sigma.shape()[0]
    }

    pub fn heads(&self) -> usize {
        self.log_sigma.shape()[1]
    }

    pub fn sigma(&self, layer: usize, head: usize) -> T {
        self.log_sigma.at(&[layer, head]).exp()
    }
}

/// Gradients returned by [`gka_backward`].
#[derive(Debug, Clone)]
pub struct GkaGrads<T> {
    pub x: Tensor<T>,
    pub log_sigma: Tensor<T>,
    pub w_o: Tensor<T>,
    pub b_o: Option<Tensor<T>>,
}

/// Row-stochastic matrices recorded during a forward pass.
#[derive(Debug, Clone, Default)]
pub struct AttentionCapture<T> {
    /// Also keep the raw (masked) kernel matrices.
    pub keep_kernels: bool,
    layers: BTreeMap<usize, LayerCapture<T>>,
}

/// One layer of an [`AttentionCapture`]: `[B, H, N, N]` tensors.
#[derive(Debug, Clone)]
pub struct LayerCapture<T> {
    pub weights: Tensor<T>,
    pub kernels: Option<Tensor<T>>,
}

impl<T: Scalar> AttentionCapture<T> {
    pub fn new() -> Self {
        Self {
            keep_kernels: false,
            layers: BTreeMap::new(),
        }
    }

    pub fn with_kernels() -> Self {
        Self {
            keep_kernels: true,
            layers: BTreeMap::new(),
        }
    }

    pub fn record(&mut self, layer: usize, weights: Tensor<T>, kernels: Option<Tensor<T>>) {
        self.layers.insert(layer, LayerCapture { weights, kernels });
    }

    pub fn layer(&self, layer: usize) -> Option<&LayerCapture<T>> {
        self.layers.get(&layer)
    }

    pub fn layer_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.keys().copied()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// `(batch, heads, tokens)` of the recorded matrices.
    pub fn dims(&self) -> Option<(usize, usize, usize)> {
        self.layers.values().next().map(|c| {
            let s = c.weights.shape();
            (s[0], s[1], s[2])
        })
    }

    /// The `N×N` mixing matrix of one `(layer, head)` for batch item `sample`.
    pub fn matrix(&self, layer: usize, head: usize, sample: usize) -> Result<Tensor<T>> {
        let cap = self
            .layers
            .get(&layer)
            .ok_or_else(|| Error::Input(format!("capture has no layer {layer}")))?;
        let s = cap.weights.shape();
        let (b, h, n) = (s[0], s[1], s[2]);
        if head >= h || sample >= b {
            return Err(Error::Input(format!(
                "capture index out of range: head {head}/{h}, sample {sample}/{b}"
            )));
        }
        let start = ((sample * h) + head) * n * n;
        Tensor::new(&[n, n], cap.weights.data()[start..start + n * n].to_vec())
    }
}

/// Squared Euclidean distances between the rows of `x [N×d]` via
/// `|a|^2 + |b|^2 - 2 a·b`, clamped at zero with an exact zero diagonal.
pub fn pairwise_sqdist<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, _) = x.dims2()?;
    let gram = matmul_nt(x, x)?;
    let norms: Vec<T> = (0..n).map(|i| gram.data()[i * n + i]).collect();
    let two = T::of(2.0);
    let mut out = gram;
    for i in 0..n {
        let row = out.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = if i == j {
                T::zero()
            } else {
                (norms[i] + norms[j] - two * *v).max(T::zero())
            };
        }
    }
    Ok(out)
}

/// Gaussian affinities `exp(-D_ij / (2 sigma^2))` of the rows of `x_head`.
pub fn gka_affinity<T: Scalar>(x_head: &Tensor<T>, sigma: T) -> Result<Tensor<T>> {
    if !(sigma > T::zero()) {
        return Err(Error::Param(format!("bandwidth must be > 0, got {sigma}")));
    }
    let dist = pairwise_sqdist(x_head)?;
    let scale = -T::one() / (T::of(2.0) * sigma * sigma);
    Ok(dist.map(|v| (v * scale).exp()))
}

/// Zeroes disallowed entries of `k` and divides each row by its allowed sum
/// plus `epsilon`.
pub fn masked_row_normalize<T: Scalar>(k: &Tensor<T>, mask: LayerMask, epsilon: T) -> Result<Tensor<T>> {
    masked_row_normalize_with(k, |i, j| mask.allowed(i, j), epsilon)
}

/// [`masked_row_normalize`] with an arbitrary predicate. Fails if a row has
/// no allowed entry.
pub fn masked_row_normalize_with<T: Scalar>(
    k: &Tensor<T>,
    allowed: impl Fn(usize, usize) -> bool,
    epsilon: T,
) -> Result<Tensor<T>> {
    let (n, m) = k.dims2()?;
    if k.data().iter().any(|&v| v < T::zero() || v.is_nan()) {
        return Err(Error::Param("kernel entries must be >= 0".into()));
    }
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..n {
        let krow = k.row(i);
        let mut sum = T::zero();
        let mut any = false;
        for (j, &v) in krow.iter().enumerate() {
            if allowed(i, j) {
                sum += v;
                any = true;
            }
        }
        if !any {
            return Err(Error::DegenerateRow { row: i });
        }
        let denom = sum + epsilon;
        let orow = out.row_mut(i);
        for (j, o) in orow.iter_mut().enumerate() {
            if allowed(i, j) {
                *o = krow[j] / denom;
            }
        }
    }
    Ok(out)
}

fn rope_freqs(base: f64, d: usize) -> Vec<f64> {
    (0..d / 2).map(|m| base.powf(-(2.0 * m as f64) / d as f64)).collect()
}

fn rope_row<T: Scalar>(row: &mut [T], pos: usize, freqs: &[f64], sign: f64) {
    for (m, &f) in freqs.iter().enumerate() {
        let theta = sign * pos as f64 * f;
        let (s, c) = theta.sin_cos();
        let (s, c) = (T::of(s), T::of(c));
        let a = row[2 * m];
        let b = row[2 * m + 1];
        row[2 * m] = a * c - b * s;
        row[2 * m + 1] = a * s + b * c;
    }
}

fn unit_norm_row<T: Scalar>(row: &mut [T]) {
    let q = T::one() / (dot(row, row) + T::of(UNIT_NORM_GUARD)).sqrt();
    for v in row.iter_mut() {
        *v *= q;
    }
}

/// Row-wise feature preparation for token `pos`, used by the tiled path.
/// `freqs` must come from [`FeaturePrep::freqs`].
pub(crate) fn prepare_row<T: Scalar>(row: &mut [T], pos: usize, prep: FeaturePrep, freqs: &[f64]) {
    if prep.rope_base.is_some() {
        rope_row(row, pos, freqs, 1.0);
    }
    if prep.unit_norm {
        unit_norm_row(row);
    }
}

impl FeaturePrep {
    pub(crate) fn freqs(&self, d: usize) -> Vec<f64> {
        self.rope_base.map_or_else(Vec::new, |b| rope_freqs(b, d))
    }
}

fn rope_rotate<T: Scalar>(x: &Tensor<T>, base: f64, sign: f64) -> Result<Tensor<T>> {
    let (n, d) = x.dims2()?;
    if d % 2 != 0 {
        return Err(Error::Param(format!("rope needs an even dimension, got {d}")));
    }
    if !(base > 0.0) {
        return Err(Error::Param("rope base must be > 0".into()));
    }
    let mut out = x.clone();
    let freqs = rope_freqs(base, d);
    for pos in 0..n {
        rope_row(out.row_mut(pos), pos, &freqs, sign);
    }
    Ok(out)
}

/// Rotary position encoding on consecutive dimension pairs; the row index is
/// the token position and pair `m` rotates by `pos * base^(-2m/d)`.
pub fn rope_apply<T: Scalar>(x_head: &Tensor<T>, base: f64) -> Result<Tensor<T>> {
    rope_rotate(x_head, base, 1.0)
}

/// Adjoint (= inverse) of [`rope_apply`].
pub fn rope_backward<T: Scalar>(grad: &Tensor<T>, base: f64) -> Result<Tensor<T>> {
    rope_rotate(grad, base, -1.0)
}

fn unit_normalize<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let d = x.last_dim();
    for row in out.data_mut().chunks_mut(d) {
        unit_norm_row(row);
    }
    out
}

fn unit_normalize_backward<T: Scalar>(x: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let mut out = grad.clone();
    let guard = T::of(UNIT_NORM_GUARD);
    let d = x.last_dim();
    for (row, g) in x.data().chunks(d).zip(out.data_mut().chunks_mut(d)) {
        let q = T::one() / (dot(row, row) + guard).sqrt();
        let rg = dot(row, g);
        let q3 = q * q * q;
        for (gv, &rv) in g.iter_mut().zip(row) {
            *gv = q * *gv - rv * q3 * rg;
        }
    }
    out
}

/// Kernel-space features of one head.
pub fn prepare_features<T: Scalar>(x_head: &Tensor<T>, prep: FeaturePrep) -> Result<Tensor<T>> {
    let rotated = match prep.rope_base {
        Some(base) => rope_apply(x_head, base)?,
        None => x_head.clone(),
    };
    Ok(if prep.unit_norm {
        unit_normalize(&rotated)
    } else {
        rotated
    })
}

fn prepare_features_backward<T: Scalar>(
    x_head: &Tensor<T>,
    prep: FeaturePrep,
    grad_feat: &Tensor<T>,
) -> Result<Tensor<T>> {
    let rotated = match prep.rope_base {
        Some(base) => rope_apply(x_head, base)?,
        None => x_head.clone(),
    };
    let g = if prep.unit_norm {
        unit_normalize_backward(&rotated, grad_feat)
    } else {
        grad_feat.clone()
    };
    match prep.rope_base {
        Some(base) => rope_backward(&g, base),
        None => Ok(g),
    }
}

/// Copies head `h` of batch item `b` out of `x [B, N, D]` as `[N, d]`.
pub fn split_head<T: Scalar>(x: &Tensor<T>, b: usize, h: usize, head_dim: usize) -> Tensor<T> {
    let (_, n, d) = x.dims3().expect("rank-3 input");
    let base = b * n * d + h * head_dim;
    let data = (0..n)
        .flat_map(|i| {
            let s = base + i * d;
            x.data()[s..s + head_dim].iter().copied()
        })
        .collect();
    Tensor::new(&[n, head_dim], data).expect("head slice")
}

fn merge_head<T: Scalar>(out: &mut [T], n: usize, d: usize, h: usize, head_dim: usize, y: &Tensor<T>) {
    for i in 0..n {
        let dst = &mut out[i * d + h * head_dim..i * d + (h + 1) * head_dim];
        dst.copy_from_slice(y.row(i));
    }
}

/// Everything one head computes on the way to its output.
pub(crate) struct HeadState<T> {
    pub feats: Tensor<T>,
    pub dist: Tensor<T>,
    /// Masked kernel.
    pub kernel: Tensor<T>,
    pub row_sum: Vec<T>,
    pub weights: Tensor<T>,
}

pub(crate) fn head_forward<T: Scalar>(
    x_head: &Tensor<T>,
    log_sigma: T,
    mask: LayerMask,
    epsilon: T,
    prep: FeaturePrep,
) -> Result<HeadState<T>> {
    let (n, _) = x_head.dims2()?;
    let feats = prepare_features(x_head, prep)?;
    let dist = pairwise_sqdist(&feats)?;
    let sigma = log_sigma.exp();
    let scale = -T::one() / (T::of(2.0) * sigma * sigma);
    let mut kernel = Tensor::zeros(&[n, n]);
    let mut weights = Tensor::zeros(&[n, n]);
    let mut row_sum = vec![T::zero(); n];
    for i in 0..n {
        let drow = dist.row(i);
        let krow = kernel.row_mut(i);
        let mut s = T::zero();
        for j in mask.key_range(i, n) {
            let k = (drow[j] * scale).exp();
            krow[j] = k;
            s += k;
        }
        if !s.is_finite() {
            return Err(Error::NonFinite(format!("kernel row {i}")));
        }
        row_sum[i] = s;
        let denom = s + epsilon;
        let wrow = weights.row_mut(i);
        for j in mask.key_range(i, n) {
            wrow[j] = krow[j] / denom;
        }
    }
    Ok(HeadState {
        feats,
        dist,
        kernel,
        row_sum,
        weights,
    })
}

struct HeadOut<T> {
    y: Tensor<T>,
    weights: Tensor<T>,
    kernel: Tensor<T>,
}

/// Concatenated head outputs before the output projection, `[B, N, D]`.
/// Optionally records the mixing matrices.
pub(crate) fn gka_mix<T: Scalar>(
    x: &Tensor<T>,
    params: &GkaLayerParams<T>,
    mask: &MaskSpec,
    layer_index: usize,
    capture: Option<&mut AttentionCapture<T>>,
) -> Result<Tensor<T>> {
    let (b, n, d) = params.validate(x)?;
    let heads = params.heads;
    let hd = d / heads;
    let layer_mask = mask.for_layer(layer_index);
    let outs: Vec<HeadOut<T>> = (0..b * heads)
        .into_par_iter()
        .map(|bh| {
            let (bi, h) = (bh / heads, bh % heads);
            let xh = split_head(x, bi, h, hd);
            let st = head_forward(&xh, params.log_sigma.data()[h], layer_mask, params.epsilon, params.prep)?;
            let y = matmul(&st.weights, &xh)?;
            Ok(HeadOut {
                y,
                weights: st.weights,
                kernel: st.kernel,
            })
        })
        .collect::<Result<_>>()?;

    let mut concat = Tensor::zeros(&[b, n, d]);
    for (bh, out) in outs.iter().enumerate() {
        let (bi, h) = (bh / heads, bh % heads);
        merge_head(
            &mut concat.data_mut()[bi * n * d..(bi + 1) * n * d],
            n,
            d,
            h,
            hd,
            &out.y,
        );
    }
    if let Some(cap) = capture {
        let mut w = Vec::with_capacity(b * heads * n * n);
        let mut k = Vec::new();
        for out in &outs {
            w.extend_from_slice(out.weights.data());
            if cap.keep_kernels {
                k.extend_from_slice(out.kernel.data());
            }
        }
        let weights = Tensor::new(&[b, heads, n, n], w)?;
        let kernels = if cap.keep_kernels {
            Some(Tensor::new(&[b, heads, n, n], k)?)
        } else {
            None
        };
        cap.record(layer_index, weights, kernels);
    }
    Ok(concat)
}

/// Applies `x · w + b` over the rows of a `[.., D]` tensor.
pub(crate) fn project<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let d_in = x.last_dim();
    let rows = x.rows();
    let flat = x.reshape(&[rows, d_in])?;
    let mut out = matmul(&flat, w)?;
    if let Some(bias) = b {
        out.add_row_vector(bias.data())?;
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = w.shape()[1];
    out.into_reshape(&shape)
}

/// Forward pass of one kernel-attention layer on normalized tokens
/// `x [B, N, D]`. The mask for this layer is resolved from `mask` by
/// `layer_index`.
pub fn gka_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &GkaLayerParams<T>,
    mask: &MaskSpec,
    layer_index: usize,
    capture: Option<&mut AttentionCapture<T>>,
) -> Result<Tensor<T>> {
    mask.validate()?;
    let concat = gka_mix(x, params, mask, layer_index, capture)?;
    project(&concat, &params.w_o, params.b_o.as_ref())
}

/// Exact gradients of [`gka_forward`] with respect to the input, the
/// log-bandwidths and the output projection.
///
/// Tokens enter twice: as kernel arguments and as the averaged values; both
/// paths contribute to `grad.x`.
pub fn gka_backward<T: Scalar>(
    x: &Tensor<T>,
    params: &GkaLayerParams<T>,
    mask: &MaskSpec,
    layer_index: usize,
    grad_out: &Tensor<T>,
) -> Result<GkaGrads<T>> {
    let (b, n, d) = params.validate(x)?;
    if grad_out.shape() != x.shape() {
        return Err(Error::shape("gka_backward", x.shape(), grad_out.shape()));
    }
    let heads = params.heads;
    let hd = d / heads;
    let layer_mask = mask.for_layer(layer_index);

    let concat = gka_mix(x, params, mask, layer_index, None)?;
    let rows = b * n;
    let concat_flat = concat.reshape(&[rows, d])?;
    let grad_flat = grad_out.reshape(&[rows, d])?;
    let grad_w_o = matmul_tn(&concat_flat, &grad_flat)?;
    let grad_b_o = params
        .b_o
        .as_ref()
        .map(|_| Tensor::new(&[d], grad_flat.sum_rows()))
        .transpose()?;
    let grad_concat = matmul_nt(&grad_flat, &params.w_o)?.into_reshape(&[b, n, d])?;

    let per_head: Vec<(Tensor<T>, T)> = (0..b * heads)
        .into_par_iter()
        .map(|bh| {
            let (bi, h) = (bh / heads, bh % heads);
            let xh = split_head(x, bi, h, hd);
            let gy = split_head(&grad_concat, bi, h, hd);
            let log_sigma = params.log_sigma.data()[h];
            let st = head_forward(&xh, log_sigma, layer_mask, params.epsilon, params.prep)?;
            head_backward(&xh, &st, log_sigma, layer_mask, params.epsilon, params.prep, &gy)
        })
        .collect::<Result<_>>()?;

    let mut grad_x = Tensor::zeros(&[b, n, d]);
    let mut grad_ls = vec![T::zero(); heads];
    for (bh, (gx, _)) in per_head.iter().enumerate() {
        let (bi, h) = (bh / heads, bh % heads);
        merge_head(&mut grad_x.data_mut()[bi * n * d..(bi + 1) * n * d], n, d, h, hd, gx);
    }
    // Summed in batch order so the result does not depend on scheduling.
    for bi in 0..b {
        for h in 0..heads {
            grad_ls[h] += per_head[bi * heads + h].1;
        }
    }
    Ok(GkaGrads {
        x: grad_x,
        log_sigma: Tensor::new(&[heads], grad_ls)?,
        w_o: grad_w_o,
        b_o: grad_b_o,
    })
}

/// Backward through one head: returns `(grad_x_head, grad_log_sigma)`.
fn head_backward<T: Scalar>(
    xh: &Tensor<T>,
    st: &HeadState<T>,
    log_sigma: T,
    mask: LayerMask,
    epsilon: T,
    prep: FeaturePrep,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, T)> {
    let (n, _) = xh.dims2()?;
    let sigma = log_sigma.exp();
    let inv_s2 = T::one() / (sigma * sigma);
    let half_inv_s2 = T::of(0.5) * inv_s2;

    // Value path: Y = W X.
    let mut grad_x = matmul_tn(&st.weights, gy)?;
    let grad_w = matmul_nt(gy, xh)?;

    // dL/dK through the row normalization, then dL/dD and dL/dlog_sigma.
    let mut grad_d = Tensor::zeros(&[n, n]);
    let mut grad_ls = T::zero();
    for i in 0..n {
        let range = mask.key_range(i, n);
        let gw = grad_w.row(i);
        let w = st.weights.row(i);
        let k = st.kernel.row(i);
        let dist = st.dist.row(i);
        let r: T = range.clone().map(|j| gw[j] * w[j]).sum();
        let inv_den = T::one() / (st.row_sum[i] + epsilon);
        let gd = grad_d.row_mut(i);
        for j in range {
            let gk = (gw[j] - r) * inv_den;
            let gkk = gk * k[j];
            grad_ls += gkk * dist[j] * inv_s2;
            gd[j] = -gkk * half_inv_s2;
        }
    }

    // D_ij = |f_i - f_j|^2  =>  dL/df_i = 2 sum_j (G_ij + G_ji)(f_i - f_j).
    let sym = grad_d.add(&grad_d.transpose()?)?;
    let mf = matmul(&sym, &st.feats)?;
    let mut grad_f = st.feats.clone();
    let two = T::of(2.0);
    for i in 0..n {
        let rs: T = sym.row(i).iter().copied().sum();
        let m = mf.row(i);
        for (g, &mv) in grad_f.row_mut(i).iter_mut().zip(m) {
            *g = two * (*g * rs - mv);
        }
    }
    let grad_from_kernel = if prep.is_identity() {
        grad_f
    } else {
        prepare_features_backward(xh, prep, &grad_f)?
    };
    grad_x.add_assign(&grad_from_kernel)?;
    Ok((grad_x, grad_ls))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Evaluates the definition literally, one scalar at a time.
    fn literal_gka(x: &Tensor<f64>, p: &GkaLayerParams<f64>, mask: LayerMask) -> Tensor<f64> {
        let (b, n, d) = x.dims3().unwrap();
        let hd = d / p.heads;
        let mut concat = Tensor::<f64>::zeros(&[b, n, d]);
        for bi in 0..b {
            for h in 0..p.heads {
                let sigma = p.log_sigma.data()[h].exp();
                let feat = |i: usize, c: usize| x.at(&[bi, i, h * hd + c]);
                for i in 0..n {
                    let mut kern = vec![0.0; n];
                    for (j, kv) in kern.iter_mut().enumerate() {
                        let mut dsq = 0.0;
                        for c in 0..hd {
                            dsq += (feat(i, c) - feat(j, c)).powi(2);
                        }
                        let allowed = if mask.allowed(i, j) { 1.0 } else { 0.0 };
                        *kv = (-dsq / (2.0 * sigma * sigma)).exp() * allowed;
                    }
                    let denom: f64 = kern.iter().sum::<f64>() + p.epsilon;
                    for c in 0..hd {
                        let y: f64 = (0..n).map(|j| kern[j] / denom * feat(j, c)).sum();
                        concat.set(&[bi, i, h * hd + c], y);
                    }
                }
            }
        }
        let mut out = Tensor::<f64>::zeros(&[b, n, d]);
        for bi in 0..b {
            for i in 0..n {
                for o in 0..d {
                    let mut s = p.b_o.as_ref().map_or(0.0, |bb| bb.data()[o]);
                    for c in 0..d {
                        s += concat.at(&[bi, i, c]) * p.w_o.at(&[c, o]);
                    }
                    out.set(&[bi, i, o], s);
                }
            }
        }
        out
    }

    fn random_params(d: usize, h: usize, rng: &mut ChaCha8Rng) -> GkaLayerParams<f64> {
        let mut p = GkaLayerParams::<f64>::identity(d, h).unwrap();
        p.log_sigma = Tensor::uniform(&[h], 0.6, rng);
        p.w_o = Tensor::randn(&[d, d], 0.4, rng);
        p.b_o = Some(Tensor::randn(&[d], 0.1, rng));
        p
    }

    #[test]
    fn sqdist_hand_case_and_oracle() {
        let x = Tensor::<f64>::from_rows(&[vec![1.0], vec![3.0]]);
        assert_eq!(pairwise_sqdist(&x).unwrap().data(), &[0.0, 4.0, 4.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(&[16, 8], 1.0, &mut rng);
        let d = pairwise_sqdist(&x).unwrap();
        for i in 0..16 {
            assert_eq!(d.at(&[i, i]), 0.0);
            for j in 0..16 {
                let naive: f64 = (0..8).map(|c| (x.at(&[i, c]) - x.at(&[j, c])).powi(2)).sum();
                assert!((d.at(&[i, j]) - naive).abs() <= 1e-10);
                assert_eq!(d.at(&[i, j]), d.at(&[j, i]));
            }
        }
    }

    #[test]
    fn sqdist_clamps_cancellation() {
        let x = Tensor::<f32>::from_rows(&[vec![1e4, 1e4 + 1e-3], vec![1e4, 1e4 + 1e-3]]);
        let d = pairwise_sqdist(&x).unwrap();
        assert!(d.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn affinity_cases() {
        let x = Tensor::<f64>::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
        let k = gka_affinity(&x, 1.0).unwrap();
        assert_eq!(k.at(&[0, 0]), 1.0);
        assert!((k.at(&[0, 1]) - (-1f64).exp()).abs() < 1e-15);
        assert!((k.at(&[0, 1]) - 0.367879).abs() < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::uniform(&[10, 4], 1.0, &mut rng);
        let k = gka_affinity(&x, 1e6).unwrap();
        assert!(k.data().iter().all(|&v| (v - 1.0).abs() <= 1e-6 && v <= 1.0 && v > 0.0));

        assert!(matches!(gka_affinity(&x, 0.0), Err(Error::Param(_))));
        assert!(matches!(gka_affinity(&x, -1.0), Err(Error::Param(_))));
    }

    #[test]
    fn row_normalize_cases() {
        let eps = 1e-6;
        let k = Tensor::<f64>::full(&[5, 5], 1.0);
        let w = masked_row_normalize(&k, LayerMask::Causal, eps).unwrap();
        assert_eq!(w.at(&[0, 0]), 1.0 / (1.0 + eps));
        assert!((1..5).all(|j| w.at(&[0, j]) == 0.0));

        let w = masked_row_normalize(&k, LayerMask::Window(1), eps).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let expect = if i == j { 1.0 / (1.0 + eps) } else { 0.0 };
                assert_eq!(w.at(&[i, j]), expect);
            }
        }

        let w = masked_row_normalize(&k, LayerMask::Full, eps).unwrap();
        assert!(w.data().iter().all(|&v| (v - 1.0 / (5.0 + eps)).abs() < 1e-15));

        let err = masked_row_normalize_with(&k, |i, j| i != 2 && i == j, eps);
        assert!(matches!(err, Err(Error::DegenerateRow { row: 2 })));
    }

    #[test]
    fn rope_cases() {
        let x = Tensor::<f64>::from_rows(&[vec![0.3, -0.2], vec![1.0, 0.0]]);
        let r = rope_apply(&x, 10000.0).unwrap();
        assert_eq!(r.row(0), x.row(0));
        assert!((r.at(&[1, 0]) - 0.540302).abs() < 1e-6);
        assert!((r.at(&[1, 1]) - 0.841471).abs() < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn(&[12, 8], 1.0, &mut rng);
        let r = rope_apply(&x, 10000.0).unwrap();
        for i in 0..12 {
            let a = dot(x.row(i), x.row(i)).sqrt();
            let b = dot(r.row(i), r.row(i)).sqrt();
            assert!((a - b).abs() < 1e-6);
        }
        let back = rope_backward(&r, 10000.0).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-12);

        let odd = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(rope_apply(&odd, 10000.0), Err(Error::Param(_))));
    }

    #[test]
    fn forward_single_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_params(6, 2, &mut rng);
        let x = Tensor::<f64>::randn(&[1, 1, 6], 1.0, &mut rng);
        let y = gka_forward(&x, &p, &MaskSpec::none(), 0, None).unwrap();
        let scaled = x.scale(1.0 / (1.0 + p.epsilon)).reshape(&[1, 6]).unwrap();
        let mut expect = matmul(&scaled, &p.w_o).unwrap();
        expect.add_row_vector(p.b_o.as_ref().unwrap().data()).unwrap();
        assert!(y.reshape(&[1, 6]).unwrap().max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn forward_wide_bandwidth_averages_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = GkaLayerParams::<f64>::identity(4, 2).unwrap();
        p.log_sigma = Tensor::full(&[2], 1e6f64.ln());
        let x = Tensor::<f64>::uniform(&[1, 7, 4], 1.0, &mut rng);
        let y = gka_forward(&x, &p, &MaskSpec::none(), 0, None).unwrap();
        for c in 0..4 {
            let mean: f64 = (0..7).map(|i| x.at(&[0, i, c])).sum::<f64>() / 7.0;
            for i in 0..7 {
                assert!((y.at(&[0, i, c]) - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn forward_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let p = random_params(12, 3, &mut rng);
        let x = Tensor::<f64>::randn(&[2, 8, 12], 1.0, &mut rng);
        for (spec, lm) in [
            (MaskSpec::none(), LayerMask::Full),
            (MaskSpec::causal(), LayerMask::Causal),
            (MaskSpec::causal_window(3).unwrap(), LayerMask::Window(3)),
        ] {
            let got = gka_forward(&x, &p, &spec, 0, None).unwrap();
            let want = literal_gka(&x, &p, lm);
            assert!(got.rel_diff(&want) <= 1e-6, "{lm}: {}", got.rel_diff(&want));
        }
    }

    #[test]
    fn capture_records_exact_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_params(8, 2, &mut rng);
        let x = Tensor::<f64>::randn(&[2, 5, 8], 1.0, &mut rng);
        let mut cap = AttentionCapture::with_kernels();
        gka_forward(&x, &p, &MaskSpec::causal(), 3, Some(&mut cap)).unwrap();
        assert_eq!(cap.layer_indices().collect::<Vec<_>>(), vec![3]);
        for bi in 0..2 {
            for h in 0..2 {
                let xh = split_head(&x, bi, h, 4);
                let st = head_forward(&xh, p.log_sigma.data()[h], LayerMask::Causal, p.epsilon, p.prep).unwrap();
                assert_eq!(cap.matrix(3, h, bi).unwrap(), st.weights);
            }
        }
        assert!(cap.matrix(0, 0, 0).is_err());
    }

    #[test]
    fn backward_zero_upstream_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_params(8, 2, &mut rng);
        let x = Tensor::<f64>::randn(&[1, 6, 8], 1.0, &mut rng);
        let g = gka_backward(&x, &p, &MaskSpec::none(), 0, &Tensor::zeros(&[1, 6, 8])).unwrap();
        assert_eq!(g.x.max_abs(), 0.0);
        assert_eq!(g.log_sigma.max_abs(), 0.0);
        assert_eq!(g.w_o.max_abs(), 0.0);
        assert_eq!(g.b_o.unwrap().max_abs(), 0.0);
    }

    #[test]
    fn backward_single_token_has_no_bandwidth_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_params(8, 2, &mut rng);
        let x = Tensor::<f64>::randn(&[1, 1, 8], 1.0, &mut rng);
        let go = Tensor::<f64>::randn(&[1, 1, 8], 1.0, &mut rng);
        let g = gka_backward(&x, &p, &MaskSpec::none(), 0, &go).unwrap();
        assert!(g.log_sigma.max_abs() <= 1e-8);
    }

    #[test]
    fn backward_through_rope_and_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut p = random_params(8, 2, &mut rng);
        p.prep = FeaturePrep::causal(10000.0);
        let x = Tensor::<f64>::randn(&[1, 5, 8], 1.0, &mut rng);
        let go = Tensor::<f64>::randn(&[1, 5, 8], 1.0, &mut rng);
        let spec = MaskSpec::causal();
        let g = gka_backward(&x, &p, &spec, 0, &go).unwrap();
        let loss = |x: &Tensor<f64>, p: &GkaLayerParams<f64>| {
            let y = gka_forward(x, p, &spec, 0, None).unwrap();
            dot(y.data(), go.data())
        };
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&xp, &p) - loss(&xm, &p)) / (2.0 * h);
            let an = g.x.data()[i];
            assert!(
                (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8) < 1e-5,
                "x[{i}] {fd} vs {an}"
            );
        }
        for hh in 0..2 {
            let mut pp = p.clone();
            pp.log_sigma.data_mut()[hh] += h;
            let mut pm = p.clone();
            pm.log_sigma.data_mut()[hh] -= h;
            let fd = (loss(&x, &pp) - loss(&x, &pm)) / (2.0 * h);
            let an = g.log_sigma.data()[hh];
            assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-8) < 1e-5);
        }
    }
}
