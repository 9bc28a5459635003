//! Projection-based dot-product attention, used as the comparison baseline.
//!
//! Two variants share one code path: the standard operator with learned
//! query, key and value projections, and a value-less variant that keeps the
//! query/key projections but averages the raw per-head features.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gka::{rope_apply, rope_backward, split_head};
use crate::mask::{LayerMask, MaskSpec};
use crate::nn::{Linear, LinearGrads};
use crate::tensor::{matmul, matmul_nt, matmul_tn, softmax_in_place, Scalar, Tensor};

/// Additive logit for disallowed pairs.
pub const MASKED_LOGIT: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MhaVariant {
    Standard,
    /// No value projection.
    ValueLess,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MhaLayerParams<T> {
    pub heads: usize,
    pub q: Linear<T>,
    pub k: Linear<T>,
    /// Absent for [`MhaVariant::ValueLess`].
    pub v: Option<Linear<T>>,
    pub o: Linear<T>,
    pub rope_base: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct MhaGrads<T> {
    pub x: Tensor<T>,
    pub q: LinearGrads<T>,
    pub k: LinearGrads<T>,
    pub v: Option<LinearGrads<T>>,
    pub o: LinearGrads<T>,
}

impl<T: Scalar> MhaLayerParams<T> {
    pub fn variant(&self) -> MhaVariant {
        if self.v.is_some() {
            MhaVariant::Standard
        } else {
            MhaVariant::ValueLess
        }
    }

    fn validate(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let (b, n, d) = x.dims3()?;
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::Param(format!(
                "width {d} is not divisible by {} heads",
                self.heads
            )));
        }
        let mut layers = vec![&self.q, &self.k, &self.o];
        layers.extend(self.v.as_ref());
        for l in layers {
            if l.w.shape() != [d, d] {
                return Err(Error::shape("mha projection", l.w.shape(), &[d, d]));
            }
        }
        if self.rope_base.is_some() && !(d / self.heads).is_multiple_of(2) {
            return Err(Error::Param("rope needs an even head dimension".into()));
        }
        Ok((b, n, d))
    }
}

struct Projected<T> {
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
}

fn project_qkv<T: Scalar>(x: &Tensor<T>, p: &MhaLayerParams<T>) -> Result<Projected<T>> {
    Ok(Projected {
        q: p.q.forward(x)?,
        k: p.k.forward(x)?,
        v: match &p.v {
            Some(v) => v.forward(x)?,
            None => x.clone(),
        },
    })
}

struct HeadAttn<T> {
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    probs: Tensor<T>,
}

fn head_attention<T: Scalar>(
    proj: &Projected<T>,
    bi: usize,
    h: usize,
    hd: usize,
    mask: LayerMask,
    rope_base: Option<f64>,
) -> Result<HeadAttn<T>> {
    let mut q = split_head(&proj.q, bi, h, hd);
    let mut k = split_head(&proj.k, bi, h, hd);
    let v = split_head(&proj.v, bi, h, hd);
    if let Some(base) = rope_base {
        q = rope_apply(&q, base)?;
        k = rope_apply(&k, base)?;
    }
    let n = q.shape()[0];
    let scale = T::one() / T::of(hd as f64).sqrt();
    let mut probs = matmul_nt(&q, &k)?;
    let masked = T::of(MASKED_LOGIT);
    for i in 0..n {
        let row = probs.row_mut(i);
        for (j, s) in row.iter_mut().enumerate() {
            *s *= scale;
            if !mask.allowed(i, j) {
                *s += masked;
            }
        }
        softmax_in_place(row);
    }
    Ok(HeadAttn { q, k, v, probs })
}

fn mix<T: Scalar>(
    proj: &Projected<T>,
    p: &MhaLayerParams<T>,
    b: usize,
    n: usize,
    d: usize,
    mask: LayerMask,
) -> Result<(Tensor<T>, Vec<HeadAttn<T>>)> {
    let heads = p.heads;
    let hd = d / heads;
    let per_head: Vec<HeadAttn<T>> = (0..b * heads)
        .into_par_iter()
        .map(|bh| head_attention(proj, bh / heads, bh % heads, hd, mask, p.rope_base))
        .collect::<Result<_>>()?;
    let mut concat = Tensor::zeros(&[b, n, d]);
    for (bh, ha) in per_head.iter().enumerate() {
        let (bi, h) = (bh / heads, bh % heads);
        let y = matmul(&ha.probs, &ha.v)?;
        scatter_head(&mut concat, bi, h, hd, &y);
    }
    Ok((concat, per_head))
}

fn scatter_head<T: Scalar>(dst: &mut Tensor<T>, bi: usize, h: usize, hd: usize, src: &Tensor<T>) {
    let (_, n, d) = dst.dims3().expect("rank-3");
    let data = dst.data_mut();
    for i in 0..n {
        let o = bi * n * d + i * d + h * hd;
        data[o..o + hd].copy_from_slice(src.row(i));
    }
}

/// Multi-head dot-product attention with the mask added as a large negative
/// logit before the softmax.
pub fn mha_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &MhaLayerParams<T>,
    mask: &MaskSpec,
    layer_index: usize,
) -> Result<Tensor<T>> {
    mha_forward_with_probs(x, params, mask, layer_index).map(|(y, _)| y)
}

/// Like [`mha_forward`], also returning the `[B, H, N, N]` attention
/// probabilities.
pub fn mha_forward_with_probs<T: Scalar>(
    x: &Tensor<T>,
    params: &MhaLayerParams<T>,
    mask: &MaskSpec,
    layer_index: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, n, d) = params.validate(x)?;
    mask.validate()?;
    let proj = project_qkv(x, params)?;
    let (concat, heads) = mix(&proj, params, b, n, d, mask.for_layer(layer_index))?;
    let mut probs = Vec::with_capacity(b * params.heads * n * n);
    for ha in &heads {
        probs.extend_from_slice(ha.probs.data());
    }
    Ok((
        params.o.forward(&concat)?,
        Tensor::new(&[b, params.heads, n, n], probs)?,
    ))
}

/// Gradients of [`mha_forward`] for every parameter and the input.
pub fn mha_backward<T: Scalar>(
    x: &Tensor<T>,
    params: &MhaLayerParams<T>,
    mask: &MaskSpec,
    layer_index: usize,
    grad_out: &Tensor<T>,
) -> Result<MhaGrads<T>> {
    let (b, n, d) = params.validate(x)?;
    if grad_out.shape() != x.shape() {
        return Err(Error::shape("mha_backward", x.shape(), grad_out.shape()));
    }
    let heads = params.heads;
    let hd = d / heads;
    let proj = project_qkv(x, params)?;
    let (concat, per_head) = mix(&proj, params, b, n, d, mask.for_layer(layer_index))?;
    let (grad_concat, grad_o) = params.o.backward(&concat, grad_out)?;

    let scale = T::one() / T::of(hd as f64).sqrt();
    let grads: Vec<(Tensor<T>, Tensor<T>, Tensor<T>)> = per_head
        .par_iter()
        .enumerate()
        .map(|(bh, ha)| {
            let (bi, h) = (bh / heads, bh % heads);
            let go = split_head(&grad_concat, bi, h, hd);
            let grad_p = matmul_nt(&go, &ha.v)?;
            let grad_v = matmul_tn(&ha.probs, &go)?;
            let mut grad_s = Tensor::zeros(&[n, n]);
            for i in 0..n {
                let p = ha.probs.row(i);
                let gp = grad_p.row(i);
                let r: T = p.iter().zip(gp).map(|(&a, &g)| a * g).sum();
                for (j, gs) in grad_s.row_mut(i).iter_mut().enumerate() {
                    *gs = p[j] * (gp[j] - r) * scale;
                }
            }
            let mut grad_q = matmul(&grad_s, &ha.k)?;
            let mut grad_k = matmul_tn(&grad_s, &ha.q)?;
            if let Some(base) = params.rope_base {
                grad_q = rope_backward(&grad_q, base)?;
                grad_k = rope_backward(&grad_k, base)?;
            }
            Ok((grad_q, grad_k, grad_v))
        })
        .collect::<Result<_>>()?;

    let mut gq = Tensor::zeros(&[b, n, d]);
    let mut gk = Tensor::zeros(&[b, n, d]);
    let mut gv = Tensor::zeros(&[b, n, d]);
    for (bh, (q, k, v)) in grads.iter().enumerate() {
        let (bi, h) = (bh / heads, bh % heads);
        scatter_head(&mut gq, bi, h, hd, q);
        scatter_head(&mut gk, bi, h, hd, k);
        scatter_head(&mut gv, bi, h, hd, v);
    }

    let (mut grad_x, grad_q) = params.q.backward(x, &gq)?;
    let (gx_k, grad_k) = params.k.backward(x, &gk)?;
    grad_x.add_assign(&gx_k)?;
    let grad_v = match &params.v {
        Some(v) => {
            let (gx_v, grad_v) = v.backward(x, &gv)?;
            grad_x.add_assign(&gx_v)?;
            Some(grad_v)
        }
        None => {
            grad_x.add_assign(&gv)?;
            None
        }
    };
    Ok(MhaGrads {
        x: grad_x,
        q: grad_q,
        k: grad_k,
        v: grad_v,
        o: grad_o,
    })
}
