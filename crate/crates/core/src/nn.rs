//! Affine layers shared by the attention operators and the model.

use crate::error::{Error, Result};
use crate::tensor::{layer_norm, layer_norm_backward, matmul_nt, matmul_tn, Scalar, Tensor};

/// `y = x · w + b` with `w: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub w: Tensor<T>,
    pub b: Option<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct LinearGrads<T> {
    pub w: Tensor<T>,
    pub b: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(w: Tensor<T>, b: Option<Tensor<T>>) -> Result<Self> {
        let (_, out) = w.dims2()?;
        if let Some(bias) = &b {
            if bias.shape() != [out] {
                return Err(Error::shape("linear bias", bias.shape(), &[out]));
            }
        }
        Ok(Self { w, b })
    }

    pub fn zeros(d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            w: Tensor::zeros(&[d_in, d_out]),
            b: bias.then(|| Tensor::zeros(&[d_out])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn num_params(&self) -> usize {
        self.w.len() + self.b.as_ref().map_or(0, Tensor::len)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.last_dim() != self.d_in() {
            return Err(Error::shape("linear", x.shape(), self.w.shape()));
        }
        crate::gka::project(x, &self.w, self.b.as_ref())
    }

    /// Returns `(grad_x, grads)` for input `x` and upstream `grad_out`.
    pub fn backward(&self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, LinearGrads<T>)> {
        let rows = x.rows();
        let xf = x.reshape(&[rows, self.d_in()])?;
        let gf = grad_out.reshape(&[rows, self.d_out()])?;
        let gw = matmul_tn(&xf, &gf)?;
        let gb = self
            .b
            .as_ref()
            .map(|_| Tensor::new(&[self.d_out()], gf.sum_rows()))
            .transpose()?;
        let gx = matmul_nt(&gf, &self.w)?.into_reshape(x.shape())?;
        Ok((gx, LinearGrads { w: gw, b: gb }))
    }
}

/// Layer normalization with optional affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub gamma: Option<Tensor<T>>,
    pub beta: Option<Tensor<T>>,
    pub eps: T,
}

#[derive(Debug, Clone)]
pub struct NormGrads<T> {
    pub gamma: Option<Tensor<T>>,
    pub beta: Option<Tensor<T>>,
}

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

impl<T: Scalar> Norm<T> {
    pub fn new(width: usize, affine: bool) -> Self {
        Self {
            gamma: affine.then(|| Tensor::full(&[width], T::one())),
            beta: affine.then(|| Tensor::zeros(&[width])),
            eps: T::of(LN_EPS),
        }
    }

    pub fn num_params(&self) -> usize {
        self.gamma.as_ref().map_or(0, Tensor::len) + self.beta.as_ref().map_or(0, Tensor::len)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        layer_norm(
            x,
            self.gamma.as_ref().map(Tensor::data),
            self.beta.as_ref().map(Tensor::data),
            self.eps,
        )
    }

    pub fn backward(&self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, NormGrads<T>)> {
        let (gx, gg, gb) = layer_norm_backward(x, self.gamma.as_ref().map(Tensor::data), grad_out, self.eps)?;
        let d = x.last_dim();
        Ok((
            gx,
            NormGrads {
                gamma: self.gamma.as_ref().map(|_| Tensor::new(&[d], gg)).transpose()?,
                beta: self.beta.as_ref().map(|_| Tensor::new(&[d], gb)).transpose()?,
            },
        ))
    }
}
