//! Token-level cross-entropy and bits-per-byte.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Result of [`cross_entropy`].
#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    /// Mean negative log-likelihood over the counted targets, in nats.
    pub loss: f64,
    pub total_nats: f64,
    pub count: usize,
    /// Targets whose logit was the (first) maximum.
    pub correct: usize,
    /// Gradient of `loss` with respect to the logits.
    pub grad: Tensor<T>,
}

/// Mean cross-entropy of `logits [.., V]` against one optional target per
/// row. Rows with `None` are ignored and receive zero gradient.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[Option<u32>]) -> Result<LossOutput<T>> {
    let v = logits.last_dim();
    let rows = logits.rows();
    if targets.len() != rows {
        return Err(Error::shape("cross_entropy", &[rows], &[targets.len()]));
    }
    let count = targets.iter().filter(|t| t.is_some()).count();
    if count == 0 {
        return Err(Error::Input("cross_entropy needs at least one target".into()));
    }
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    let mut correct = 0;
    let inv = 1.0 / count as f64;
    for (r, target) in targets.iter().enumerate() {
        let Some(t) = *target else { continue };
        let t = t as usize;
        if t >= v {
            return Err(Error::Input(format!("target {t} >= {v} classes")));
        }
        let row = logits.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x.as_f64()));
        if !max.is_finite() {
            return Err(Error::NonFinite(format!("logits row {r}")));
        }
        let sum: f64 = row.iter().map(|&x| (x.as_f64() - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[t].as_f64();
        let argmax = row
            .iter()
            .enumerate()
            .fold(0, |best, (j, &x)| if x > row[best] { j } else { best });
        correct += usize::from(argmax == t);
        for (j, g) in grad.row_mut(r).iter_mut().enumerate() {
            let p = (row[j].as_f64() - lse).exp();
            *g = T::of((p - if j == t { 1.0 } else { 0.0 }) * inv);
        }
    }
    Ok(LossOutput {
        loss: total * inv,
        total_nats: total,
        count,
        correct,
        grad,
    })
}

/// `total_nats / (ln 2 · total_bytes)`.
pub fn bits_per_byte(total_nats: f64, total_bytes: u64) -> Result<f64> {
    if total_bytes == 0 {
        return Err(Error::Input("bits_per_byte needs at least one byte".into()));
    }
    Ok(total_nats / (std::f64::consts::LN_2 * total_bytes as f64))
}
