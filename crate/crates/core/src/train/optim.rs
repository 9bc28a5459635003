//! AdamW with decoupled weight decay and global-norm clipping.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{Gradients, Model, ParamKind};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            clip_norm: Some(1.0),
        }
    }
}

/// Moment estimates per parameter name plus the step counter.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

/// Summary of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub clipped: bool,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Updates one tensor. `scale` multiplies the gradient (used for
    /// clipping); the state step must already be advanced.
    pub fn update<T: Scalar>(
        &mut self,
        cfg: &AdamWConfig,
        name: &str,
        kind: ParamKind,
        param: &mut Tensor<T>,
        grad: &Tensor<T>,
        scale: f64,
    ) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::shape("adamw", param.shape(), grad.shape()));
        }
        let t = self.step.max(1) as i32;
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()]));
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let decay = if kind.decay_exempt() {
            0.0
        } else {
            cfg.lr * cfg.weight_decay
        };
        for (((p, &g), mi), vi) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let g = g.as_f64() * scale;
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            let mut pv = p.as_f64() * (1.0 - decay);
            pv -= cfg.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.eps);
            *p = T::of(pv);
        }
        Ok(())
    }
}

/// One AdamW step over every model parameter. Aborts without touching the
/// model if any gradient is non-finite or missing.
pub fn adamw_step<T: Scalar>(
    model: &mut Model<T>,
    grads: &Gradients<T>,
    state: &mut OptimizerState,
    cfg: &AdamWConfig,
) -> Result<StepInfo> {
    for (name, g) in &grads.by_name {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient of '{name}' at step {} (max |g| = {})",
                state.step + 1,
                g.max_abs()
            )));
        }
    }
    let grad_norm = grads.global_norm();
    let scale = match cfg.clip_norm {
        Some(c) if grad_norm > c => c / (grad_norm + 1e-6),
        _ => 1.0,
    };
    state.step += 1;
    let mut result = Ok(());
    model.visit_mut(&mut |name, kind, p| {
        if result.is_err() {
            return;
        }
        result = match grads.get(&name) {
            Some(g) => state.update(cfg, &name, kind, p, g, scale),
            None => Err(Error::Input(format!("no gradient for '{name}'"))),
        };
    });
    result?;
    Ok(StepInfo {
        grad_norm,
        clipped: scale < 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model() -> Model<f64> {
        let mut cfg = ModelConfig::preset("gka-copy").unwrap();
        cfg.width = 8;
        cfg.heads = 2;
        cfg.depth = 1;
        Model::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    fn zero_grads(m: &Model<f64>) -> Gradients<f64> {
        let mut g = Gradients::default();
        for (n, _, s) in m.param_specs() {
            g.by_name.insert(n, Tensor::zeros(&s));
        }
        g
    }

    #[test]
    fn zero_grads_no_decay_is_identity() {
        let mut m = tiny_model();
        let before = m.clone();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        adamw_step(&mut m, &zero_grads(&before), &mut OptimizerState::new(), &cfg).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn first_step_closed_form() {
        // After one step m̂ = g and v̂ = g², so the update is lr·g/(|g| + eps).
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut st = OptimizerState::new();
        st.step = 1;
        let mut p: Tensor<f64> = Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::from_f64(&[3], &[0.3, -4.0, 1e-3]).unwrap();
        st.update(&cfg, "p", ParamKind::Weight, &mut p, &g, 1.0).unwrap();
        let expect = [
            1.0 - 0.1 * 0.3 / (0.3 + 1e-8),
            -2.0 + 0.1 * 4.0 / (4.0 + 1e-8),
            0.5 - 0.1 * 1e-3 / (1e-3 + 1e-8),
        ];
        for (a, b) in p.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn decay_skips_exempt_groups() {
        let mut m = tiny_model();
        let before = m.clone();
        let cfg = AdamWConfig {
            weight_decay: 0.5,
            lr: 0.1,
            ..AdamWConfig::default()
        };
        // Make the bias and log_sigma nonzero so decay would be visible.
        m.visit_mut(&mut |_, _, t| {
            for v in t.data_mut() {
                *v += 0.25;
            }
        });
        let shifted = m.clone();
        adamw_step(&mut m, &zero_grads(&before), &mut OptimizerState::new(), &cfg).unwrap();
        let mut after = Vec::new();
        m.visit(&mut |n, k, t| after.push((n, k, t.clone())));
        let mut orig = Vec::new();
        shifted.visit(&mut |n, _, t| orig.push((n, t.clone())));
        for ((name, kind, a), (_, o)) in after.iter().zip(&orig) {
            if kind.decay_exempt() {
                assert_eq!(a, o, "{name}");
            } else {
                assert!(a.max_abs() < o.max_abs(), "{name}");
            }
        }
        assert!(after.iter().any(|(n, _, _)| n.ends_with("log_sigma")));
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut m = tiny_model();
        let before = m.clone();
        let mut g = zero_grads(&m);
        g.by_name.get_mut("head.w").unwrap().data_mut()[0] = f64::NAN;
        let err = adamw_step(&mut m, &g, &mut OptimizerState::new(), &AdamWConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref s) if s.contains("head.w")));
        assert_eq!(m, before);
    }

    #[test]
    fn clipping_bounds_effective_gradient() {
        let mut m = tiny_model();
        let mut g = zero_grads(&m);
        g.by_name.get_mut("head.w").unwrap().data_mut()[0] = 100.0;
        let info = adamw_step(&mut m, &g, &mut OptimizerState::new(), &AdamWConfig::default()).unwrap();
        assert!(info.clipped);
        assert!((info.grad_norm - 100.0).abs() < 1e-12);
    }
}
