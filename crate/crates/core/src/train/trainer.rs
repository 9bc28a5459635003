//! The training loop and its metric trace.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{bits_per_byte, cross_entropy};
use super::optim::{adamw_step, AdamWConfig, OptimizerState};
use super::tasks::{byte_windows, gen_bars, gen_cluster_regression, gen_copy_lm, BarsSpec, ClusterSpec, CopySpec};
use crate::error::{Error, Result};
use crate::gka::{gka_backward, gka_forward, GkaLayerParams};
use crate::mask::MaskSpec;
use crate::model::{Family, Input, Model, ParamKind};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum TaskSpec {
    CopyLm(CopySpec),
    Bars(BarsSpec),
    ClusterRegression(ClusterSpec),
}

impl TaskSpec {
    pub fn name(&self) -> &'static str {
        match self {
            TaskSpec::CopyLm(_) => "copy_lm",
            TaskSpec::Bars(_) => "bars",
            TaskSpec::ClusterRegression(_) => "cluster_regression",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// A metrics row is written every `log_every` steps and after the last.
    pub log_every: usize,
    pub seed: u64,
    pub optim: AdamWConfig,
    /// Items in the fixed evaluation batch the metrics are computed on.
    pub eval_batch: usize,
    /// Stop after the first metrics row whose accuracy reaches this value.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            log_every: 50,
            seed: 0,
            optim: AdamWConfig::default(),
            eval_batch: 256,
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    /// Settings for the copy task.
    pub fn copy_task() -> Self {
        Self {
            steps: 3000,
            log_every: 250,
            optim: AdamWConfig {
                lr: 3e-3,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            ..Self::default()
        }
    }

    /// Full-batch bandwidth fitting on cluster regression. At larger rates
    /// the first moment, built up while σ is far too wide, carries σ past
    /// the loss minimum once the gradient has become tiny.
    pub fn cluster_task() -> Self {
        Self {
            steps: 100,
            log_every: 1,
            optim: AdamWConfig {
                lr: 0.03,
                weight_decay: 0.0,
                clip_norm: None,
                ..AdamWConfig::default()
            },
            ..Self::default()
        }
    }
}

/// One metrics row. Loss, accuracy and bpb refer to the fixed evaluation
/// batch, evaluated before the update of that step.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub bpb: Option<f64>,
    /// `sigma_L{l}_H{h}` values in layer-major order.
    pub sigmas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsTrace {
    pub layers: usize,
    pub heads: usize,
    pub rows: Vec<MetricRow>,
}

impl MetricsTrace {
    pub fn header(&self) -> String {
        let mut h = String::from("step,loss,accuracy,bpb");
        for l in 0..self.layers {
            for k in 0..self.heads {
                let _ = write!(h, ",sigma_L{l}_H{k}");
            }
        }
        h
    }

    /// CSV with 9 significant digits; absent values are empty fields.
    pub fn to_csv(&self) -> String {
        let mut s = self.header();
        s.push('\n');
        let opt = |v: Option<f64>| v.map(fmt_sig).unwrap_or_default();
        for r in &self.rows {
            let _ = write!(s, "{},{},{},{}", r.step, fmt_sig(r.loss), opt(r.accuracy), opt(r.bpb));
            for v in &r.sigmas {
                let _ = write!(s, ",{}", fmt_sig(*v));
            }
            s.push('\n');
        }
        s
    }

    pub fn last(&self) -> Option<&MetricRow> {
        self.rows.last()
    }
}

/// Decimal with 9 significant digits.
pub fn fmt_sig(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let mag = v.abs().log10().floor() as i32;
    if (-5..=14).contains(&mag) {
        let decimals = (8 - mag).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{v:.8e}")
    }
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (step as u64).wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Seed of the held-out evaluation batch.
fn eval_seed(seed: u64) -> u64 {
    step_seed(seed, usize::MAX)
}

struct Eval {
    loss: f64,
    accuracy: Option<f64>,
    bpb: Option<f64>,
}

fn sigmas<T: Scalar>(model: &Model<T>) -> Vec<f64> {
    model
        .bandwidths()
        .map(|b| b.log_sigma.data().iter().map(|v| v.as_f64().exp()).collect())
        .unwrap_or_default()
}

/// Loss, logits gradient and accuracy of one labelled batch.
fn batch_loss<T: Scalar>(
    model: &Model<T>,
    task: &TaskSpec,
    batch: usize,
    seed: u64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(super::loss::LossOutput<T>, crate::model::ForwardCache<T>)> {
    let drop = rng.map(|r| r as &mut dyn rand::RngCore);
    match task {
        TaskSpec::CopyLm(spec) => {
            let b = gen_copy_lm(&CopySpec { batch, ..*spec }, seed)?;
            let (logits, cache) = model.forward_train(Input::Tokens(&b.inputs), drop, None)?;
            Ok((cross_entropy(&logits, &b.targets)?, cache))
        }
        TaskSpec::Bars(spec) => {
            let (img, labels) = gen_bars::<T>(&BarsSpec { batch, ..*spec }, seed)?;
            let (logits, cache) = model.forward_train(Input::Images(&img), drop, None)?;
            let targets: Vec<Option<u32>> = labels.into_iter().map(Some).collect();
            Ok((cross_entropy(&logits, &targets)?, cache))
        }
        TaskSpec::ClusterRegression(_) => Err(Error::Input(
            "cluster_regression trains a single attention layer; use train_cluster_sigma".into(),
        )),
    }
}

fn check_task<T: Scalar>(model: &Model<T>, task: &TaskSpec) -> Result<()> {
    let cfg = &model.config;
    match task {
        TaskSpec::CopyLm(spec) => {
            if cfg.family != Family::CausalLm || cfg.vocab_size < spec.vocab || cfg.seq_len < spec.context() {
                return Err(Error::Config(format!(
                    "copy_lm needs a causal_lm model with vocab >= {} and seq_len >= {}",
                    spec.vocab,
                    spec.context()
                )));
            }
        }
        TaskSpec::Bars(spec) => {
            if cfg.family != Family::Vit
                || cfg.num_classes < 2
                || cfg.image_size != spec.size
                || cfg.channels != spec.channels
            {
                return Err(Error::Config(format!(
                    "bars needs a vit model with >= 2 classes and {}x{}x{} input",
                    spec.channels, spec.size, spec.size
                )));
            }
        }
        TaskSpec::ClusterRegression(_) => {}
    }
    Ok(())
}

fn evaluate<T: Scalar>(model: &Model<T>, task: &TaskSpec, cfg: &TrainConfig) -> Result<Eval> {
    let (out, _) = batch_loss(model, task, cfg.eval_batch, eval_seed(cfg.seed), None)?;
    let bpb = match task {
        // One token per byte.
        TaskSpec::CopyLm(_) => Some(bits_per_byte(out.total_nats, out.count as u64)?),
        _ => None,
    };
    Ok(Eval {
        loss: out.loss,
        accuracy: Some(out.correct as f64 / out.count as f64),
        bpb,
    })
}

/// Trains `model` on `task`: forward, loss, backward and one AdamW step per
/// iteration, each on a fresh batch derived from `(seed, step)`. Metrics are
/// computed on a fixed evaluation batch, so `lr = 0` gives a constant trace.
///
/// Training ends early after the first metrics row reaching
/// `cfg.target_accuracy`. A non-finite loss or gradient aborts with the
/// last step whose metrics were finite.
pub fn train_loop<T: Scalar>(
    model: &mut Model<T>,
    task: &TaskSpec,
    cfg: &TrainConfig,
    batch: usize,
) -> Result<MetricsTrace> {
    check_task(model, task)?;
    if cfg.log_every == 0 || batch == 0 || cfg.eval_batch == 0 {
        return Err(Error::Config("log_every, batch and eval_batch must be >= 1".into()));
    }
    let mut trace = MetricsTrace {
        layers: model.config.depth,
        heads: if model.bandwidths().is_some() {
            model.config.heads
        } else {
            0
        },
        rows: Vec::new(),
    };
    let mut state = OptimizerState::new();
    let mut last_good = None;
    for step in 0..=cfg.steps {
        if step % cfg.log_every == 0 || step == cfg.steps {
            let e = evaluate(model, task, cfg)?;
            if !e.loss.is_finite() {
                return Err(abort(step, last_good));
            }
            last_good = Some(step);
            trace.rows.push(MetricRow {
                step,
                loss: e.loss,
                accuracy: e.accuracy,
                bpb: e.bpb,
                sigmas: sigmas(model),
            });
            if matches!((cfg.target_accuracy, e.accuracy), (Some(t), Some(a)) if a >= t) {
                break;
            }
        }
        if step == cfg.steps {
            break;
        }
        let mut drop_rng = ChaCha8Rng::seed_from_u64(step_seed(cfg.seed ^ 0xD5, step));
        let (out, cache) = batch_loss(model, task, batch, step_seed(cfg.seed, step), Some(&mut drop_rng))
            .map_err(|e| if e.is_numeric() { abort(step, last_good) } else { e })?;
        if !out.loss.is_finite() {
            return Err(abort(step, last_good));
        }
        let grads = model.backward(&cache, &out.grad)?;
        adamw_step(model, &grads, &mut state, &cfg.optim).map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("{msg}; last good metrics at step {last_good:?}")),
            other => other,
        })?;
    }
    Ok(trace)
}

fn abort(step: usize, last_good: Option<usize>) -> Error {
    Error::NonFinite(format!(
        "loss became non-finite at step {step}; last good metrics at step {}",
        last_good.map_or("none".into(), |s| s.to_string())
    ))
}

/// Next-byte likelihood of a byte-level language model on a text corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ByteEval {
    pub total_nats: f64,
    /// Predicted bytes; one token per byte.
    pub tokens: usize,
    pub nats_per_token: f64,
    pub bpb: f64,
}

/// Scores `model` on `batch` random windows of `len` bytes from `text`.
pub fn byte_lm_eval<T: Scalar>(model: &Model<T>, text: &[u8], batch: usize, len: usize, seed: u64) -> Result<ByteEval> {
    let cfg = &model.config;
    if cfg.family != Family::CausalLm || cfg.vocab_size < 256 || cfg.seq_len < len {
        return Err(Error::Config(format!(
            "byte evaluation needs a causal_lm model with vocab >= 256 and seq_len >= {len}"
        )));
    }
    let (inputs, targets) = byte_windows(text, batch, len, seed)?;
    let (logits, _) = model.forward_train(Input::Tokens(&inputs), None, None)?;
    let out = cross_entropy(&logits, &targets)?;
    Ok(ByteEval {
        total_nats: out.total_nats,
        tokens: out.count,
        nats_per_token: out.loss,
        bpb: bits_per_byte(out.total_nats, out.count as u64)?,
    })
}

/// A one-layer, one-head kernel-attention regressor with identity output
/// projection; only the bandwidth is trained.
pub fn cluster_layer<T: Scalar>(dim: usize, log_sigma: f64) -> Result<GkaLayerParams<T>> {
    let mut p = GkaLayerParams::identity(dim, 1)?;
    p.log_sigma = Tensor::full(&[1], T::of(log_sigma));
    Ok(p)
}

/// Mean squared error of the layer output against the cluster means, with
/// its gradient.
pub fn cluster_loss<T: Scalar>(
    layer: &GkaLayerParams<T>,
    tokens: &Tensor<T>,
    targets: &Tensor<T>,
) -> Result<(f64, Tensor<T>, Tensor<T>)> {
    let y = gka_forward(tokens, layer, &MaskSpec::none(), 0, None)?;
    let n = y.len() as f64;
    let diff = y.sub(targets)?;
    let loss = diff.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / n;
    let grad = diff.scale(T::of(2.0 / n));
    Ok((loss, grad, y))
}

/// Full-batch training of the bandwidth on one cluster-regression sample
/// set. The metrics `accuracy` column holds the fraction of tokens whose
/// output lies closer to their own cluster mean than to any other.
pub fn train_cluster_sigma<T: Scalar>(
    spec: &ClusterSpec,
    init_log_sigma: f64,
    cfg: &TrainConfig,
) -> Result<(GkaLayerParams<T>, MetricsTrace)> {
    let data = gen_cluster_regression::<T>(spec)?;
    let mut layer = cluster_layer::<T>(spec.dim, init_log_sigma)?;
    let mut state = OptimizerState::new();
    let mut trace = MetricsTrace {
        layers: 1,
        heads: 1,
        rows: Vec::new(),
    };
    for step in 0..=cfg.steps {
        let (loss, grad, y) = cluster_loss(&layer, &data.tokens, &data.targets)?;
        if !loss.is_finite() {
            return Err(abort(step, trace.last().map(|r| r.step)));
        }
        if step % cfg.log_every == 0 || step == cfg.steps {
            trace.rows.push(MetricRow {
                step,
                loss,
                accuracy: Some(nearest_mean_accuracy(&y, &data.targets, &data.labels, spec.dim)),
                bpb: None,
                sigmas: vec![layer.sigma(0).as_f64()],
            });
        }
        if step == cfg.steps {
            break;
        }
        let g = gka_backward(&data.tokens, &layer, &MaskSpec::none(), 0, &grad)?;
        state.step += 1;
        state.update(
            &cfg.optim,
            "log_sigma",
            ParamKind::LogSigma,
            &mut layer.log_sigma,
            &g.log_sigma,
            1.0,
        )?;
    }
    Ok((layer, trace))
}

fn nearest_mean_accuracy<T: Scalar>(y: &Tensor<T>, targets: &Tensor<T>, labels: &[usize], d: usize) -> f64 {
    let (b, n, _) = y.dims3().expect("rank 3");
    let mut hits = 0;
    for bi in 0..b {
        for i in 0..n {
            let yi = &y.data()[(bi * n + i) * d..(bi * n + i + 1) * d];
            let mut best = (f64::INFINITY, usize::MAX);
            for j in 0..n {
                let tj = &targets.data()[(bi * n + j) * d..(bi * n + j + 1) * d];
                let dist: f64 = yi.iter().zip(tj).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
                if dist < best.0 {
                    best = (dist, labels[bi * n + j]);
                }
            }
            hits += usize::from(best.1 == labels[bi * n + i]);
        }
    }
    hits as f64 / (b * n) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small_copy_model() -> (Model<f64>, TaskSpec) {
        let mut cfg = ModelConfig::preset("gka-copy").unwrap();
        cfg.width = 16;
        cfg.heads = 2;
        let m = Model::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (
            m,
            TaskSpec::CopyLm(CopySpec {
                batch: 4,
                ..CopySpec::default()
            }),
        )
    }

    #[test]
    fn zero_lr_gives_constant_trace() {
        let (mut m, task) = small_copy_model();
        let cfg = TrainConfig {
            steps: 6,
            log_every: 2,
            eval_batch: 8,
            optim: AdamWConfig {
                lr: 0.0,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            ..TrainConfig::default()
        };
        let trace = train_loop(&mut m, &task, &cfg, 4).unwrap();
        assert_eq!(trace.rows.len(), 4);
        assert!(trace.rows.iter().all(|r| r.loss == trace.rows[0].loss));
    }

    #[test]
    fn traces_are_deterministic_and_have_sigma_columns() {
        let cfg = TrainConfig {
            steps: 4,
            log_every: 2,
            eval_batch: 8,
            ..TrainConfig::default()
        };
        let (mut a, task) = small_copy_model();
        let (mut b, _) = small_copy_model();
        let ta = train_loop(&mut a, &task, &cfg, 4).unwrap();
        let tb = train_loop(&mut b, &task, &cfg, 4).unwrap();
        assert_eq!(ta.to_csv(), tb.to_csv());
        assert_eq!(
            ta.header(),
            "step,loss,accuracy,bpb,sigma_L0_H0,sigma_L0_H1,sigma_L1_H0,sigma_L1_H1"
        );
        let last = ta.last().unwrap();
        assert_eq!(last.sigmas.len(), 4);
        // One byte per token on this task.
        assert!((last.bpb.unwrap() - last.loss / std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn mismatched_task_rejected() {
        let (mut m, _) = small_copy_model();
        let task = TaskSpec::Bars(BarsSpec::default());
        assert!(matches!(
            train_loop(&mut m, &task, &TrainConfig::default(), 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fmt_sig_nine_digits() {
        assert_eq!(fmt_sig(1.0), "1");
        assert_eq!(fmt_sig(0.123456789123), "0.123456789");
        assert_eq!(fmt_sig(12345.6789012345), "12345.6789");
        assert_eq!(fmt_sig(-2.5e-9), "-2.50000000e-9");
        for v in [0.1, 9.87654321012, 1e-7, 123456.0, 0.000123] {
            let back: f64 = fmt_sig(v).parse().unwrap();
            assert!(((back - v) / v).abs() < 1e-8, "{v}");
        }
    }

    #[test]
    fn wide_sigma_blurs_clusters() {
        let spec = ClusterSpec::default();
        let data = gen_cluster_regression::<f64>(&spec).unwrap();
        let wide = cluster_layer::<f64>(spec.dim, 1e6f64.ln()).unwrap();
        let (loss, _, _) = cluster_loss(&wide, &data.tokens, &data.targets).unwrap();
        assert!(loss > 0.1, "{loss}");
    }
}
