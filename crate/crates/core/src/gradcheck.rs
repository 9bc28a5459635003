//! Finite-difference certification of the hand-written backward passes.
//!
//! Every target is evaluated in double precision on the scalar loss
//! `L = Σ out ⊙ R` with a fixed random `R`, so the upstream gradient is `R`.
//! Each parameter group is compared against central differences with the
//! normwise relative error
//!
//! ```text
//! max |a - n| / max(max |a|, max |n|, floor)
//! ```
//!
//! which stays meaningful when individual entries are near zero.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gka::{gka_backward, gka_forward, FeaturePrep, GkaLayerParams};
use crate::mask::MaskSpec;
use crate::mha::{mha_backward, mha_forward, MhaLayerParams};
use crate::model::{Family, Input, Model, ModelConfig, TokenBatch};
use crate::nn::Linear;
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Pass threshold on the per-group relative error.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error.
pub const FD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    Linear,
    /// Kernel attention, all pairs, raw features.
    Gka,
    /// Kernel attention with a causal sliding window, RoPE and unit norm.
    GkaCausal,
    Mha,
    /// Dot-product attention without a value projection.
    ValueLess,
    /// Two stacked transformer blocks with kernel attention, input included.
    Blocks,
    /// Whole causal LM, sampled entries per group.
    ModelLm,
    /// Whole ViT, sampled entries per group.
    ModelVit,
}

impl GradTarget {
    pub const ALL: [GradTarget; 8] = [
        GradTarget::Linear,
        GradTarget::Gka,
        GradTarget::GkaCausal,
        GradTarget::Mha,
        GradTarget::ValueLess,
        GradTarget::Blocks,
        GradTarget::ModelLm,
        GradTarget::ModelVit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradTarget::Linear => "linear",
            GradTarget::Gka => "gka",
            GradTarget::GkaCausal => "gka-causal",
            GradTarget::Mha => "mha",
            GradTarget::ValueLess => "vlt",
            GradTarget::Blocks => "blocks",
            GradTarget::ModelLm => "model-lm",
            GradTarget::ModelVit => "model-vit",
        }
    }
}

impl fmt::Display for GradTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradTarget::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| {
            let names: Vec<_> = GradTarget::ALL.iter().map(|t| t.name()).collect();
            Error::Config(format!(
                "unknown gradcheck target '{s}' (expected one of {})",
                names.join(", ")
            ))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub seed: u64,
    /// Negate the analytic gradients; the check must then fail.
    pub corrupt: bool,
    /// Entries checked per group for the whole-model targets.
    pub max_per_group: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            corrupt: false,
            max_per_group: 24,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub target: GradTarget,
    pub seed: u64,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        !self.groups.is_empty() && self.groups.iter().all(|g| g.rel_err <= FD_TOLERANCE)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "target {} seed {}", self.target, self.seed)?;
        for g in &self.groups {
            writeln!(
                f,
                "  {:<28} n={:<5} |a|={:<10.3e} |n|={:<10.3e} rel={:.3e} {}",
                g.name,
                g.checked,
                g.max_abs_analytic,
                g.max_abs_numeric,
                g.rel_err,
                if g.rel_err <= FD_TOLERANCE { "ok" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "  max rel err {:.3e}: {}",
            self.max_rel_err(),
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Runs the check for one target.
pub fn grad_check(target: GradTarget, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6A09_E667);
    let problem = match target {
        GradTarget::Linear => linear_problem(&mut rng)?,
        GradTarget::Gka => gka_problem(&mut rng, MaskSpec::none(), FeaturePrep::NONE)?,
        GradTarget::GkaCausal => gka_problem(&mut rng, MaskSpec::patterned("SL", 3)?, FeaturePrep::causal(10.0))?,
        GradTarget::Mha => mha_problem(&mut rng, true)?,
        GradTarget::ValueLess => mha_problem(&mut rng, false)?,
        GradTarget::Blocks => blocks_problem(&mut rng)?,
        GradTarget::ModelLm => model_problem(&mut rng, Family::CausalLm)?,
        GradTarget::ModelVit => model_problem(&mut rng, Family::Vit)?,
    };
    let limit = match target {
        GradTarget::ModelLm | GradTarget::ModelVit => Some(opts.max_per_group.max(1)),
        _ => None,
    };
    let groups = compare(problem, opts.corrupt, limit, &mut rng)?;
    Ok(GradCheckReport {
        target,
        seed: opts.seed,
        groups,
    })
}

/// Named parameter groups, the analytic gradient of each, and a loss
/// evaluator taking the perturbed groups.
struct Problem {
    names: Vec<String>,
    values: Vec<Tensor<f64>>,
    analytic: Vec<Tensor<f64>>,
    loss: Box<dyn Fn(&[Tensor<f64>]) -> Result<f64>>,
}

fn compare(p: Problem, corrupt: bool, limit: Option<usize>, rng: &mut ChaCha8Rng) -> Result<Vec<GroupReport>> {
    let mut reports = Vec::with_capacity(p.names.len());
    let mut values = p.values.clone();
    for (gi, name) in p.names.iter().enumerate() {
        let len = values[gi].len();
        let idx: Vec<usize> = match limit {
            Some(k) if k < len => {
                let mut v = sample(rng, len, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        let (mut max_a, mut max_n, mut max_d) = (0.0f64, 0.0f64, 0.0f64);
        for &i in &idx {
            let orig = values[gi].data()[i];
            values[gi].data_mut()[i] = orig + FD_STEP;
            let plus = (p.loss)(&values)?;
            values[gi].data_mut()[i] = orig - FD_STEP;
            let minus = (p.loss)(&values)?;
            values[gi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let mut analytic = p.analytic[gi].data()[i];
            if corrupt {
                analytic = -analytic;
            }
            max_a = max_a.max(analytic.abs());
            max_n = max_n.max(numeric.abs());
            max_d = max_d.max((analytic - numeric).abs());
        }
        reports.push(GroupReport {
            name: name.clone(),
            checked: idx.len(),
            max_abs_analytic: max_a,
            max_abs_numeric: max_n,
            rel_err: max_d / max_a.max(max_n).max(FD_FLOOR),
        });
    }
    Ok(reports)
}

fn contract(out: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

const B: usize = 2;
const N: usize = 6;
const D: usize = 8;
const H: usize = 2;

fn linear_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let x = Tensor::randn(&[B, N, D], 1.0, rng);
    let w = Tensor::randn(&[D, 5], 0.5, rng);
    let b = Tensor::randn(&[5], 0.5, rng);
    let r = Tensor::randn(&[B, N, 5], 1.0, rng);
    let lin = Linear::new(w.clone(), Some(b.clone()))?;
    let (gx, g) = lin.backward(&x, &r)?;
    let rr = r.clone();
    Ok(Problem {
        names: vec!["x".into(), "w".into(), "b".into()],
        values: vec![x, w, b],
        analytic: vec![gx, g.w, g.b.expect("bias present")],
        loss: Box::new(move |v| {
            let lin = Linear::new(v[1].clone(), Some(v[2].clone()))?;
            Ok(contract(&lin.forward(&v[0])?, &rr))
        }),
    })
}

fn gka_problem(rng: &mut ChaCha8Rng, mask: MaskSpec, prep: FeaturePrep) -> Result<Problem> {
    let x = Tensor::randn(&[B, N, D], 1.0, rng);
    // Bandwidths comparable to the typical token distance.
    let log_sigma = Tensor::from_f64(&[H], &[rng.gen_range(0.0..0.8), rng.gen_range(0.0..0.8)])?;
    let w_o = Tensor::randn(&[D, D], 0.4, rng);
    let b_o = Tensor::randn(&[D], 0.4, rng);
    let r = Tensor::randn(&[B, N, D], 1.0, rng);
    let build = move |ls: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> Result<GkaLayerParams<f64>> {
        let mut p = GkaLayerParams::identity(D, H)?;
        p.log_sigma = ls.clone();
        p.w_o = w.clone();
        p.b_o = Some(b.clone());
        p.prep = prep;
        Ok(p)
    };
    let params = build(&log_sigma, &w_o, &b_o)?;
    let g = gka_backward(&x, &params, &mask, 0, &r)?;
    let rr = r.clone();
    Ok(Problem {
        names: vec!["x".into(), "log_sigma".into(), "w_o".into(), "b_o".into()],
        values: vec![x, log_sigma, w_o, b_o],
        analytic: vec![g.x, g.log_sigma, g.w_o, g.b_o.expect("bias present")],
        loss: Box::new(move |v| {
            let p = build(&v[1], &v[2], &v[3])?;
            Ok(contract(&gka_forward(&v[0], &p, &mask, 0, None)?, &rr))
        }),
    })
}

fn mha_problem(rng: &mut ChaCha8Rng, with_values: bool) -> Result<Problem> {
    let x = Tensor::randn(&[B, N, D], 1.0, rng);
    let mut names = vec!["x".to_string()];
    let mut values = vec![x];
    let projections: &[&str] = if with_values {
        &["q", "k", "v", "o"]
    } else {
        &["q", "k", "o"]
    };
    for p in projections {
        names.push(format!("{p}.w"));
        values.push(Tensor::randn(&[D, D], 0.5, rng));
        names.push(format!("{p}.b"));
        values.push(Tensor::randn(&[D], 0.3, rng));
    }
    let r = Tensor::randn(&[B, N, D], 1.0, rng);
    let mask = MaskSpec::causal();
    let build = move |v: &[Tensor<f64>]| -> Result<MhaLayerParams<f64>> {
        let lin = |i: usize| Linear::new(v[i].clone(), Some(v[i + 1].clone()));
        Ok(MhaLayerParams {
            heads: H,
            q: lin(1)?,
            k: lin(3)?,
            v: if with_values { Some(lin(5)?) } else { None },
            o: lin(if with_values { 7 } else { 5 })?,
            rope_base: Some(10.0),
        })
    };
    let params = build(&values)?;
    let g = mha_backward(&values[0], &params, &mask, 0, &r)?;
    let mut analytic = vec![g.x];
    let mut push = |lg: crate::nn::LinearGrads<f64>| {
        analytic.push(lg.w);
        analytic.push(lg.b.expect("bias present"));
    };
    push(g.q);
    push(g.k);
    if let Some(v) = g.v {
        push(v);
    }
    push(g.o);
    let rr = r.clone();
    Ok(Problem {
        names,
        values,
        analytic,
        loss: Box::new(move |v| Ok(contract(&mha_forward(&v[0], &build(v)?, &mask, 0)?, &rr))),
    })
}

fn tiny_config(family: Family) -> Result<ModelConfig> {
    let mut cfg = match family {
        Family::CausalLm => ModelConfig::preset("gka-copy")?,
        Family::Vit => ModelConfig::preset("gka-vit-toy")?,
    };
    cfg.width = D;
    cfg.heads = H;
    cfg.depth = 2;
    cfg.drop_path_rate = 0.0;
    if family == Family::CausalLm {
        cfg.vocab_size = 7;
        cfg.seq_len = N;
        cfg.layer_pattern = Some("SL".into());
        cfg.window = 3;
        cfg.rope_base = 10.0;
    } else {
        cfg.image_size = 8;
        cfg.patch_size = 4;
        cfg.channels = 2;
        cfg.num_classes = 3;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// A model whose every parameter has been jittered away from its
/// initialization so biases, gains and bandwidths are all exercised.
fn jittered_model(rng: &mut ChaCha8Rng, family: Family) -> Result<Model<f64>> {
    let cfg = tiny_config(family)?;
    let mut model = Model::<f64>::init(&cfg, rng)?;
    model.visit_mut(&mut |name, _, t| {
        let std = if name.ends_with("log_sigma") { 0.2 } else { 0.15 };
        for v in t.data_mut() {
            *v += std * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    });
    Ok(model)
}

fn collect_params(model: &Model<f64>, filter: impl Fn(&str) -> bool) -> (Vec<String>, Vec<Tensor<f64>>) {
    let mut names = Vec::new();
    let mut values = Vec::new();
    model.visit(&mut |n, _, t| {
        if filter(&n) {
            names.push(n);
            values.push(t.clone());
        }
    });
    (names, values)
}

fn apply_params(model: &mut Model<f64>, names: &[String], values: &[Tensor<f64>]) {
    model.visit_mut(&mut |n, _, t| {
        if let Some(i) = names.iter().position(|x| *x == n) {
            *t = values[i].clone();
        }
    });
}

fn blocks_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let model = jittered_model(rng, Family::CausalLm)?;
    let mask = model.mask();
    let (pnames, pvalues) = collect_params(&model, |n| n.starts_with("blocks."));
    let x = Tensor::randn(&[B, N, D], 1.0, rng);
    let r = Tensor::randn(&[B, N, D], 1.0, rng);

    let mut caches = Vec::new();
    let mut h = x.clone();
    for (l, block) in model.blocks.iter().enumerate() {
        let (y, c) = block.forward_cached(&h, &mask, l, None, None)?;
        caches.push(c);
        h = y;
    }
    let mut g = r.clone();
    let mut by_name = std::collections::BTreeMap::new();
    for (l, block) in model.blocks.iter().enumerate().rev() {
        let (gx, items) = block.backward(&caches[l], &mask, l, &g)?;
        for (n, t) in items {
            by_name.insert(format!("blocks.{l}.{n}"), t);
        }
        g = gx;
    }
    let mut analytic = vec![g];
    for n in &pnames {
        analytic.push(
            by_name
                .remove(n)
                .ok_or_else(|| Error::Input(format!("backward produced no gradient for '{n}'")))?,
        );
    }
    let mut names = vec!["x".to_string()];
    names.extend(pnames.iter().cloned());
    let mut values = vec![x];
    values.extend(pvalues);
    let rr = r.clone();
    Ok(Problem {
        names,
        values,
        analytic,
        loss: Box::new(move |v| {
            let mut m = model.clone();
            apply_params(&mut m, &pnames, &v[1..]);
            let mut h = v[0].clone();
            for (l, block) in m.blocks.iter().enumerate() {
                h = block.forward(&h, &mask, l, None)?;
            }
            Ok(contract(&h, &rr))
        }),
    })
}

fn model_problem(rng: &mut ChaCha8Rng, family: Family) -> Result<Problem> {
    let model = jittered_model(rng, family)?;
    let cfg = model.config.clone();
    let (images, tokens) = match family {
        Family::Vit => (
            Some(Tensor::randn(
                &[B, cfg.channels, cfg.image_size, cfg.image_size],
                1.0,
                rng,
            )),
            None,
        ),
        Family::CausalLm => {
            let ids = (0..B * cfg.seq_len)
                .map(|_| rng.gen_range(0..cfg.vocab_size as u32))
                .collect();
            (None, Some(TokenBatch::new(B, cfg.seq_len, ids)?))
        }
    };
    let run = move |m: &Model<f64>| match (&images, &tokens) {
        (Some(img), _) => m.forward_train(Input::Images(img), None, None),
        (_, Some(tok)) => m.forward_train(Input::Tokens(tok), None, None),
        _ => unreachable!("one input kind is always built"),
    };
    let (logits, cache) = run(&model)?;
    let r = Tensor::randn(logits.shape(), 1.0, rng);
    let grads = model.backward(&cache, &r)?;
    let (names, values) = collect_params(&model, |_| true);
    let analytic = names
        .iter()
        .map(|n| {
            grads
                .get(n)
                .cloned()
                .ok_or_else(|| Error::Input(format!("backward produced no gradient for '{n}'")))
        })
        .collect::<Result<Vec<_>>>()?;
    let pnames = names.clone();
    Ok(Problem {
        names,
        values,
        analytic,
        loss: Box::new(move |v| {
            let mut m = model.clone();
            apply_params(&mut m, &pnames, v);
            Ok(contract(&run(&m)?.0, &r))
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_target_passes_and_corruption_fails() {
        for t in GradTarget::ALL {
            let ok = grad_check(t, &GradCheckOptions::default()).unwrap();
            assert!(ok.passed(), "{ok}");
            let bad = grad_check(
                t,
                &GradCheckOptions {
                    corrupt: true,
                    ..GradCheckOptions::default()
                },
            )
            .unwrap();
            assert!(!bad.passed(), "{bad}");
        }
    }

    #[test]
    fn target_names_round_trip() {
        for t in GradTarget::ALL {
            assert_eq!(t.name().parse::<GradTarget>().unwrap(), t);
        }
        assert!("nope".parse::<GradTarget>().is_err());
    }

    #[test]
    fn model_groups_cover_every_parameter() {
        let r = grad_check(GradTarget::ModelLm, &GradCheckOptions::default()).unwrap();
        assert!(r.groups.iter().any(|g| g.name == "blocks.1.attn.log_sigma"));
        assert!(r.groups.iter().any(|g| g.name == "embed.tokens"));
    }
}
