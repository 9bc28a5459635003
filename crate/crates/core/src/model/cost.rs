//! Analytical parameter and FLOP counts.
//!
//! Counting convention:
//! * every matrix multiply-add is 2 FLOPs; bias adds, residual adds, `exp`
//!   and divisions are 1 each;
//! * layer norm costs 5 FLOPs per element, plus 2 when affine;
//! * GELU costs 8 FLOPs per element;
//! * softmax costs 6 per score (scale, max, subtract, exp, sum, divide);
//! * the Gaussian kernel costs 7 per score (distance assembly 3, scale,
//!   exp, sum, divide) plus `2·N·d` per head for the squared norms;
//! * RoPE costs 3 FLOPs per rotated element and unit normalization 3.
//!
//! Scores are counted over the allowed set only, so windowed layers cost
//! less than full ones. For causal language models a second figure,
//! `flops_per_token`, follows the usual training estimate: six FLOPs per
//! non-embedding parameter plus `12·H·d·w` per layer, where `w` is the
//! layer's effective context.

use std::fmt;

use super::config::{AttentionKind, Family, ModelConfig};
use crate::mask::LayerMask;

/// Parameter and FLOP totals for one configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub name: String,
    pub total_params: u64,
    /// Attention projections (with their biases) plus bandwidth scalars.
    pub attn_params: u64,
    pub mlp_params: u64,
    pub sigma_params: u64,
    /// Patch or token embedding, CLS token and position embeddings.
    pub embed_params: u64,
    pub norm_params: u64,
    pub head_params: u64,
    /// Tokens per item the FLOP figures were computed for.
    pub tokens: u64,
    /// Forward FLOPs for one image or one full sequence.
    pub flops_forward: u64,
    /// Training FLOPs per token (causal models only).
    pub flops_per_token: Option<u64>,
    /// Forward FLOPs per component, summing to `flops_forward`.
    pub breakdown: Vec<(String, u64)>,
    pub convention: String,
}

pub const FLOP_CONVENTION: &str = "multiply-add = 2 FLOPs; exp, divide, bias and residual adds = 1; \
layer norm 5/elem (+2 affine); GELU 8/elem; softmax 6/score; gaussian kernel 7/score + 2Nd norms per head; \
LM flops_per_token = 6*(params - token embedding) + 12*H*d*context per layer";

impl CostReport {
    pub fn parts_sum(&self) -> u64 {
        self.attn_params + self.mlp_params + self.embed_params + self.norm_params + self.head_params
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = |v: u64| v as f64 / 1e6;
        writeln!(f, "model            {}", self.name)?;
        writeln!(
            f,
            "total params     {:>14}  ({:.2}M)",
            self.total_params,
            m(self.total_params)
        )?;
        writeln!(
            f,
            "  attention      {:>14}  ({:.2}M)",
            self.attn_params,
            m(self.attn_params)
        )?;
        writeln!(f, "  sigma          {:>14}", self.sigma_params)?;
        writeln!(
            f,
            "  mlp            {:>14}  ({:.2}M)",
            self.mlp_params,
            m(self.mlp_params)
        )?;
        writeln!(
            f,
            "  embedding      {:>14}  ({:.2}M)",
            self.embed_params,
            m(self.embed_params)
        )?;
        writeln!(f, "  norms          {:>14}", self.norm_params)?;
        writeln!(
            f,
            "  head           {:>14}  ({:.2}M)",
            self.head_params,
            m(self.head_params)
        )?;
        writeln!(f, "tokens           {:>14}", self.tokens)?;
        writeln!(
            f,
            "forward FLOPs    {:>14}  ({:.3}G)",
            self.flops_forward,
            self.flops_forward as f64 / 1e9
        )?;
        if let Some(t) = self.flops_per_token {
            writeln!(f, "FLOPs/token      {:>14}  ({:.4e})", t, t as f64)?;
        }
        for (k, v) in &self.breakdown {
            writeln!(f, "  {k:<14} {v:>14}")?;
        }
        write!(f, "convention: {}", self.convention)
    }
}

fn norm_params(cfg: &ModelConfig) -> u64 {
    if cfg.norm_affine {
        2 * cfg.width as u64
    } else {
        0
    }
}

fn attn_params(cfg: &ModelConfig) -> (u64, u64) {
    let d = cfg.width as u64;
    let linear = d * d + if cfg.attn_bias { d } else { 0 };
    match cfg.attention {
        AttentionKind::Gka => (linear + cfg.heads as u64, cfg.heads as u64),
        AttentionKind::Standard => (4 * linear, 0),
        AttentionKind::ValueLess => (3 * linear, 0),
    }
}

fn mlp_params(cfg: &ModelConfig) -> u64 {
    let (d, h) = (cfg.width as u64, cfg.hidden() as u64);
    let bias = if cfg.mlp_bias { h + d } else { 0 };
    2 * d * h + bias
}

/// Exact parameter counts (FLOP fields computed at the configured size).
pub fn count_params(cfg: &ModelConfig) -> CostReport {
    count_flops(cfg, None)
}

/// Parameter counts plus forward FLOPs at `tokens` tokens per item
/// (default: the configured image grid or context length).
pub fn count_flops(cfg: &ModelConfig, tokens: Option<usize>) -> CostReport {
    let d = cfg.width as u64;
    let l = cfg.depth as u64;
    let (attn_block, sigma_block) = attn_params(cfg);
    let mlp_block = mlp_params(cfg);
    let norm_block = 2 * norm_params(cfg);
    let head_bias = |n: u64| if cfg.embed_bias { n } else { 0 };
    let (embed, head) = match cfg.family {
        Family::Vit => {
            let patches = (cfg.grid() * cfg.grid()) as u64;
            let cls = u64::from(cfg.use_cls);
            let embed = cfg.patch_dim() as u64 * d + head_bias(d) + cls * d + (patches + cls) * d;
            (embed, d * cfg.num_classes as u64 + head_bias(cfg.num_classes as u64))
        }
        Family::CausalLm => {
            let v = cfg.vocab_size as u64;
            (v * d, d * v + head_bias(v))
        }
    };
    let norms = l * norm_block + norm_params(cfg);
    let mut report = CostReport {
        name: cfg.name.clone(),
        total_params: 0,
        attn_params: l * attn_block,
        mlp_params: l * mlp_block,
        sigma_params: l * sigma_block,
        embed_params: embed,
        norm_params: norms,
        head_params: head,
        tokens: 0,
        flops_forward: 0,
        flops_per_token: None,
        breakdown: Vec::new(),
        convention: FLOP_CONVENTION.to_string(),
    };
    report.total_params = report.parts_sum();

    let n = tokens.unwrap_or_else(|| cfg.tokens()) as u64;
    report.tokens = n;
    report.breakdown = flop_breakdown(cfg, n);
    report.flops_forward = report.breakdown.iter().map(|(_, v)| v).sum();
    if cfg.family == Family::CausalLm {
        let mask = cfg.mask();
        let context: u64 = (0..cfg.depth)
            .map(|layer| match mask.for_layer(layer) {
                LayerMask::Window(w) => (w as u64).min(n),
                _ => n,
            })
            .sum();
        let non_embedding = report.total_params - embed;
        report.flops_per_token = Some(6 * non_embedding + 12 * d * context);
    }
    report
}

/// Allowed (query, key) pairs for one layer.
fn scores(mask: LayerMask, n: u64) -> u64 {
    match mask {
        LayerMask::Full => n * n,
        LayerMask::Causal => n * (n + 1) / 2,
        LayerMask::Window(w) => {
            let w = (w as u64).min(n);
            // Rows 0..w-1 see i+1 keys, the rest see w.
            w * (w + 1) / 2 + (n - w) * w
        }
    }
}

fn flop_breakdown(cfg: &ModelConfig, n: u64) -> Vec<(String, u64)> {
    let d = cfg.width as u64;
    let heads = cfg.heads as u64;
    let hid = cfg.hidden() as u64;
    let ln = |rows: u64| rows * d * (5 + if cfg.norm_affine { 2 } else { 0 });
    let linear =
        |rows: u64, din: u64, dout: u64, bias: bool| 2 * rows * din * dout + if bias { rows * dout } else { 0 };
    let mask = cfg.mask();
    let prep = cfg.family == Family::CausalLm && cfg.qk_norm;

    let mut embed = 0;
    let mut head = 0;
    match cfg.family {
        Family::Vit => {
            let patches = (cfg.grid() * cfg.grid()) as u64;
            embed += linear(patches, cfg.patch_dim() as u64, d, cfg.embed_bias) + n * d;
            head += linear(1, d, cfg.num_classes as u64, cfg.embed_bias);
        }
        Family::CausalLm => {
            head += linear(n, d, cfg.vocab_size as u64, cfg.embed_bias);
        }
    }

    let (mut norms, mut proj, mut qk, mut softmax, mut mix, mut mlp, mut resid) = (0, 0, 0, 0, 0, 0, 0);
    for layer in 0..cfg.depth {
        let s = scores(mask.for_layer(layer), n);
        norms += 2 * ln(n);
        resid += 2 * n * d;
        let projections = match cfg.attention {
            AttentionKind::Gka => 1,
            AttentionKind::Standard => 4,
            AttentionKind::ValueLess => 3,
        };
        proj += projections * linear(n, d, d, cfg.attn_bias);
        // Distance or logit matrix, then the weighted sum of values.
        qk += 2 * s * d;
        mix += 2 * s * d;
        match cfg.attention {
            AttentionKind::Gka => {
                softmax += 7 * s * heads + 2 * n * d;
                if prep {
                    softmax += 6 * n * d;
                }
            }
            _ => {
                softmax += 6 * s * heads;
                if prep {
                    softmax += 2 * 3 * n * d;
                }
            }
        }
        mlp += linear(n, d, hid, cfg.mlp_bias) + linear(n, hid, d, cfg.mlp_bias) + 8 * n * hid;
    }
    // The final norm only matters for the rows the head reads; for ViTs that
    // is the CLS row.
    norms += ln(match cfg.family {
        Family::Vit => 1,
        Family::CausalLm => n,
    });
    vec![
        ("embed".into(), embed),
        ("attn_proj".into(), proj),
        ("attn_scores".into(), qk),
        ("attn_kernel".into(), softmax),
        ("attn_mix".into(), mix),
        ("mlp".into(), mlp),
        ("norms".into(), norms),
        ("residual".into(), resid),
        ("head".into(), head),
    ]
}
