//! Pre-norm transformer blocks and whole models with hand-written backward.

use std::collections::BTreeMap;

use rand::{Rng, RngCore};

use super::config::{AttentionKind, Family, ModelConfig};
use crate::error::{Error, Result};
use crate::gka::{gka_backward, gka_forward, AttentionCapture, GkaLayerParams};
use crate::mask::MaskSpec;
use crate::mha::{mha_backward, mha_forward_with_probs, MhaLayerParams};
use crate::nn::{Linear, Norm};
use crate::tensor::{gelu, gelu_grad, Scalar, Tensor};

/// Role of a parameter tensor, used by the optimizer to decide on decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    PosEmbed,
    ClsToken,
    LogSigma,
    TokenEmbed,
}

impl ParamKind {
    /// Biases, norm parameters, position embeddings, the CLS token and
    /// log-bandwidths are not decayed.
    pub fn decay_exempt(self) -> bool {
        matches!(
            self,
            ParamKind::Bias | ParamKind::Norm | ParamKind::PosEmbed | ParamKind::ClsToken | ParamKind::LogSigma
        )
    }
}

/// Gradients keyed by parameter name (see [`Model::visit`]).
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    pub by_name: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    fn insert(&mut self, name: String, g: Tensor<T>) {
        self.by_name.insert(name, g);
    }

    fn extend(&mut self, prefix: &str, items: Vec<(&'static str, Tensor<T>)>) {
        for (k, g) in items {
            self.insert(format!("{prefix}{k}"), g);
        }
    }

    /// Global L2 norm over every gradient.
    pub fn global_norm(&self) -> f64 {
        self.by_name
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| {
                let v = v.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.by_name.values().all(Tensor::is_finite)
    }

    pub fn scale(&mut self, s: T) {
        for g in self.by_name.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Attention<T> {
    Gka(GkaLayerParams<T>),
    Mha(MhaLayerParams<T>),
}

impl<T: Scalar> Attention<T> {
    pub fn forward(
        &self,
        x: &Tensor<T>,
        mask: &MaskSpec,
        layer: usize,
        capture: Option<&mut AttentionCapture<T>>,
    ) -> Result<Tensor<T>> {
        match self {
            Attention::Gka(p) => gka_forward(x, p, mask, layer, capture),
            Attention::Mha(p) => {
                let (y, probs) = mha_forward_with_probs(x, p, mask, layer)?;
                if let Some(cap) = capture {
                    cap.record(layer, probs, None);
                }
                Ok(y)
            }
        }
    }

    fn backward(
        &self,
        x: &Tensor<T>,
        mask: &MaskSpec,
        layer: usize,
        grad: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<(&'static str, Tensor<T>)>)> {
        let mut out = Vec::new();
        match self {
            Attention::Gka(p) => {
                let g = gka_backward(x, p, mask, layer, grad)?;
                out.push(("log_sigma", g.log_sigma));
                out.push(("o.w", g.w_o));
                if let Some(b) = g.b_o {
                    out.push(("o.b", b));
                }
                Ok((g.x, out))
            }
            Attention::Mha(p) => {
                let g = mha_backward(x, p, mask, layer, grad)?;
                let mut push = |w: &'static str, b: &'static str, lg: crate::nn::LinearGrads<T>| {
                    out.push((w, lg.w));
                    if let Some(bias) = lg.b {
                        out.push((b, bias));
                    }
                };
                push("q.w", "q.b", g.q);
                push("k.w", "k.b", g.k);
                if let Some(v) = g.v {
                    push("v.w", "v.b", v);
                }
                push("o.w", "o.b", g.o);
                Ok((g.x, out))
            }
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &'a Tensor<T>)) {
        match self {
            Attention::Gka(p) => {
                f(format!("{prefix}log_sigma"), ParamKind::LogSigma, &p.log_sigma);
                f(format!("{prefix}o.w"), ParamKind::Weight, &p.w_o);
                if let Some(b) = &p.b_o {
                    f(format!("{prefix}o.b"), ParamKind::Bias, b);
                }
            }
            Attention::Mha(p) => {
                visit_linear(&p.q, &format!("{prefix}q."), f);
                visit_linear(&p.k, &format!("{prefix}k."), f);
                if let Some(v) = &p.v {
                    visit_linear(v, &format!("{prefix}v."), f);
                }
                visit_linear(&p.o, &format!("{prefix}o."), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &mut Tensor<T>)) {
        match self {
            Attention::Gka(p) => {
                f(format!("{prefix}log_sigma"), ParamKind::LogSigma, &mut p.log_sigma);
                f(format!("{prefix}o.w"), ParamKind::Weight, &mut p.w_o);
                if let Some(b) = &mut p.b_o {
                    f(format!("{prefix}o.b"), ParamKind::Bias, b);
                }
            }
            Attention::Mha(p) => {
                visit_linear_mut(&mut p.q, &format!("{prefix}q."), f);
                visit_linear_mut(&mut p.k, &format!("{prefix}k."), f);
                if let Some(v) = &mut p.v {
                    visit_linear_mut(v, &format!("{prefix}v."), f);
                }
                visit_linear_mut(&mut p.o, &format!("{prefix}o."), f);
            }
        }
    }
}

fn visit_linear<'a, T>(l: &'a Linear<T>, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &'a Tensor<T>)) {
    f(format!("{prefix}w"), ParamKind::Weight, &l.w);
    if let Some(b) = &l.b {
        f(format!("{prefix}b"), ParamKind::Bias, b);
    }
}

fn visit_linear_mut<T>(l: &mut Linear<T>, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &mut Tensor<T>)) {
    f(format!("{prefix}w"), ParamKind::Weight, &mut l.w);
    if let Some(b) = &mut l.b {
        f(format!("{prefix}b"), ParamKind::Bias, b);
    }
}

fn visit_norm<'a, T>(n: &'a Norm<T>, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &'a Tensor<T>)) {
    if let Some(g) = &n.gamma {
        f(format!("{prefix}gamma"), ParamKind::Norm, g);
    }
    if let Some(b) = &n.beta {
        f(format!("{prefix}beta"), ParamKind::Norm, b);
    }
}

fn visit_norm_mut<T>(n: &mut Norm<T>, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &mut Tensor<T>)) {
    if let Some(g) = &mut n.gamma {
        f(format!("{prefix}gamma"), ParamKind::Norm, g);
    }
    if let Some(b) = &mut n.beta {
        f(format!("{prefix}beta"), ParamKind::Norm, b);
    }
}

fn norm_grads<T>(g: crate::nn::NormGrads<T>) -> Vec<(&'static str, Tensor<T>)> {
    let mut out = Vec::new();
    if let Some(t) = g.gamma {
        out.push(("gamma", t));
    }
    if let Some(t) = g.beta {
        out.push(("beta", t));
    }
    out
}

fn linear_grads<T>(g: crate::nn::LinearGrads<T>) -> Vec<(&'static str, Tensor<T>)> {
    let mut out = vec![("w", g.w)];
    if let Some(b) = g.b {
        out.push(("b", b));
    }
    out
}

/// Two-layer GELU feed-forward network.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

/// `x' = x + DropPath(attn(ln1(x)))`, `y = x' + DropPath(mlp(ln2(x')))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln1: Norm<T>,
    pub attn: Attention<T>,
    pub ln2: Norm<T>,
    pub mlp: Mlp<T>,
    pub drop_path: f64,
}

/// Activations kept for the backward pass of one block.
#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    x: Tensor<T>,
    xn1: Tensor<T>,
    x1: Tensor<T>,
    xn2: Tensor<T>,
    h: Tensor<T>,
    act: Tensor<T>,
    keep_attn: Option<Vec<T>>,
    keep_mlp: Option<Vec<T>>,
}

/// Per-sample residual-branch scale: 0 when dropped, `1/(1-p)` otherwise.
fn drop_path_scales<T: Scalar>(batch: usize, rate: f64, rng: Option<&mut dyn RngCore>) -> Option<Vec<T>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 - rate;
    Some(
        (0..batch)
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    T::of(1.0 / keep)
                } else {
                    T::zero()
                }
            })
            .collect(),
    )
}

fn reborrow<'s>(rng: &'s mut Option<&mut dyn RngCore>) -> Option<&'s mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

fn scale_samples<T: Scalar>(t: &mut Tensor<T>, scales: &[T]) {
    let per = t.len() / scales.len();
    for (chunk, &s) in t.data_mut().chunks_mut(per).zip(scales) {
        for v in chunk {
            *v *= s;
        }
    }
}

impl<T: Scalar> Block<T> {
    /// Evaluation-mode forward pass.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        mask: &MaskSpec,
        layer: usize,
        capture: Option<&mut AttentionCapture<T>>,
    ) -> Result<Tensor<T>> {
        self.forward_cached(x, mask, layer, None, capture).map(|(y, _)| y)
    }

    /// Forward pass keeping activations. DropPath is active only when an
    /// RNG is supplied.
    pub fn forward_cached(
        &self,
        x: &Tensor<T>,
        mask: &MaskSpec,
        layer: usize,
        mut rng: Option<&mut dyn RngCore>,
        capture: Option<&mut AttentionCapture<T>>,
    ) -> Result<(Tensor<T>, BlockCache<T>)> {
        let batch = x.shape()[0];
        let xn1 = self.ln1.forward(x)?;
        let mut a = self.attn.forward(&xn1, mask, layer, capture)?;
        let keep_attn = drop_path_scales(batch, self.drop_path, reborrow(&mut rng));
        if let Some(k) = &keep_attn {
            scale_samples(&mut a, k);
        }
        let x1 = x.add(&a)?;
        let xn2 = self.ln2.forward(&x1)?;
        let h = self.mlp.fc1.forward(&xn2)?;
        let act = h.map(gelu);
        let mut m = self.mlp.fc2.forward(&act)?;
        let keep_mlp = drop_path_scales(batch, self.drop_path, reborrow(&mut rng));
        if let Some(k) = &keep_mlp {
            scale_samples(&mut m, k);
        }
        let y = x1.add(&m)?;
        Ok((
            y,
            BlockCache {
                x: x.clone(),
                xn1,
                x1,
                xn2,
                h,
                act,
                keep_attn,
                keep_mlp,
            },
        ))
    }

    /// Returns the input gradient and parameter gradients named relative to
    /// the block (`ln1.gamma`, `attn.o.w`, `mlp.fc1.w`, ...).
    pub fn backward(
        &self,
        cache: &BlockCache<T>,
        mask: &MaskSpec,
        layer: usize,
        grad_out: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<(String, Tensor<T>)>)> {
        let mut grads = Vec::new();
        let mut named = |prefix: &str, items: Vec<(&'static str, Tensor<T>)>| {
            for (k, g) in items {
                grads.push((format!("{prefix}{k}"), g));
            }
        };

        let mut gm = grad_out.clone();
        if let Some(k) = &cache.keep_mlp {
            scale_samples(&mut gm, k);
        }
        let (gact, g2) = self.mlp.fc2.backward(&cache.act, &gm)?;
        let mut gh = gact;
        for (g, &h) in gh.data_mut().iter_mut().zip(cache.h.data()) {
            *g *= gelu_grad(h);
        }
        let (gxn2, g1) = self.mlp.fc1.backward(&cache.xn2, &gh)?;
        let (gx1_norm, gln2) = self.ln2.backward(&cache.x1, &gxn2)?;
        let mut gx1 = grad_out.add(&gx1_norm)?;
        named("mlp.fc2.", linear_grads(g2));
        named("mlp.fc1.", linear_grads(g1));
        named("ln2.", norm_grads(gln2));

        let mut ga = gx1.clone();
        if let Some(k) = &cache.keep_attn {
            scale_samples(&mut ga, k);
        }
        let (gxn1, gattn) = self.attn.backward(&cache.xn1, mask, layer, &ga)?;
        let (gx_norm, gln1) = self.ln1.backward(&cache.x, &gxn1)?;
        gx1.add_assign(&gx_norm)?;
        named("attn.", gattn);
        named("ln1.", norm_grads(gln1));
        Ok((gx1, grads))
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &'a Tensor<T>)) {
        visit_norm(&self.ln1, &format!("{prefix}ln1."), f);
        self.attn.visit(&format!("{prefix}attn."), f);
        visit_norm(&self.ln2, &format!("{prefix}ln2."), f);
        visit_linear(&self.mlp.fc1, &format!("{prefix}mlp.fc1."), f);
        visit_linear(&self.mlp.fc2, &format!("{prefix}mlp.fc2."), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &mut Tensor<T>)) {
        visit_norm_mut(&mut self.ln1, &format!("{prefix}ln1."), f);
        self.attn.visit_mut(&format!("{prefix}attn."), f);
        visit_norm_mut(&mut self.ln2, &format!("{prefix}ln2."), f);
        visit_linear_mut(&mut self.mlp.fc1, &format!("{prefix}mlp.fc1."), f);
        visit_linear_mut(&mut self.mlp.fc2, &format!("{prefix}mlp.fc2."), f);
    }
}

/// Input embedding of either family.
#[derive(Debug, Clone, PartialEq)]
pub enum Embedding<T> {
    Patch {
        proj: Linear<T>,
        cls: Option<Tensor<T>>,
        /// `[tokens, D]`.
        pos: Tensor<T>,
    },
    Token {
        /// `[vocab, D]`.
        table: Tensor<T>,
    },
}

/// A batch of token ids, `[batch, len]` row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<u32>,
}

impl TokenBatch {
    pub fn new(batch: usize, len: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != batch * len || batch == 0 || len == 0 {
            return Err(Error::Input(format!(
                "token batch {batch}x{len} does not match {} ids",
                ids.len()
            )));
        }
        Ok(Self { batch, len, ids })
    }

    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        let len = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != len) {
            return Err(Error::Input("ragged token rows".into()));
        }
        Self::new(rows.len(), len, rows.concat())
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }
}

/// Model input.
#[derive(Debug, Clone, Copy)]
pub enum Input<'a, T> {
    /// `[B, C, H, W]` images.
    Images(&'a Tensor<T>),
    Tokens(&'a TokenBatch),
}

/// Activations of a full forward pass, consumed by [`Model::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    patches: Option<Tensor<T>>,
    tokens: Option<TokenBatch>,
    blocks: Vec<BlockCache<T>>,
    /// Input of the final norm (`[B, D]` pooled for ViTs, `[B, N, D]` for LMs).
    pre_norm: Tensor<T>,
    post_norm: Tensor<T>,
    seq: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub embed: Embedding<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: Norm<T>,
    pub head: Linear<T>,
}

impl<T: Scalar> Model<T> {
    /// Random initialization: normal weights with `config.init_std`, zero
    /// biases, unit norm gains and `log_sigma = config.init_log_sigma`.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let cfg = config.clone();
        let d = cfg.width;
        let std = cfg.init_std;
        let linear = |din: usize, dout: usize, bias: bool, rng: &mut R| Linear {
            w: Tensor::randn(&[din, dout], std, rng),
            b: bias.then(|| Tensor::zeros(&[dout])),
        };
        let embed = match cfg.family {
            Family::Vit => {
                let cls = cfg.use_cls.then(|| Tensor::randn(&[d], std, rng));
                Embedding::Patch {
                    proj: linear(cfg.patch_dim(), d, cfg.embed_bias, rng),
                    cls,
                    pos: Tensor::randn(&[cfg.tokens(), d], std, rng),
                }
            }
            Family::CausalLm => Embedding::Token {
                table: Tensor::randn(&[cfg.vocab_size, d], 1.0, rng),
            },
        };
        let causal = cfg.family == Family::CausalLm;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            let attn = match cfg.attention {
                AttentionKind::Gka => Attention::Gka(GkaLayerParams {
                    heads: cfg.heads,
                    log_sigma: Tensor::full(&[cfg.heads], T::of(cfg.init_log_sigma)),
                    w_o: Tensor::randn(&[d, d], std, rng),
                    b_o: cfg.attn_bias.then(|| Tensor::zeros(&[d])),
                    epsilon: T::gka_epsilon(),
                    prep: cfg.feature_prep(),
                }),
                kind => Attention::Mha(MhaLayerParams {
                    heads: cfg.heads,
                    q: linear(d, d, cfg.attn_bias, rng),
                    k: linear(d, d, cfg.attn_bias, rng),
                    v: (kind == AttentionKind::Standard).then(|| linear(d, d, cfg.attn_bias, rng)),
                    o: linear(d, d, cfg.attn_bias, rng),
                    rope_base: (causal && cfg.qk_norm).then_some(cfg.rope_base),
                }),
            };
            blocks.push(Block {
                ln1: Norm::new(d, cfg.norm_affine),
                attn,
                ln2: Norm::new(d, cfg.norm_affine),
                mlp: Mlp {
                    fc1: linear(d, cfg.hidden(), cfg.mlp_bias, rng),
                    fc2: linear(cfg.hidden(), d, cfg.mlp_bias, rng),
                },
                drop_path: cfg.drop_path_rate,
            });
        }
        let outputs = match cfg.family {
            Family::Vit => cfg.num_classes,
            Family::CausalLm => cfg.vocab_size,
        };
        let head = linear(d, outputs, cfg.embed_bias, rng);
        Ok(Self {
            embed,
            blocks,
            norm: Norm::new(d, cfg.norm_affine),
            head,
            config: cfg,
        })
    }

    pub fn mask(&self) -> MaskSpec {
        self.config.mask()
    }

    /// Visits every parameter tensor in a fixed order with its name and kind.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, ParamKind, &'a Tensor<T>)) {
        match &self.embed {
            Embedding::Patch { proj, cls, pos } => {
                visit_linear(proj, "embed.proj.", f);
                if let Some(c) = cls {
                    f("embed.cls".into(), ParamKind::ClsToken, c);
                }
                f("embed.pos".into(), ParamKind::PosEmbed, pos);
            }
            Embedding::Token { table } => f("embed.tokens".into(), ParamKind::TokenEmbed, table),
        }
        for (l, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{l}."), f);
        }
        visit_norm(&self.norm, "norm.", f);
        visit_linear(&self.head, "head.", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, ParamKind, &mut Tensor<T>)) {
        match &mut self.embed {
            Embedding::Patch { proj, cls, pos } => {
                visit_linear_mut(proj, "embed.proj.", f);
                if let Some(c) = cls {
                    f("embed.cls".into(), ParamKind::ClsToken, c);
                }
                f("embed.pos".into(), ParamKind::PosEmbed, pos);
            }
            Embedding::Token { table } => f("embed.tokens".into(), ParamKind::TokenEmbed, table),
        }
        for (l, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{l}."), f);
        }
        visit_norm_mut(&mut self.norm, "norm.", f);
        visit_linear_mut(&mut self.head, "head.", f);
    }

    /// `(name, kind, shape)` of every parameter in visiting order.
    pub fn param_specs(&self) -> Vec<(String, ParamKind, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit(&mut |n, k, t| out.push((n, k, t.shape().to_vec())));
        out
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, t| n += t.len());
        n
    }

    /// Learned log-bandwidths as an `[L, H]` tensor (GKA models only).
    pub fn bandwidths(&self) -> Option<crate::gka::BandwidthParams<T>> {
        let heads = self.config.heads;
        let mut data = Vec::with_capacity(self.blocks.len() * heads);
        for b in &self.blocks {
            match &b.attn {
                Attention::Gka(p) => data.extend_from_slice(p.log_sigma.data()),
                Attention::Mha(_) => return None,
            }
        }
        Tensor::new(&[self.blocks.len(), heads], data)
            .ok()
            .map(|log_sigma| crate::gka::BandwidthParams { log_sigma })
    }

    /// Splits `[B, C, H, W]` images into `[B, P*P, C*p*p]` patch rows. Patches
    /// are ordered row-major over the grid; each row is channel-major, then
    /// pixel row, then pixel column.
    pub fn patchify(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let cfg = &self.config;
        let s = images.shape();
        let expect = [
            s.first().copied().unwrap_or(0),
            cfg.channels,
            cfg.image_size,
            cfg.image_size,
        ];
        if s.len() != 4 || s[1..] != expect[1..] || s[0] == 0 {
            return Err(Error::Input(format!(
                "expected images [B, {}, {}, {}], got {s:?}",
                cfg.channels, cfg.image_size, cfg.image_size
            )));
        }
        let (b, c, size, p) = (s[0], cfg.channels, cfg.image_size, cfg.patch_size);
        let g = cfg.grid();
        let pd = cfg.patch_dim();
        let src = images.data();
        let mut out = Vec::with_capacity(b * g * g * pd);
        for bi in 0..b {
            for gy in 0..g {
                for gx in 0..g {
                    for ci in 0..c {
                        for dy in 0..p {
                            let row = ((bi * c + ci) * size + gy * p + dy) * size + gx * p;
                            out.extend_from_slice(&src[row..row + p]);
                        }
                    }
                }
            }
        }
        Tensor::new(&[b, g * g, pd], out)
    }

    fn embed_forward(&self, input: Input<'_, T>) -> Result<(Tensor<T>, Option<Tensor<T>>, Option<TokenBatch>)> {
        let d = self.config.width;
        match (&self.embed, input) {
            (Embedding::Patch { proj, cls, pos }, Input::Images(images)) => {
                let patches = self.patchify(images)?;
                let (b, np, _) = patches.dims3()?;
                let e = proj.forward(&patches)?;
                let offset = usize::from(cls.is_some());
                let n = np + offset;
                let mut x = Tensor::zeros(&[b, n, d]);
                for bi in 0..b {
                    for i in 0..n {
                        let dst = &mut x.data_mut()[(bi * n + i) * d..(bi * n + i + 1) * d];
                        let src = match (i, cls) {
                            (0, Some(c)) => c.data(),
                            _ => &e.data()[(bi * np + i - offset) * d..(bi * np + i - offset + 1) * d],
                        };
                        for ((o, &s), &p) in dst.iter_mut().zip(src).zip(pos.row(i)) {
                            *o = s + p;
                        }
                    }
                }
                Ok((x, Some(patches), None))
            }
            (Embedding::Token { table }, Input::Tokens(tokens)) => {
                let vocab = table.shape()[0];
                if tokens.len > self.config.seq_len {
                    return Err(Error::Input(format!(
                        "sequence length {} exceeds context {}",
                        tokens.len, self.config.seq_len
                    )));
                }
                let mut data = Vec::with_capacity(tokens.ids.len() * d);
                for &id in &tokens.ids {
                    let id = id as usize;
                    if id >= vocab {
                        return Err(Error::Input(format!("token id {id} >= vocab size {vocab}")));
                    }
                    data.extend_from_slice(table.row(id));
                }
                Ok((
                    Tensor::new(&[tokens.batch, tokens.len, d], data)?,
                    None,
                    Some(tokens.clone()),
                ))
            }
            _ => Err(Error::Input(format!(
                "input kind does not match a {} model",
                self.config.family.name()
            ))),
        }
    }

    /// Full forward pass with activations kept for [`Model::backward`].
    /// DropPath is active only when `rng` is given.
    pub fn forward_train(
        &self,
        input: Input<'_, T>,
        mut rng: Option<&mut dyn RngCore>,
        mut capture: Option<&mut AttentionCapture<T>>,
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let (mut x, patches, tokens) = self.embed_forward(input)?;
        let (b, n, d) = x.dims3()?;
        let mask = self.mask();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let (y, c) = block.forward_cached(&x, &mask, l, reborrow(&mut rng), capture.as_deref_mut())?;
            caches.push(c);
            x = y;
        }
        let pre_norm = match self.config.family {
            Family::Vit if self.config.use_cls => Tensor::new(
                &[b, d],
                (0..b)
                    .flat_map(|bi| x.data()[bi * n * d..bi * n * d + d].to_vec())
                    .collect(),
            )?,
            Family::Vit => {
                let inv = T::one() / T::of(n as f64);
                let mut pooled = Tensor::zeros(&[b, d]);
                for bi in 0..b {
                    for i in 0..n {
                        for (o, &v) in pooled
                            .row_mut(bi)
                            .iter_mut()
                            .zip(&x.data()[(bi * n + i) * d..(bi * n + i + 1) * d])
                        {
                            *o += v * inv;
                        }
                    }
                }
                pooled
            }
            Family::CausalLm => x,
        };
        let post_norm = self.norm.forward(&pre_norm)?;
        let logits = self.head.forward(&post_norm)?;
        if !logits.is_finite() {
            return Err(Error::NonFinite("model logits".into()));
        }
        Ok((
            logits,
            ForwardCache {
                patches,
                tokens,
                blocks: caches,
                pre_norm,
                post_norm,
                seq: n,
            },
        ))
    }

    /// Evaluation forward for image models: logits `[B, classes]`.
    pub fn vit_forward(&self, images: &Tensor<T>, capture: Option<&mut AttentionCapture<T>>) -> Result<Tensor<T>> {
        if self.config.family != Family::Vit {
            return Err(Error::Input("vit_forward needs a vit model".into()));
        }
        self.forward_train(Input::Images(images), None, capture).map(|(y, _)| y)
    }

    /// Evaluation forward for language models: logits `[B, N, vocab]`.
    pub fn lm_forward(&self, tokens: &TokenBatch, capture: Option<&mut AttentionCapture<T>>) -> Result<Tensor<T>> {
        if self.config.family != Family::CausalLm {
            return Err(Error::Input("lm_forward needs a causal_lm model".into()));
        }
        self.forward_train(Input::Tokens(tokens), None, capture).map(|(y, _)| y)
    }

    /// Gradients of every parameter given the gradient of the logits.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_logits: &Tensor<T>) -> Result<Gradients<T>> {
        let mut grads = Gradients::default();
        let d = self.config.width;
        let (gpost, ghead) = self.head.backward(&cache.post_norm, grad_logits)?;
        grads.extend("head.", linear_grads(ghead));
        let (gpre, gnorm) = self.norm.backward(&cache.pre_norm, &gpost)?;
        grads.extend("norm.", norm_grads(gnorm));

        let n = cache.seq;
        let mut gx = match self.config.family {
            Family::CausalLm => gpre,
            Family::Vit => {
                let b = gpre.shape()[0];
                let mut g = Tensor::zeros(&[b, n, d]);
                for bi in 0..b {
                    let src = gpre.row(bi);
                    if self.config.use_cls {
                        g.data_mut()[bi * n * d..bi * n * d + d].copy_from_slice(src);
                    } else {
                        let inv = T::one() / T::of(n as f64);
                        for i in 0..n {
                            for (o, &v) in g.data_mut()[(bi * n + i) * d..(bi * n + i + 1) * d].iter_mut().zip(src) {
                                *o = v * inv;
                            }
                        }
                    }
                }
                g
            }
        };

        let mask = self.mask();
        for (l, block) in self.blocks.iter().enumerate().rev() {
            let (g, items) = block.backward(&cache.blocks[l], &mask, l, &gx)?;
            for (k, t) in items {
                grads.insert(format!("blocks.{l}.{k}"), t);
            }
            gx = g;
        }

        match &self.embed {
            Embedding::Patch { proj, cls, pos } => {
                let patches = cache
                    .patches
                    .as_ref()
                    .ok_or_else(|| Error::Input("cache has no patches".into()))?;
                let (b, np, _) = patches.dims3()?;
                let offset = usize::from(cls.is_some());
                let mut gpos = Tensor::zeros(pos.shape());
                let mut gcls = Tensor::zeros(&[d]);
                let mut gpatch = Tensor::zeros(&[b, np, d]);
                for bi in 0..b {
                    for i in 0..n {
                        let src = &gx.data()[(bi * n + i) * d..(bi * n + i + 1) * d];
                        for (o, &v) in gpos.row_mut(i).iter_mut().zip(src) {
                            *o += v;
                        }
                        if i < offset {
                            for (o, &v) in gcls.data_mut().iter_mut().zip(src) {
                                *o += v;
                            }
                        } else {
                            gpatch.data_mut()[(bi * np + i - offset) * d..(bi * np + i - offset + 1) * d]
                                .copy_from_slice(src);
                        }
                    }
                }
                let (_, gproj) = proj.backward(patches, &gpatch)?;
                grads.extend("embed.proj.", linear_grads(gproj));
                if cls.is_some() {
                    grads.insert("embed.cls".into(), gcls);
                }
                grads.insert("embed.pos".into(), gpos);
            }
            Embedding::Token { table } => {
                let tokens = cache
                    .tokens
                    .as_ref()
                    .ok_or_else(|| Error::Input("cache has no tokens".into()))?;
                let mut gt = Tensor::zeros(table.shape());
                for (i, &id) in tokens.ids.iter().enumerate() {
                    for (o, &v) in gt.row_mut(id as usize).iter_mut().zip(&gx.data()[i * d..(i + 1) * d]) {
                        *o += v;
                    }
                }
                grads.insert("embed.tokens".into(), gt);
            }
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::PRESET_NAMES;
    use crate::model::cost::count_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(name: &str) -> ModelConfig {
        let mut cfg = ModelConfig::preset(name).unwrap();
        cfg.depth = 2;
        if cfg.family == Family::Vit {
            cfg.width = 4 * cfg.heads;
            cfg.image_size = 32;
            cfg.patch_size = 16;
            cfg.num_classes = 3;
        } else {
            cfg.width = 4 * cfg.heads;
            cfg.vocab_size = 11;
            cfg.seq_len = 6;
            cfg.window = 3;
        }
        cfg
    }

    #[test]
    fn instantiated_params_match_counter() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for name in PRESET_NAMES {
            let cfg = tiny(name);
            let m = Model::<f64>::init(&cfg, &mut rng).unwrap();
            assert_eq!(m.num_params() as u64, count_params(&cfg).total_params, "{name}");
        }
    }

    #[test]
    fn vit_token_count_and_logit_shape() {
        let cfg = ModelConfig::preset("gka-ti").unwrap();
        assert_eq!(cfg.tokens(), 197);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = tiny("gka-ti");
        let m = Model::<f64>::init(&cfg, &mut rng).unwrap();
        let img = Tensor::randn(&[2, 3, 32, 32], 1.0, &mut rng);
        let mut cap = AttentionCapture::new();
        let y = m.vit_forward(&img, Some(&mut cap)).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert_eq!(cap.num_layers(), 2);
        assert_eq!(cap.dims(), Some((2, 3, 5)));
    }

    #[test]
    fn patchify_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cfg = tiny("deit-ti");
        cfg.channels = 2;
        cfg.image_size = 4;
        cfg.patch_size = 2;
        let m = Model::<f64>::init(&cfg, &mut rng).unwrap();
        let img = Tensor::from_fn(&[1, 2, 4, 4], |i| i as f64);
        let p = m.patchify(&img).unwrap();
        assert_eq!(p.shape(), &[1, 4, 8]);
        // Patch (0, 1): columns 2..4 of rows 0..2 in each channel.
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0, 18.0, 19.0, 22.0, 23.0]);
    }

    #[test]
    fn pure_residual_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = tiny("gka-ti");
        let mut m = Model::<f64>::init(&cfg, &mut rng).unwrap();
        let block = &mut m.blocks[0];
        if let Attention::Gka(p) = &mut block.attn {
            p.w_o = Tensor::zeros(p.w_o.shape());
        }
        block.mlp.fc2.w = Tensor::zeros(block.mlp.fc2.w.shape());
        let x = Tensor::randn(&[2, 5, 12], 1.0, &mut rng);
        let y = block.forward(&x, &MaskSpec::none(), 0, None).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn drop_path_eval_is_identity_and_train_drops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cfg = tiny("gka-ti");
        cfg.drop_path_rate = 0.5;
        let m = Model::<f64>::init(&cfg, &mut rng).unwrap();
        let x = Tensor::randn(&[8, 5, 12], 1.0, &mut rng);
        let mut no_drop = m.blocks[0].clone();
        no_drop.drop_path = 0.0;
        let eval = m.blocks[0].forward(&x, &MaskSpec::none(), 0, None).unwrap();
        assert_eq!(eval, no_drop.forward(&x, &MaskSpec::none(), 0, None).unwrap());
        let mut drng = ChaCha8Rng::seed_from_u64(9);
        let (train, cache) = m.blocks[0]
            .forward_cached(&x, &MaskSpec::none(), 0, Some(&mut drng), None)
            .unwrap();
        let keep = cache.keep_attn.unwrap();
        assert!(keep.contains(&0.0) && keep.contains(&2.0));
        assert_ne!(train, eval);
    }

    #[test]
    fn lm_rejects_bad_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Model::<f64>::init(&tiny("gka-copy"), &mut rng).unwrap();
        let bad = TokenBatch::new(1, 2, vec![1, 11]).unwrap();
        assert!(matches!(m.lm_forward(&bad, None), Err(Error::Input(_))));
        let long = TokenBatch::new(1, 7, vec![0; 7]).unwrap();
        assert!(m.lm_forward(&long, None).is_err());
    }

    #[test]
    fn decay_exempt_registry() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for name in ["gka-ti", "deit-ti", "gka-copy"] {
            let m = Model::<f64>::init(&tiny(name), &mut rng).unwrap();
            for (n, kind, _) in m.param_specs() {
                let expect = n.ends_with(".b")
                    || n.ends_with("gamma")
                    || n.ends_with("beta")
                    || n == "embed.pos"
                    || n == "embed.cls"
                    || n.ends_with("log_sigma");
                assert_eq!(kind.decay_exempt(), expect, "{name}: {n}");
            }
        }
    }
}
