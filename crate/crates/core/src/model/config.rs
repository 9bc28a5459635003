//! Model configuration, named presets and the `key = value` config format.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mask::MaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Vit,
    CausalLm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Gka,
    Standard,
    /// Standard attention without the value projection.
    ValueLess,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Vit => "vit",
            Family::CausalLm => "causal_lm",
        }
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vit" => Ok(Family::Vit),
            "causal_lm" | "lm" => Ok(Family::CausalLm),
            _ => Err(Error::Config(format!("unknown family '{s}'"))),
        }
    }
}

impl AttentionKind {
    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Gka => "gka",
            AttentionKind::Standard => "standard",
            AttentionKind::ValueLess => "vlt",
        }
    }
}

impl FromStr for AttentionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gka" => Ok(AttentionKind::Gka),
            "standard" | "mha" => Ok(AttentionKind::Standard),
            "vlt" => Ok(AttentionKind::ValueLess),
            _ => Err(Error::Config(format!("unknown attention kind '{s}'"))),
        }
    }
}

/// Architecture description from which counters and models are built.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    pub family: Family,
    pub depth: usize,
    pub heads: usize,
    pub width: usize,
    pub mlp_ratio: usize,
    pub attention: AttentionKind,

    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub use_cls: bool,

    pub vocab_size: usize,
    pub seq_len: usize,
    /// `S`/`L` schedule for causal models; `None` means full causal everywhere.
    pub layer_pattern: Option<String>,
    pub window: usize,

    /// Biases on attention projections.
    pub attn_bias: bool,
    /// Biases on MLP layers.
    pub mlp_bias: bool,
    /// Biases on the patch embedding and the output head.
    pub embed_bias: bool,
    /// Learnable gamma/beta on layer norms.
    pub norm_affine: bool,
    pub drop_path_rate: f64,

    pub rope_base: f64,
    /// RoPE + per-head unit normalization of kernel features (causal models).
    pub qk_norm: bool,
    pub init_log_sigma: f64,
    pub init_std: f64,
}

/// Names accepted by [`ModelConfig::preset`].
pub const PRESET_NAMES: &[&str] = &[
    "deit-ti",
    "deit-s",
    "deit-b",
    "gka-ti",
    "gka-s",
    "gka-b",
    "vlt-ti",
    "vlt-s",
    "vlt-b",
    "gka-lm-d20",
    "std-lm-d20",
    "gka-copy",
    "gka-vit-toy",
];

impl ModelConfig {
    fn vit(name: &str, attention: AttentionKind, depth: usize, heads: usize, width: usize) -> Self {
        Self {
            name: name.to_string(),
            family: Family::Vit,
            depth,
            heads,
            width,
            mlp_ratio: 4,
            attention,
            image_size: 224,
            patch_size: 16,
            channels: 3,
            num_classes: 1000,
            use_cls: true,
            vocab_size: 0,
            seq_len: 0,
            layer_pattern: None,
            window: 1,
            attn_bias: true,
            mlp_bias: true,
            embed_bias: true,
            norm_affine: true,
            drop_path_rate: 0.0,
            rope_base: 10000.0,
            qk_norm: false,
            init_log_sigma: 0.0,
            init_std: 0.02,
        }
    }

    fn lm(name: &str, attention: AttentionKind) -> Self {
        Self {
            name: name.to_string(),
            family: Family::CausalLm,
            depth: 20,
            heads: 10,
            width: 1280,
            mlp_ratio: 4,
            attention,
            image_size: 0,
            patch_size: 0,
            channels: 0,
            num_classes: 0,
            use_cls: false,
            vocab_size: 32768,
            seq_len: 2048,
            layer_pattern: Some("SSSL".into()),
            window: 1024,
            attn_bias: false,
            mlp_bias: false,
            embed_bias: false,
            norm_affine: false,
            drop_path_rate: 0.0,
            rope_base: 10000.0,
            qk_norm: true,
            init_log_sigma: 0.0,
            init_std: 0.02,
        }
    }

    /// Looks up a named configuration.
    pub fn preset(name: &str) -> Result<Self> {
        use AttentionKind::*;
        let scale = |s: &str| match s {
            "ti" => Some((12, 3, 192)),
            "s" => Some((12, 6, 384)),
            "b" => Some((12, 12, 768)),
            _ => None,
        };
        let cfg = match name {
            "gka-lm-d20" => Self::lm(name, Gka),
            "std-lm-d20" => Self::lm(name, Standard),
            "gka-copy" => Self {
                depth: 2,
                heads: 4,
                width: 64,
                vocab_size: 16,
                seq_len: 16,
                layer_pattern: None,
                window: 1,
                attn_bias: true,
                mlp_bias: true,
                embed_bias: true,
                norm_affine: true,
                // (4/π)^8: the second rotary frequency of a 16-wide head
                // then turns a full circle every 8 positions, the copy offset.
                rope_base: 6.9,
                ..Self::lm(name, Gka)
            },
            "gka-vit-toy" => Self {
                image_size: 32,
                patch_size: 8,
                num_classes: 2,
                ..Self::vit(name, Gka, 2, 2, 32)
            },
            _ => {
                let (kind, size) = name.split_once('-').ok_or_else(|| unknown_preset(name))?;
                let attention = match kind {
                    "deit" => Standard,
                    "gka" => Gka,
                    "vlt" => ValueLess,
                    _ => return Err(unknown_preset(name)),
                };
                let (depth, heads, width) = scale(size).ok_or_else(|| unknown_preset(name))?;
                Self::vit(name, attention, depth, heads, width)
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.width * self.mlp_ratio
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Tokens seen by the attention layers (patches + CLS, or the context).
    pub fn tokens(&self) -> usize {
        match self.family {
            Family::Vit => self.grid() * self.grid() + usize::from(self.use_cls),
            Family::CausalLm => self.seq_len,
        }
    }

    /// Transform applied to kernel features in every kernel-attention layer.
    pub fn feature_prep(&self) -> crate::gka::FeaturePrep {
        if self.family == Family::CausalLm && self.qk_norm {
            crate::gka::FeaturePrep::causal(self.rope_base)
        } else {
            crate::gka::FeaturePrep::NONE
        }
    }

    pub fn mask(&self) -> MaskSpec {
        match self.family {
            Family::Vit => MaskSpec::none(),
            Family::CausalLm => match &self.layer_pattern {
                Some(p) => MaskSpec {
                    kind: crate::mask::MaskKind::Causal,
                    window: self.window,
                    layer_pattern: Some(p.clone()),
                },
                None => MaskSpec::causal(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.heads == 0 || self.width == 0 || self.mlp_ratio == 0 {
            return bad("depth, heads, width and mlp_ratio must be >= 1".into());
        }
        if !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} is not divisible by heads {}", self.width, self.heads));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return bad("drop_path_rate must be in [0, 1)".into());
        }
        match self.family {
            Family::Vit => {
                if self.patch_size == 0 || self.image_size == 0 || self.channels == 0 {
                    return bad("image_size, patch_size and channels must be >= 1".into());
                }
                if !self.image_size.is_multiple_of(self.patch_size) {
                    return bad(format!(
                        "image_size {} is not divisible by patch_size {}",
                        self.image_size, self.patch_size
                    ));
                }
                if self.num_classes == 0 {
                    return bad("num_classes must be >= 1".into());
                }
            }
            Family::CausalLm => {
                if self.vocab_size == 0 || self.seq_len == 0 {
                    return bad("vocab_size and seq_len must be >= 1".into());
                }
                self.mask().validate().map_err(|e| Error::Config(e.to_string()))?;
                if self.qk_norm && !self.head_dim().is_multiple_of(2) {
                    return bad("qk_norm applies RoPE and needs an even head dimension".into());
                }
            }
        }
        Ok(())
    }

    /// Serializes every field as `key = value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("family", self.family.name().into());
        put("name", self.name.clone());
        put("depth", self.depth.to_string());
        put("heads", self.heads.to_string());
        put("width", self.width.to_string());
        put("mlp_ratio", self.mlp_ratio.to_string());
        put("attention", self.attention.name().into());
        put("image_size", self.image_size.to_string());
        put("patch_size", self.patch_size.to_string());
        put("channels", self.channels.to_string());
        put("num_classes", self.num_classes.to_string());
        put("use_cls", self.use_cls.to_string());
        put("vocab_size", self.vocab_size.to_string());
        put("seq_len", self.seq_len.to_string());
        put(
            "layer_pattern",
            self.layer_pattern.clone().unwrap_or_else(|| "none".into()),
        );
        put("window", self.window.to_string());
        put("attn_bias", self.attn_bias.to_string());
        put("mlp_bias", self.mlp_bias.to_string());
        put("embed_bias", self.embed_bias.to_string());
        put("norm_affine", self.norm_affine.to_string());
        put("drop_path_rate", format!("{:?}", self.drop_path_rate));
        put("rope_base", format!("{:?}", self.rope_base));
        put("qk_norm", self.qk_norm.to_string());
        put("init_log_sigma", format!("{:?}", self.init_log_sigma));
        put("init_std", format!("{:?}", self.init_std));
        s
    }

    /// Parses the `key = value` format. A `preset` key, if present, must come
    /// first and supplies defaults for every other field; without it
    /// `family` is required and defaults come from the matching Ti / d20
    /// shape.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg: Option<Self> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let ctx = |e: Error| Error::Config(format!("line {}: {e}", lineno + 1));
            match (key, cfg.as_mut()) {
                ("preset", None) => cfg = Some(Self::preset(value).map_err(ctx)?),
                ("family", None) => {
                    cfg = Some(match value.parse::<Family>().map_err(ctx)? {
                        Family::Vit => Self::vit("custom", AttentionKind::Gka, 12, 3, 192),
                        Family::CausalLm => Self::lm("custom", AttentionKind::Gka),
                    })
                }
                (_, None) => {
                    return Err(Error::Config(format!(
                        "line {}: config must start with 'preset' or 'family'",
                        lineno + 1
                    )))
                }
                (_, Some(c)) => c.set(key, value).map_err(ctx)?,
            }
        }
        let cfg = cfg.ok_or_else(|| Error::Config("empty config".into()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: FromStr>(key: &str, v: &str) -> Result<V> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
        }
        match key {
            "name" => self.name = value.to_string(),
            "family" => self.family = value.parse()?,
            "depth" => self.depth = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "mlp_ratio" => self.mlp_ratio = num(key, value)?,
            "attention" => self.attention = value.parse()?,
            "image_size" => self.image_size = num(key, value)?,
            "patch_size" => self.patch_size = num(key, value)?,
            "channels" => self.channels = num(key, value)?,
            "num_classes" => self.num_classes = num(key, value)?,
            "use_cls" => self.use_cls = num(key, value)?,
            "vocab_size" => self.vocab_size = num(key, value)?,
            "seq_len" => self.seq_len = num(key, value)?,
            "layer_pattern" => {
                self.layer_pattern = match value {
                    "none" | "" => None,
                    p => Some(p.to_string()),
                }
            }
            "window" => self.window = num(key, value)?,
            "attn_bias" => self.attn_bias = num(key, value)?,
            "mlp_bias" => self.mlp_bias = num(key, value)?,
            "embed_bias" => self.embed_bias = num(key, value)?,
            "norm_affine" => self.norm_affine = num(key, value)?,
            "drop_path_rate" => self.drop_path_rate = num(key, value)?,
            "rope_base" => self.rope_base = num(key, value)?,
            "qk_norm" => self.qk_norm = num(key, value)?,
            "init_log_sigma" => self.init_log_sigma = num(key, value)?,
            "init_std" => self.init_std = num(key, value)?,
            "preset" => {
                return Err(Error::Config("'preset' must be the first key".into()));
            }
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }
}

fn unknown_preset(name: &str) -> Error {
    Error::Config(format!(
        "unknown preset '{name}'; valid presets: {}",
        PRESET_NAMES.join(", ")
    ))
}
