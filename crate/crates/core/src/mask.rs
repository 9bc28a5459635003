//! Declarative attention masks and per-layer pattern resolution.

use std::fmt;
use std::ops::Range;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    None,
    Causal,
    CausalWindow,
}

/// Mask description shared by every layer of a model.
///
/// With a `layer_pattern` the mask is resolved per layer: character
/// `pattern[layer % len]` selects `'L'` (full causal) or `'S'` (causal
/// sliding window of `window` keys). Without a pattern every layer uses
/// `kind` directly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    pub kind: MaskKind,
    pub window: usize,
    pub layer_pattern: Option<String>,
}

/// The concrete mask one layer applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerMask {
    Full,
    Causal,
    /// Keys `j` with `i - w < j <= i`.
    Window(usize),
}

impl MaskSpec {
    pub fn none() -> Self {
        Self {
            kind: MaskKind::None,
            window: 1,
            layer_pattern: None,
        }
    }

    pub fn causal() -> Self {
        Self {
            kind: MaskKind::Causal,
            window: 1,
            layer_pattern: None,
        }
    }

    pub fn causal_window(window: usize) -> Result<Self> {
        let spec = Self {
            kind: MaskKind::CausalWindow,
            window,
            layer_pattern: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Causal masking with an `S`/`L` schedule, e.g. `"SSSL"`.
    pub fn patterned(pattern: &str, window: usize) -> Result<Self> {
        let spec = Self {
            kind: MaskKind::Causal,
            window,
            layer_pattern: Some(pattern.to_string()),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Param("mask window must be >= 1".into()));
        }
        if let Some(p) = &self.layer_pattern {
            if p.is_empty() || !p.chars().all(|c| c == 'S' || c == 'L') {
                return Err(Error::Param(format!(
                    "layer pattern must be a non-empty string over {{S, L}}, got '{p}'"
                )));
            }
            if self.kind == MaskKind::None {
                return Err(Error::Param("a layer pattern requires a causal mask kind".into()));
            }
        }
        Ok(())
    }

    pub fn for_layer(&self, layer: usize) -> LayerMask {
        if let Some(p) = &self.layer_pattern {
            let bytes = p.as_bytes();
            return match bytes[layer % bytes.len()] {
                b'S' => LayerMask::Window(self.window),
                _ => LayerMask::Causal,
            };
        }
        match self.kind {
            MaskKind::None => LayerMask::Full,
            MaskKind::Causal => LayerMask::Causal,
            MaskKind::CausalWindow => LayerMask::Window(self.window),
        }
    }
}

impl LayerMask {
    #[inline]
    pub fn allowed(self, i: usize, j: usize) -> bool {
        match self {
            LayerMask::Full => true,
            LayerMask::Causal => j <= i,
            LayerMask::Window(w) => j <= i && j + w > i,
        }
    }

    /// Contiguous key range allowed for query `i` among `n` tokens.
    #[inline]
    pub fn key_range(self, i: usize, n: usize) -> Range<usize> {
        match self {
            LayerMask::Full => 0..n,
            LayerMask::Causal => 0..i + 1,
            LayerMask::Window(w) => (i + 1).saturating_sub(w)..i + 1,
        }
    }

    pub fn is_causal(self) -> bool {
        !matches!(self, LayerMask::Full)
    }
}

impl fmt::Display for LayerMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerMask::Full => write!(f, "full"),
            LayerMask::Causal => write!(f, "causal"),
            LayerMask::Window(w) => write!(f, "window({w})"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_is_always_allowed() {
        for m in [
            LayerMask::Full,
            LayerMask::Causal,
            LayerMask::Window(1),
            LayerMask::Window(5),
        ] {
            for i in 0..20 {
                assert!(m.allowed(i, i));
            }
        }
    }

    #[test]
    fn window_bounds() {
        let m = LayerMask::Window(3);
        let allowed: Vec<usize> = (0..10).filter(|&j| m.allowed(6, j)).collect();
        assert_eq!(allowed, vec![4, 5, 6]);
        assert_eq!(m.key_range(6, 10), 4..7);
        assert_eq!(m.key_range(1, 10), 0..2);
    }

    #[test]
    fn key_range_agrees_with_allowed() {
        for m in [
            LayerMask::Full,
            LayerMask::Causal,
            LayerMask::Window(1),
            LayerMask::Window(4),
        ] {
            for i in 0..12 {
                let r = m.key_range(i, 12);
                for j in 0..12 {
                    assert_eq!(r.contains(&j), m.allowed(i, j), "{m} i={i} j={j}");
                }
            }
        }
    }

    #[test]
    fn sssl_pattern_cycles() {
        let spec = MaskSpec::patterned("SSSL", 4).unwrap();
        let kinds: Vec<LayerMask> = (0..8).map(|l| spec.for_layer(l)).collect();
        assert_eq!(kinds[3], LayerMask::Causal);
        assert_eq!(kinds[7], LayerMask::Causal);
        assert_eq!(kinds[0], LayerMask::Window(4));
        assert_eq!(kinds[6], LayerMask::Window(4));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(MaskSpec::causal_window(0).is_err());
        assert!(MaskSpec::patterned("SXL", 2).is_err());
        assert!(MaskSpec::patterned("", 2).is_err());
    }
}
