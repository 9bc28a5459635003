//! Versioned flat binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       8     magic "GKACKPT\0"
//! 8       4     format version (u32, currently 1)
//! 12      1     element width in bytes: 4 (f32) or 8 (f64)
//! 13      3     reserved, zero
//! 16      8     index length in bytes (u64)
//! 24      ..    UTF-8 text index
//! ..      ..    tensor payload, elements little-endian, tensors back to back
//! ```
//!
//! The index starts with the model configuration as `key = value` lines
//! between `[config]` and `[tensors]` headers, followed by one line per
//! tensor: `name kind shape offset count`, where `shape` is `x`-separated,
//! `offset` counts elements from the start of the payload, and `count` is
//! the element count.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamKind};
use crate::tensor::{Precision, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"GKACKPT\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

/// Extension used by the CLI for checkpoint files.
pub const EXTENSION: &str = "gkackpt";

fn kind_name(k: ParamKind) -> &'static str {
    match k {
        ParamKind::Weight => "weight",
        ParamKind::Bias => "bias",
        ParamKind::Norm => "norm",
        ParamKind::PosEmbed => "pos_embed",
        ParamKind::ClsToken => "cls_token",
        ParamKind::LogSigma => "log_sigma",
        ParamKind::TokenEmbed => "token_embed",
    }
}

fn parse_kind(s: &str) -> Result<ParamKind> {
    Ok(match s {
        "weight" => ParamKind::Weight,
        "bias" => ParamKind::Bias,
        "norm" => ParamKind::Norm,
        "pos_embed" => ParamKind::PosEmbed,
        "cls_token" => ParamKind::ClsToken,
        "log_sigma" => ParamKind::LogSigma,
        "token_embed" => ParamKind::TokenEmbed,
        other => return Err(Error::Checkpoint(format!("unknown parameter kind '{other}'"))),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub count: usize,
}

/// A checkpoint read into memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub precision: Precision,
    pub entries: Vec<IndexEntry>,
    /// Payload widened to `f64`.
    values: Vec<f64>,
}

/// Serializes a model into checkpoint bytes at its own precision.
pub fn to_bytes<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let mut index = String::from("[config]\n");
    index.push_str(&model.config.to_kv());
    if !index.ends_with('\n') {
        index.push('\n');
    }
    index.push_str("[tensors]\n");
    let mut payload = Vec::new();
    let mut offset = 0;
    model.visit(&mut |name, kind, t| {
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(
            index,
            "{name} {} {} {offset} {}",
            kind_name(kind),
            shape.join("x"),
            t.len()
        );
        offset += t.len();
        for v in t.data() {
            match T::PRECISION {
                Precision::Single => payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                Precision::Double => payload.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
    });
    let mut out = Vec::with_capacity(HEADER_LEN + index.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(width(T::PRECISION) as u8);
    out.extend_from_slice(&[0, 0, 0]);
    out.extend_from_slice(&(index.len() as u64).to_le_bytes());
    out.extend_from_slice(index.as_bytes());
    out.extend_from_slice(&payload);
    out
}

fn width(p: Precision) -> usize {
    match p {
        Precision::Single => 4,
        Precision::Double => 8,
    }
}

pub fn save<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read '{}': {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes)
}

impl Checkpoint {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let precision = match bytes[12] {
            4 => Precision::Single,
            8 => Precision::Double,
            w => return Err(Error::Checkpoint(format!("unsupported element width {w}"))),
        };
        let index_len = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
        let index_end = HEADER_LEN
            .checked_add(index_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated index"))?;
        let index = std::str::from_utf8(&bytes[HEADER_LEN..index_end]).map_err(|_| bad("index is not UTF-8"))?;
        let (config_text, tensor_text) = index
            .strip_prefix("[config]\n")
            .and_then(|rest| rest.split_once("[tensors]\n"))
            .ok_or_else(|| bad("index lacks [config] / [tensors] sections"))?;
        let config = ModelConfig::from_kv(config_text)?;

        let mut entries = Vec::new();
        for line in tensor_text.lines().filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split_whitespace().collect();
            let malformed = || Error::Checkpoint(format!("malformed index line '{line}'"));
            if f.len() != 5 {
                return Err(malformed());
            }
            let shape = f[2]
                .split('x')
                .map(|d| d.parse::<usize>().map_err(|_| malformed()))
                .collect::<Result<Vec<_>>>()?;
            let offset: usize = f[3].parse().map_err(|_| malformed())?;
            let count: usize = f[4].parse().map_err(|_| malformed())?;
            if shape.iter().product::<usize>() != count {
                return Err(malformed());
            }
            entries.push(IndexEntry {
                name: f[0].to_string(),
                kind: parse_kind(f[1])?,
                shape,
                offset,
                count,
            });
        }
        let w = width(precision);
        let payload = &bytes[index_end..];
        if !payload.len().is_multiple_of(w) {
            return Err(bad("payload length is not a whole number of elements"));
        }
        let values: Vec<f64> = match precision {
            Precision::Single => payload
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect(),
            Precision::Double => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        for e in &entries {
            if e.offset + e.count > values.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}' extends past the payload",
                    e.name
                )));
            }
        }
        Ok(Self {
            config,
            precision,
            entries,
            values,
        })
    }

    /// One tensor by name, converted to `T`.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no tensor '{name}'")))?;
        Tensor::from_f64(&e.shape, &self.values[e.offset..e.offset + e.count])
    }

    /// Rebuilds the model, requiring every parameter to be present with
    /// the expected shape.
    pub fn into_model<T: Scalar>(&self) -> Result<Model<T>> {
        let mut model = Model::<T>::init(&self.config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut result = Ok(());
        model.visit_mut(&mut |name, _, t| {
            if result.is_err() {
                return;
            }
            result = self.tensor::<T>(&name).and_then(|src| {
                if src.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor '{name}' has shape {:?}, model expects {:?}",
                        src.shape(),
                        t.shape()
                    )));
                }
                *t = src;
                Ok(())
            });
        });
        result?;
        if self.entries.len() != model.param_specs().len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                self.entries.len(),
                model.param_specs().len()
            )));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model<T: Scalar>() -> Model<T> {
        let mut cfg = ModelConfig::preset("gka-copy").unwrap();
        cfg.width = 8;
        cfg.heads = 2;
        let mut m = Model::<T>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        m.visit_mut(&mut |_, _, t| {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v += T::of(i as f64 * 1e-3);
            }
        });
        m
    }

    #[test]
    fn round_trip_both_precisions() {
        let m64 = model::<f64>();
        assert_eq!(
            Checkpoint::from_bytes(&to_bytes(&m64))
                .unwrap()
                .into_model::<f64>()
                .unwrap(),
            m64
        );
        let m32 = model::<f32>();
        let ck = Checkpoint::from_bytes(&to_bytes(&m32)).unwrap();
        assert_eq!(ck.precision, Precision::Single);
        assert_eq!(ck.into_model::<f32>().unwrap(), m32);
    }

    #[test]
    fn load_by_name() {
        let m = model::<f64>();
        let ck = Checkpoint::from_bytes(&to_bytes(&m)).unwrap();
        let ls = ck.tensor::<f64>("blocks.1.attn.log_sigma").unwrap();
        assert_eq!(ls.shape(), &[2]);
        assert!(ck.tensor::<f64>("nope").is_err());
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = to_bytes(&model::<f64>());
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(m)) if m.contains("version")));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    }

    #[test]
    fn missing_file_is_clear_error() {
        let err = load(Path::new("/definitely/not/here.gkackpt")).unwrap_err();
        assert!(err.to_string().contains("/definitely/not/here.gkackpt"));
    }
}
