//! Synthetic tasks small enough to train on a desk.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::TokenBatch;
use crate::tensor::{Scalar, Tensor};

/// Tokens scattered around `clusters` centroids; each token's target is the
/// empirical mean of its cluster within the same sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    pub batch: usize,
    pub tokens: usize,
    pub dim: usize,
    pub clusters: usize,
    /// Distance of each centroid from the origin along its own axis.
    pub separation: f64,
    /// Standard deviation of tokens around their centroid.
    pub spread: f64,
    pub seed: u64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            batch: 4,
            tokens: 32,
            dim: 8,
            clusters: 4,
            separation: 4.0,
            spread: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClusterData<T> {
    /// `[B, N, D]`.
    pub tokens: Tensor<T>,
    /// `[B, N, D]`.
    pub targets: Tensor<T>,
    /// Cluster index of every token, `[B·N]`.
    pub labels: Vec<usize>,
}

/// Centroids are `±separation` along distinct coordinate axes, so any two
/// are at least `separation·√2` apart.
pub fn gen_cluster_regression<T: Scalar>(spec: &ClusterSpec) -> Result<ClusterData<T>> {
    if spec.clusters == 0 || spec.clusters > 2 * spec.dim {
        return Err(Error::Input(format!(
            "clusters must be in 1..={} for dim {}",
            2 * spec.dim,
            spec.dim
        )));
    }
    if spec.batch == 0 || spec.tokens == 0 {
        return Err(Error::Input("batch and tokens must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (b, n, d) = (spec.batch, spec.tokens, spec.dim);
    let centroid = |c: usize, k: usize| {
        if k == c % d {
            if c < d {
                spec.separation
            } else {
                -spec.separation
            }
        } else {
            0.0
        }
    };
    let mut tokens = vec![0.0; b * n * d];
    let mut targets = vec![0.0; b * n * d];
    let mut labels = Vec::with_capacity(b * n);
    for bi in 0..b {
        let lab: Vec<usize> = (0..n).map(|_| rng.gen_range(0..spec.clusters)).collect();
        for (i, &c) in lab.iter().enumerate() {
            for k in 0..d {
                let noise: f64 = rng.sample(StandardNormal);
                tokens[(bi * n + i) * d + k] = centroid(c, k) + spec.spread * noise;
            }
        }
        for c in 0..spec.clusters {
            let members: Vec<usize> = (0..n).filter(|&i| lab[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            let mut mean = vec![0.0; d];
            for &i in &members {
                for (m, &v) in mean.iter_mut().zip(&tokens[(bi * n + i) * d..(bi * n + i + 1) * d]) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m /= members.len() as f64;
            }
            for &i in &members {
                targets[(bi * n + i) * d..(bi * n + i + 1) * d].copy_from_slice(&mean);
            }
        }
        labels.extend(lab);
    }
    Ok(ClusterData {
        tokens: Tensor::from_f64(&[b, n, d], &tokens)?,
        targets: Tensor::from_f64(&[b, n, d], &targets)?,
        labels,
    })
}

/// `[prefix, DELIM, prefix]` sequences over `vocab` symbols, where the last
/// symbol is the delimiter and never appears in the prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CopySpec {
    pub vocab: usize,
    pub prefix: usize,
    pub batch: usize,
}

impl Default for CopySpec {
    fn default() -> Self {
        Self {
            vocab: 16,
            prefix: 8,
            batch: 32,
        }
    }
}

/// One batch of the copy task, ready for next-token prediction.
#[derive(Debug, Clone)]
pub struct CopyBatch {
    /// Inputs, length `2·prefix`.
    pub inputs: TokenBatch,
    /// Next-token targets for each input position; `None` outside the copy.
    pub targets: Vec<Option<u32>>,
}

impl CopySpec {
    pub fn delimiter(&self) -> u32 {
        (self.vocab - 1) as u32
    }

    pub fn context(&self) -> usize {
        2 * self.prefix
    }

    fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.prefix == 0 || self.batch == 0 {
            return Err(Error::Input(
                "copy task needs vocab >= 2, prefix >= 1, batch >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Full sequences `[prefix, DELIM, prefix]`, `batch` of them.
pub fn gen_copy_sequences(spec: &CopySpec, seed: u64) -> Result<Vec<Vec<u32>>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let symbols = (spec.vocab - 1) as u32;
    Ok((0..spec.batch)
        .map(|_| {
            let prefix: Vec<u32> = (0..spec.prefix).map(|_| rng.gen_range(0..symbols)).collect();
            let mut seq = prefix.clone();
            seq.push(spec.delimiter());
            seq.extend(prefix);
            seq
        })
        .collect())
}

/// Input/target batch for the copy task. The inputs drop the final symbol;
/// targets are set at the delimiter and every copied position after it, so
/// each target is fully determined by the prefix.
pub fn gen_copy_lm(spec: &CopySpec, seed: u64) -> Result<CopyBatch> {
    let seqs = gen_copy_sequences(spec, seed)?;
    let len = spec.context();
    let mut ids = Vec::with_capacity(spec.batch * len);
    let mut targets = Vec::with_capacity(spec.batch * len);
    for s in &seqs {
        ids.extend_from_slice(&s[..len]);
        for i in 0..len {
            targets.push((i >= spec.prefix).then_some(s[i + 1]));
        }
    }
    Ok(CopyBatch {
        inputs: TokenBatch::new(spec.batch, len, ids)?,
        targets,
    })
}

/// Two-class toy images: a bright horizontal or vertical bar on noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarsSpec {
    pub batch: usize,
    pub channels: usize,
    pub size: usize,
    pub noise: f64,
}

impl Default for BarsSpec {
    fn default() -> Self {
        Self {
            batch: 16,
            channels: 3,
            size: 32,
            noise: 0.3,
        }
    }
}

/// Returns `[B, C, S, S]` images and their labels (0 horizontal, 1 vertical).
pub fn gen_bars<T: Scalar>(spec: &BarsSpec, seed: u64) -> Result<(Tensor<T>, Vec<u32>)> {
    if spec.batch == 0 || spec.channels == 0 || spec.size < 4 {
        return Err(Error::Input(
            "bars task needs batch >= 1, channels >= 1, size >= 4".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, s) = (spec.channels, spec.size);
    let mut data = vec![0.0; spec.batch * c * s * s];
    let mut labels = Vec::with_capacity(spec.batch);
    let width = (s / 8).max(1);
    for b in 0..spec.batch {
        let label = rng.gen_range(0..2u32);
        let at = rng.gen_range(0..=s - width);
        for ch in 0..c {
            for y in 0..s {
                for x in 0..s {
                    let on = if label == 0 {
                        (at..at + width).contains(&y)
                    } else {
                        (at..at + width).contains(&x)
                    };
                    let noise: f64 = rng.sample(StandardNormal);
                    data[((b * c + ch) * s + y) * s + x] = if on { 1.0 } else { 0.0 } + spec.noise * noise;
                }
            }
        }
        labels.push(label);
    }
    Ok((Tensor::from_f64(&[spec.batch, c, s, s], &data)?, labels))
}

/// Byte-level token stream of `text` cut into `batch` windows of `len + 1`
/// bytes at random offsets; returns inputs and next-byte targets.
pub fn byte_windows(text: &[u8], batch: usize, len: usize, seed: u64) -> Result<(TokenBatch, Vec<Option<u32>>)> {
    if text.len() < len + 1 {
        return Err(Error::Input(format!(
            "corpus of {} bytes is shorter than a window of {}",
            text.len(),
            len + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts: Vec<usize> = (0..=text.len() - len - 1).collect();
    starts.shuffle(&mut rng);
    let mut ids = Vec::with_capacity(batch * len);
    let mut targets = Vec::with_capacity(batch * len);
    for k in 0..batch {
        let s = starts[k % starts.len()];
        ids.extend(text[s..s + len].iter().map(|&b| u32::from(b)));
        targets.extend(text[s + 1..s + len + 1].iter().map(|&b| Some(u32::from(b))));
    }
    Ok((TokenBatch::new(batch, len, ids)?, targets))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_cluster_targets_global_mean() {
        let spec = ClusterSpec {
            clusters: 1,
            batch: 1,
            ..ClusterSpec::default()
        };
        let data = gen_cluster_regression::<f64>(&spec).unwrap();
        let n = spec.tokens;
        for k in 0..spec.dim {
            let mean: f64 = (0..n).map(|i| data.tokens.at(&[0, i, k])).sum::<f64>() / n as f64;
            for i in 0..n {
                assert!((data.targets.at(&[0, i, k]) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cluster_generation_is_deterministic() {
        let spec = ClusterSpec::default();
        let a = gen_cluster_regression::<f64>(&spec).unwrap();
        let b = gen_cluster_regression::<f64>(&spec).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.labels, b.labels);
        assert!(gen_cluster_regression::<f64>(&ClusterSpec { clusters: 17, ..spec }).is_err());
    }

    #[test]
    fn copy_batches_have_unique_answers() {
        let spec = CopySpec::default();
        let b = gen_copy_lm(&spec, 5).unwrap();
        assert_eq!(b.inputs.len, 16);
        let seqs = gen_copy_sequences(&spec, 5).unwrap();
        for (r, s) in seqs.iter().enumerate() {
            assert_eq!(s[spec.prefix], spec.delimiter());
            assert!(s[..spec.prefix].iter().all(|&t| t < spec.delimiter()));
            for i in 0..spec.context() {
                let t = b.targets[r * spec.context() + i];
                if i >= spec.prefix {
                    // Answer = the prefix symbol 8 positions back in the target stream.
                    assert_eq!(t, Some(s[i + 1 - spec.prefix - 1]));
                } else {
                    assert_eq!(t, None);
                }
            }
        }
        assert_eq!(gen_copy_lm(&spec, 5).unwrap().inputs, b.inputs);
        assert_ne!(gen_copy_lm(&spec, 6).unwrap().inputs, b.inputs);
    }

    #[test]
    fn bars_labels_and_shape() {
        let (img, labels) = gen_bars::<f64>(&BarsSpec::default(), 1).unwrap();
        assert_eq!(img.shape(), &[16, 3, 32, 32]);
        assert!(labels.contains(&0) && labels.contains(&1));
    }

    #[test]
    fn byte_windows_shift_by_one() {
        let text = b"hello world, hello bytes";
        let (x, t) = byte_windows(text, 3, 5, 0).unwrap();
        for r in 0..3 {
            let row = x.row(r);
            for i in 0..4 {
                assert_eq!(t[r * 5 + i], Some(row[i + 1]));
            }
        }
        assert!(byte_windows(b"abc", 1, 5, 0).is_err());
    }
}
