//! Attention analysis products: rollout, CLS and patch maps, bandwidth
//! tables, raw matrices and per-layer kernel evolution, plus their CSV and
//! grayscale image exports.
//!
//! All products are computed in `f64` from an [`AttentionCapture`] of one
//! forward pass. Grids are `[P, P]` tensors over the patch layout, where
//! token 0 is the CLS token and tokens `1..=P²` are patches in row-major
//! order.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::gka::{AttentionCapture, BandwidthParams};
use crate::tensor::{Scalar, Tensor};
use crate::train::fmt_sig;

/// Residual weight of the identity term in the rollout.
pub const ROLLOUT_RESIDUAL: f64 = 0.5;
/// Largest raw matrix exported without subsampling.
pub const DEFAULT_MAX_TOKENS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutConfig {
    discard_ratios: Vec<f64>,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            discard_ratios: vec![0.0, 0.5, 0.9],
        }
    }
}

impl RolloutConfig {
    /// Ratios must lie in `[0, 1)`; they are stored sorted and deduplicated.
    pub fn new(mut ratios: Vec<f64>) -> Result<Self> {
        if ratios.is_empty() || ratios.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::Config(format!(
                "discard ratios must be non-empty and in [0, 1): {ratios:?}"
            )));
        }
        ratios.sort_by(f64::total_cmp);
        ratios.dedup();
        Ok(Self { discard_ratios: ratios })
    }

    pub fn discard_ratios(&self) -> &[f64] {
        &self.discard_ratios
    }
}

/// Layer indices of a capture, checked to be exactly `0..L`.
fn contiguous_layers<T: Scalar>(capture: &AttentionCapture<T>) -> Result<usize> {
    if capture.is_empty() {
        return Err(Error::Input("attention capture is empty".into()));
    }
    for (want, got) in capture.layer_indices().enumerate() {
        if want != got {
            return Err(Error::Input(format!("attention capture is missing layer {want}")));
        }
    }
    Ok(capture.num_layers())
}

/// Head-averaged `N×N` matrix of one layer and sample.
pub fn head_average<T: Scalar>(capture: &AttentionCapture<T>, layer: usize, sample: usize) -> Result<Tensor<f64>> {
    let (_, heads, n) = capture
        .dims()
        .ok_or_else(|| Error::Input("attention capture is empty".into()))?;
    let mut avg = vec![0.0; n * n];
    for h in 0..heads {
        let m = capture.matrix(layer, h, sample)?;
        for (a, v) in avg.iter_mut().zip(m.data()) {
            *a += v.as_f64();
        }
    }
    for a in &mut avg {
        *a /= heads as f64;
    }
    Tensor::new(&[n, n], avg)
}

/// Side of the patch grid for `n` tokens including CLS.
pub fn patch_grid_side(n: usize) -> Result<usize> {
    let p = ((n.saturating_sub(1)) as f64).sqrt().round() as usize;
    if n < 2 || p * p != n - 1 {
        return Err(Error::Input(format!(
            "{n} tokens do not form a CLS token plus a square patch grid"
        )));
    }
    Ok(p)
}

/// Columns `1..N` of row `row`, reshaped to `[P, P]`.
fn row_to_grid(m: &Tensor<f64>, row: usize) -> Result<Tensor<f64>> {
    let n = m.shape()[0];
    let p = patch_grid_side(n)?;
    Tensor::new(&[p, p], m.row(row)[1..].to_vec())
}

/// Zeroes every entry strictly below the `ratio` quantile of all entries,
/// taken as the value at rank `⌊ratio·N²⌋` of the ascending order.
pub fn discard_below_quantile(m: &mut Tensor<f64>, ratio: f64) {
    let mut sorted = m.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = ((ratio * sorted.len() as f64).floor() as usize).min(sorted.len() - 1);
    let threshold = sorted[k];
    for v in m.data_mut() {
        if *v < threshold {
            *v = 0.0;
        }
    }
}

fn row_normalize(m: &mut Tensor<f64>) -> Result<()> {
    let n = m.shape()[1];
    for (r, row) in m.data_mut().chunks_mut(n).enumerate() {
        let s: f64 = row.iter().sum();
        if s <= 0.0 {
            return Err(Error::DegenerateRow { row: r });
        }
        for v in row {
            *v /= s;
        }
    }
    Ok(())
}

/// `0.5·Ā + 0.5·I`, optionally thresholded, then row-normalized.
pub fn rollout_factor(avg: &Tensor<f64>, discard_ratio: Option<f64>) -> Result<Tensor<f64>> {
    let n = avg.shape()[0];
    let mut a = avg.map(|v| (1.0 - ROLLOUT_RESIDUAL) * v);
    for i in 0..n {
        a.data_mut()[i * n + i] += ROLLOUT_RESIDUAL;
    }
    if let Some(r) = discard_ratio.filter(|&r| r > 0.0) {
        discard_below_quantile(&mut a, r);
    }
    row_normalize(&mut a)?;
    Ok(a)
}

/// Cumulative rollout `Â(1)·Â(2)·…·Â(L)` for one sample, with layer 1 the
/// first block. `discard_ratio = None` disables thresholding.
pub fn rollout_matrix<T: Scalar>(
    capture: &AttentionCapture<T>,
    sample: usize,
    discard_ratio: Option<f64>,
) -> Result<Tensor<f64>> {
    let layers = contiguous_layers(capture)?;
    let mut product: Option<Tensor<f64>> = None;
    for l in 0..layers {
        let factor = rollout_factor(&head_average(capture, l, sample)?, discard_ratio)?;
        product = Some(match product {
            None => factor,
            Some(p) => crate::tensor::matmul(&p, &factor)?,
        });
    }
    Ok(product.expect("at least one layer"))
}

/// The CLS row of the rollout as a `[P, P]` grid, one per discard ratio.
pub fn attention_rollout<T: Scalar>(
    capture: &AttentionCapture<T>,
    cfg: &RolloutConfig,
    sample: usize,
) -> Result<Vec<(f64, Tensor<f64>)>> {
    cfg.discard_ratios
        .iter()
        .map(|&r| Ok((r, row_to_grid(&rollout_matrix(capture, sample, Some(r))?, 0)?)))
        .collect()
}

/// CLS-to-patch weights of one head.
pub fn cls_attention_map<T: Scalar>(
    capture: &AttentionCapture<T>,
    layer: usize,
    head: usize,
    sample: usize,
) -> Result<Tensor<f64>> {
    row_to_grid(&capture.matrix(layer, head, sample)?.cast(), 0)
}

/// Canonical query patches `(row, col)` on a `P×P` grid.
pub fn patch_queries(p: usize) -> [(usize, usize); 4] {
    [
        (p / 4, p / 4),
        (p / 2, p / 2),
        (3 * p / 4, 3 * p / 4),
        (p / 4, 3 * p / 4),
    ]
}

/// Head-averaged attention from each canonical query patch to all patches.
pub fn patch_attention_maps<T: Scalar>(
    capture: &AttentionCapture<T>,
    layer: usize,
    sample: usize,
) -> Result<Vec<((usize, usize), Tensor<f64>)>> {
    let avg = head_average(capture, layer, sample)?;
    let p = patch_grid_side(avg.shape()[0])?;
    patch_queries(p)
        .into_iter()
        .map(|(r, c)| Ok(((r, c), row_to_grid(&avg, 1 + r * p + c)?)))
        .collect()
}

/// `σ(l, h)` as an `[L, H]` table.
pub fn sigma_report<T: Scalar>(bw: &BandwidthParams<T>) -> Tensor<f64> {
    bw.log_sigma.cast::<f64>().map(f64::exp)
}

/// `round(linspace(0, n-1, k))`, with halves rounded away from zero.
pub fn subsample_indices(n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    if k == 1 {
        return vec![0];
    }
    let step = (n - 1) as f64 / (k - 1) as f64;
    (0..k).map(|i| (i as f64 * step).round() as usize).collect()
}

/// One head's mixing matrix, optionally with a zeroed diagonal, uniformly
/// subsampled to at most `max_tokens` rows and columns. Returns the kept
/// token indices and the matrix.
pub fn raw_matrix_export<T: Scalar>(
    capture: &AttentionCapture<T>,
    layer: usize,
    head: usize,
    sample: usize,
    mask_diagonal: bool,
    max_tokens: usize,
) -> Result<(Vec<usize>, Tensor<f64>)> {
    if max_tokens == 0 {
        return Err(Error::Config("max_tokens must be >= 1".into()));
    }
    let m: Tensor<f64> = capture.matrix(layer, head, sample)?.cast();
    let n = m.shape()[0];
    let idx = subsample_indices(n, max_tokens);
    let k = idx.len();
    let mut out = Vec::with_capacity(k * k);
    for &i in &idx {
        for &j in &idx {
            out.push(if mask_diagonal && i == j {
                0.0
            } else {
                m.data()[i * n + j]
            });
        }
    }
    Ok((idx, Tensor::new(&[k, k], out)?))
}

/// One layer of the kernel evolution: the head-averaged matrix, its CLS
/// grid, and the grid again for the image-overlay column.
#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionLayer {
    pub matrix: Tensor<f64>,
    pub cls_grid: Tensor<f64>,
    pub overlay_grid: Tensor<f64>,
}

pub fn kernel_evolution_export<T: Scalar>(capture: &AttentionCapture<T>, sample: usize) -> Result<Vec<EvolutionLayer>> {
    let layers = contiguous_layers(capture)?;
    (0..layers)
        .map(|l| {
            let matrix = head_average(capture, l, sample)?;
            let cls_grid = row_to_grid(&matrix, 0)?;
            Ok(EvolutionLayer {
                overlay_grid: cls_grid.clone(),
                cls_grid,
                matrix,
            })
        })
        .collect()
}

/// Rows of comma-separated values with 9 significant digits, no header.
pub fn grid_csv(m: &Tensor<f64>) -> String {
    let cols = m.last_dim();
    let mut s = String::new();
    for row in m.data().chunks(cols) {
        let cells: Vec<String> = row.iter().map(|&v| fmt_sig(v)).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// Binary 8-bit PGM with per-image min-max normalization; a constant image
/// maps to black.
pub fn grid_pgm(m: &Tensor<f64>) -> Vec<u8> {
    let (rows, cols) = (m.rows(), m.last_dim());
    let (lo, hi) = m
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(m.data().iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

/// `layer,head,sigma` rows in layer-major order.
pub fn sigma_csv(sigmas: &Tensor<f64>) -> String {
    let heads = sigmas.last_dim();
    let mut s = String::from("layer,head,sigma\n");
    for (i, v) in sigmas.data().iter().enumerate() {
        let _ = writeln!(s, "{},{},{}", i / heads, i % heads, fmt_sig(*v));
    }
    s
}

/// Reads back a [`sigma_csv`] table into `[L, H]`.
pub fn parse_sigma_csv(text: &str) -> Result<Tensor<f64>> {
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Input(format!("sigma.csv line {}: '{line}'", ln + 1));
        if f.len() != 3 {
            return Err(bad());
        }
        let l: usize = f[0].parse().map_err(|_| bad())?;
        let h: usize = f[1].parse().map_err(|_| bad())?;
        let v: f64 = f[2].parse().map_err(|_| bad())?;
        rows.push((l, h, v));
    }
    let layers = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let heads = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
    if rows.len() != layers * heads {
        return Err(Error::Input("sigma.csv is not a complete layer x head table".into()));
    }
    let mut out = Tensor::zeros(&[layers, heads]);
    for (l, h, v) in rows {
        out.set(&[l, h], v);
    }
    Ok(out)
}

/// Which exports to produce and how.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportOptions {
    pub rollout: RolloutConfig,
    pub sample: usize,
    pub mask_diagonal: bool,
    pub max_tokens: usize,
}

impl Default for ExportOptions {
    fn default() -> Self {
        Self {
            rollout: RolloutConfig::default(),
            sample: 0,
            mask_diagonal: true,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

/// File name of the rollout grid for one discard ratio, e.g. `rollout_r0.5.csv`.
pub fn rollout_file_name(ratio: f64) -> String {
    format!("rollout_r{ratio:?}.csv")
}

fn write_grid(dir: &Path, stem: &str, m: &Tensor<f64>, written: &mut Vec<PathBuf>) -> Result<()> {
    let csv = dir.join(format!("{stem}.csv"));
    fs::write(&csv, grid_csv(m))?;
    let pgm = dir.join(format!("{stem}.pgm"));
    fs::write(&pgm, grid_pgm(m))?;
    written.push(csv);
    written.push(pgm);
    Ok(())
}

/// Writes the full export tree for one capture into `dir` and returns the
/// files written. `expected_layers` guards against partial captures.
/// CLS-based products (rollout, CLS, patch and evolution grids) are emitted
/// only when the token count is a CLS token plus a square patch grid.
pub fn export_tree<T: Scalar>(
    dir: &Path,
    capture: &AttentionCapture<T>,
    bandwidths: Option<&BandwidthParams<T>>,
    expected_layers: usize,
    opts: &ExportOptions,
) -> Result<Vec<PathBuf>> {
    let layers = contiguous_layers(capture)?;
    if layers != expected_layers {
        return Err(Error::Input(format!(
            "attention capture holds {layers} layers, expected {expected_layers}"
        )));
    }
    let (_, heads, n) = capture.dims().expect("non-empty");
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let has_grid = patch_grid_side(n).is_ok();

    if has_grid {
        for (r, grid) in attention_rollout(capture, &opts.rollout, opts.sample)? {
            let stem = rollout_file_name(r);
            write_grid(dir, stem.trim_end_matches(".csv"), &grid, &mut written)?;
        }
        let p = patch_grid_side(n)?;
        let mut q = String::from("query,row,col\n");
        for (k, (r, c)) in patch_queries(p).into_iter().enumerate() {
            let _ = writeln!(q, "{k},{r},{c}");
        }
        let qpath = dir.join("patch_queries.csv");
        fs::write(&qpath, q)?;
        written.push(qpath);
    }
    for l in 0..layers {
        for h in 0..heads {
            if has_grid {
                write_grid(
                    dir,
                    &format!("cls_L{l}_H{h}"),
                    &cls_attention_map(capture, l, h, opts.sample)?,
                    &mut written,
                )?;
            }
            let (_, raw) = raw_matrix_export(capture, l, h, opts.sample, opts.mask_diagonal, opts.max_tokens)?;
            write_grid(dir, &format!("raw_L{l}_H{h}"), &raw, &mut written)?;
        }
        if has_grid {
            for (k, (_, grid)) in patch_attention_maps(capture, l, opts.sample)?.into_iter().enumerate() {
                write_grid(dir, &format!("patch_L{l}_q{k}"), &grid, &mut written)?;
            }
        }
    }
    if has_grid {
        for (l, e) in kernel_evolution_export(capture, opts.sample)?.into_iter().enumerate() {
            write_grid(dir, &format!("evolution_L{l}_matrix"), &e.matrix, &mut written)?;
            write_grid(dir, &format!("evolution_L{l}_cls"), &e.cls_grid, &mut written)?;
        }
    }
    if let Some(bw) = bandwidths {
        let sig = sigma_report(bw);
        let path = dir.join("sigma.csv");
        fs::write(&path, sigma_csv(&sig))?;
        written.push(path);
        // Heatmap layout: one row per head, one column per layer.
        let (l, h) = (sig.shape()[0], sig.shape()[1]);
        let heat = Tensor::from_fn(&[h, l], |i| sig.data()[(i % l) * h + i / l]);
        write_grid(dir, "sigma_heatmap", &heat, &mut written)?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn capture_from(mats: &[Vec<f64>], n: usize) -> AttentionCapture<f64> {
        let mut cap = AttentionCapture::new();
        for (l, m) in mats.iter().enumerate() {
            cap.record(l, Tensor::new(&[1, 1, n, n], m.clone()).unwrap(), None);
        }
        cap
    }

    #[test]
    fn uniform_single_layer_closed_form() {
        let n = 5;
        let cap = capture_from(&[vec![1.0 / n as f64; n * n]], n);
        let r = rollout_matrix(&cap, 0, None).unwrap();
        assert!((r.at(&[0, 0]) - (0.5 + 0.5 / n as f64)).abs() < 1e-15);
        for j in 1..n {
            assert!((r.at(&[0, j]) - 0.5 / n as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_attention_gives_zero_heat() {
        let n = 10;
        let eye: Tensor<f64> = Tensor::eye(n);
        let cap = capture_from(&[eye.data().to_vec(), eye.data().to_vec()], n);
        for (_, g) in attention_rollout(&cap, &RolloutConfig::default(), 0).unwrap() {
            assert_eq!(g.shape(), &[3, 3]);
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_ratio_is_bitwise_unthresholded() {
        let n = 5;
        let m: Vec<f64> = (0..n * n).map(|i| ((i * 7) % 11) as f64 + 1.0).collect();
        let mut t = Tensor::new(&[n, n], m).unwrap();
        row_normalize(&mut t).unwrap();
        let cap = capture_from(&[t.data().to_vec(), t.data().to_vec()], n);
        let a = rollout_matrix(&cap, 0, Some(0.0)).unwrap();
        let b = rollout_matrix(&cap, 0, None).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn missing_layer_and_empty_capture_rejected() {
        let n = 5;
        let mut cap = AttentionCapture::<f64>::new();
        assert!(kernel_evolution_export(&cap, 0).is_err());
        cap.record(1, Tensor::full(&[1, 1, n, n], 0.2), None);
        assert!(rollout_matrix(&cap, 0, None).is_err());
    }

    #[test]
    fn discard_keeps_top_entries() {
        let mut m = Tensor::from_f64(&[2, 2], &[0.1, 0.4, 0.3, 0.2]).unwrap();
        discard_below_quantile(&mut m, 0.5);
        assert_eq!(m.data(), &[0.0, 0.4, 0.3, 0.0]);
    }

    #[test]
    fn patch_query_coordinates() {
        assert_eq!(patch_queries(14), [(3, 3), (7, 7), (10, 10), (3, 10)]);
    }

    #[test]
    fn subsampling_rules() {
        assert_eq!(subsample_indices(40, 50), (0..40).collect::<Vec<_>>());
        let idx = subsample_indices(197, 50);
        assert_eq!(idx.len(), 50);
        assert_eq!((idx[0], idx[49]), (0, 196));
        assert_eq!(subsample_indices(5, 3), vec![0, 2, 4]);
    }

    #[test]
    fn sigma_csv_round_trip() {
        let bw = BandwidthParams::<f64> {
            log_sigma: Tensor::from_f64(&[2, 3], &[0.0, 0.1, -0.2, 1.3, 0.01, -2.0]).unwrap(),
        };
        let s = sigma_report(&bw);
        let back = parse_sigma_csv(&sigma_csv(&s)).unwrap();
        for (a, b) in s.data().iter().zip(back.data()) {
            assert!(((a - b) / a).abs() < 1e-6);
        }
        let fresh = BandwidthParams::<f64> {
            log_sigma: Tensor::zeros(&[2, 2]),
        };
        assert!(sigma_report(&fresh).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn pgm_header_and_range() {
        let m = Tensor::from_f64(&[2, 3], &[0.0, 0.5, 1.0, 0.25, 0.75, 1.0]).unwrap();
        let bytes = grid_pgm(&m);
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 128, 255, 64, 191, 255]);
    }
}
