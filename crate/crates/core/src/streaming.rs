//! Tiled kernel attention that never materializes the `N×N` affinity matrix.
//!
//! For every query tile the key tiles are streamed in ascending order and
//! each query row keeps a running numerator (a `d`-vector) and denominator.
//! No running-max rescaling is needed: every kernel value lies in `(0, 1]`
//! and the self pair always contributes exactly 1, so the denominator is at
//! least 1 and a single pass cannot overflow or lose the row. Both
//! accumulators are kept in `f64` regardless of the working precision.
//!
//! Key tiles that hold no allowed key for any row of the query tile are
//! skipped, so a sliding window of `W` keys touches at most
//! `ceil(W / tile_cols) + 1` key tiles per query tile when the tile size
//! divides `W`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gka::{prepare_row, project, GkaLayerParams};
use crate::mask::{LayerMask, MaskSpec};
use crate::tensor::{dot, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileConfig {
    pub tile_rows: usize,
    pub tile_cols: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self {
            tile_rows: 64,
            tile_cols: 64,
        }
    }
}

impl TileConfig {
    pub fn square(t: usize) -> Self {
        Self {
            tile_rows: t,
            tile_cols: t,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.tile_rows == 0 || self.tile_cols == 0 {
            return Err(Error::Param("tile sizes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Transient memory and traversal counts of one tiled forward pass.
///
/// `peak_floats_per_worker` counts every scratch buffer a single
/// `(batch, head, query tile)` work unit holds at once:
///
/// ```text
/// tr·tc            distance/kernel tile
/// tr·d + tc·d      prepared query and key features
/// 2·tr·d           numerator accumulators and the finished output tile
/// 2·tr + tc        query norms, denominators, key norms
/// ```
///
/// with `tr`, `tc` the tile sizes clipped to `N`. For square tiles this is
/// at most `4·(tr·tc + tr·d)` and does not depend on `N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WorkspaceStats {
    pub peak_floats_per_worker: usize,
    /// Largest number of key tiles visited by any query tile.
    pub max_key_tiles_per_query_tile: usize,
    pub key_tiles_visited: usize,
    pub key_tiles_skipped: usize,
    pub work_units: usize,
}

/// Scratch floats the dense path holds per `(batch, head)`: features,
/// distances, kernel and weights plus the row sums.
pub fn naive_workspace_floats(n: usize, head_dim: usize) -> usize {
    3 * n * n + n * head_dim + n
}

struct TileOut<T> {
    rows: Vec<T>,
    visited: usize,
    skipped: usize,
    peak: usize,
}

/// Tiled equivalent of [`crate::gka::gka_forward`].
pub fn gka_forward_streaming<T: Scalar>(
    x: &Tensor<T>,
    params: &GkaLayerParams<T>,
    mask: &MaskSpec,
    layer_index: usize,
    tiles: TileConfig,
) -> Result<(Tensor<T>, WorkspaceStats)> {
    mask.validate()?;
    tiles.validate()?;
    let (b, n, d) = x.dims3()?;
    let heads = params.heads;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Param(format!("width {d} is not divisible by {heads} heads")));
    }
    if params.w_o.shape() != [d, d] {
        return Err(Error::shape("gka w_o", params.w_o.shape(), &[d, d]));
    }
    if params.log_sigma.shape() != [heads] {
        return Err(Error::shape("gka log_sigma", params.log_sigma.shape(), &[heads]));
    }
    let hd = d / heads;
    if params.prep.rope_base.is_some() && !hd.is_multiple_of(2) {
        return Err(Error::Param(format!("rope needs an even head dimension, got {hd}")));
    }
    let layer_mask = mask.for_layer(layer_index);
    let tr = tiles.tile_rows.min(n);
    let q_tiles = n.div_ceil(tr);

    let outs: Vec<TileOut<T>> = (0..b * heads * q_tiles)
        .into_par_iter()
        .map(|unit| {
            let qt = unit % q_tiles;
            let bh = unit / q_tiles;
            let (bi, h) = (bh / heads, bh % heads);
            query_tile(
                x,
                params,
                layer_mask,
                bi,
                h,
                qt * tr,
                ((qt + 1) * tr).min(n),
                tiles.tile_cols.min(n),
            )
        })
        .collect::<Result<_>>()?;

    let mut concat = Tensor::zeros(&[b, n, d]);
    let mut stats = WorkspaceStats {
        work_units: outs.len(),
        ..WorkspaceStats::default()
    };
    for (unit, out) in outs.iter().enumerate() {
        let qt = unit % q_tiles;
        let bh = unit / q_tiles;
        let (bi, h) = (bh / heads, bh % heads);
        let r0 = qt * tr;
        for (k, row) in out.rows.chunks(hd).enumerate() {
            let at = (bi * n + r0 + k) * d + h * hd;
            concat.data_mut()[at..at + hd].copy_from_slice(row);
        }
        stats.key_tiles_visited += out.visited;
        stats.key_tiles_skipped += out.skipped;
        stats.max_key_tiles_per_query_tile = stats.max_key_tiles_per_query_tile.max(out.visited);
        stats.peak_floats_per_worker = stats.peak_floats_per_worker.max(out.peak);
    }
    let y = project(&concat, &params.w_o, params.b_o.as_ref())?;
    Ok((y, stats))
}

#[allow(clippy::too_many_arguments)]
fn query_tile<T: Scalar>(
    x: &Tensor<T>,
    params: &GkaLayerParams<T>,
    mask: LayerMask,
    bi: usize,
    h: usize,
    r0: usize,
    r1: usize,
    tc: usize,
) -> Result<TileOut<T>> {
    let (_, n, d) = x.dims3()?;
    let hd = d / params.heads;
    let rows = r1 - r0;
    let src = |i: usize| {
        let at = (bi * n + i) * d + h * hd;
        &x.data()[at..at + hd]
    };
    let prep = params.prep;
    let freqs = prep.freqs(hd);
    let sigma = params.log_sigma.data()[h].as_f64().exp();
    let scale = -1.0 / (2.0 * sigma * sigma);

    let mut q = Vec::with_capacity(rows * hd);
    for i in r0..r1 {
        let start = q.len();
        q.extend_from_slice(src(i));
        prepare_row(&mut q[start..], i, prep, &freqs);
    }
    let q_norm: Vec<T> = q.chunks(hd).map(|r| dot(r, r)).collect();
    let mut num = vec![0.0f64; rows * hd];
    let mut den = vec![0.0f64; rows];
    let mut k = vec![T::zero(); tc * hd];
    let mut k_norm = vec![T::zero(); tc];
    let mut dist = vec![T::zero(); rows * tc];

    // Keys any row of this tile may see.
    let lo = mask.key_range(r0, n).start;
    let hi = mask.key_range(r1 - 1, n).end;
    let k_tiles = n.div_ceil(tc);
    let (mut visited, mut skipped) = (0, 0);
    for kt in 0..k_tiles {
        let c0 = kt * tc;
        let c1 = (c0 + tc).min(n);
        if c1 <= lo || c0 >= hi {
            skipped += 1;
            continue;
        }
        visited += 1;
        let cols = c1 - c0;
        for (jj, j) in (c0..c1).enumerate() {
            let row = &mut k[jj * hd..(jj + 1) * hd];
            row.copy_from_slice(src(j));
            prepare_row(row, j, prep, &freqs);
            k_norm[jj] = dot(row, row);
        }
        for ii in 0..rows {
            let qi = &q[ii * hd..(ii + 1) * hd];
            for jj in 0..cols {
                let kj = &k[jj * hd..(jj + 1) * hd];
                dist[ii * tc + jj] = q_norm[ii] + k_norm[jj] - T::of(2.0) * dot(qi, kj);
            }
        }
        for ii in 0..rows {
            let i = r0 + ii;
            let acc = &mut num[ii * hd..(ii + 1) * hd];
            for jj in 0..cols {
                let j = c0 + jj;
                if !mask.allowed(i, j) {
                    continue;
                }
                let dij = if i == j {
                    0.0
                } else {
                    dist[ii * tc + jj].max(T::zero()).as_f64()
                };
                let kv = (dij * scale).exp();
                den[ii] += kv;
                for (a, &v) in acc.iter_mut().zip(src(j)) {
                    *a += kv * v.as_f64();
                }
            }
        }
    }

    let eps = params.epsilon.as_f64();
    let mut out = Vec::with_capacity(rows * hd);
    for ii in 0..rows {
        if !den[ii].is_finite() {
            return Err(Error::NonFinite(format!("streaming denominator, row {}", r0 + ii)));
        }
        let inv = 1.0 / (den[ii] + eps);
        out.extend(num[ii * hd..(ii + 1) * hd].iter().map(|&a| T::of(a * inv)));
    }
    let peak = q.len() + q_norm.len() + num.len() + den.len() + k.len() + k_norm.len() + dist.len() + out.len();
    Ok(TileOut {
        rows: out,
        visited,
        skipped,
        peak,
    })
}
