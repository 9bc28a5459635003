use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Result};
use clap::{Args, ValueEnum};
use gka_core::gka::{gka_forward, GkaLayerParams};
use gka_core::streaming::{gka_forward_streaming, naive_workspace_floats, TileConfig};
use gka_core::{Precision, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::manifest::RunManifest;
use crate::{out_dir, Globals, ModelSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PathChoice {
    Naive,
    Streaming,
    Both,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelSource,
    /// Comma-separated sequence lengths.
    #[arg(long, value_delimiter = ',', default_value = "256,512")]
    pub seq_lens: Vec<usize>,
    #[arg(long, value_enum, default_value = "both")]
    pub path: PathChoice,
    /// Square tile side for the streaming path.
    #[arg(long, default_value_t = 64)]
    pub tiles: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    /// Timed passes per configuration.
    #[arg(long, default_value_t = 100)]
    pub passes: usize,
    /// Untimed passes before timing.
    #[arg(long, default_value_t = 10)]
    pub warmup: usize,
    /// Output directory for bench.csv and the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Largest relative difference tolerated between the two paths.
pub fn agreement_tolerance(p: Precision) -> f64 {
    match p {
        Precision::Single => 1e-5,
        Precision::Double => 1e-10,
    }
}

struct Row {
    n: usize,
    path: &'static str,
    tokens_per_sec: f64,
    mean_ms: f64,
    workspace_floats: usize,
}

fn time<F: FnMut() -> Result<()>>(warmup: usize, passes: usize, mut f: F) -> Result<f64> {
    for _ in 0..warmup {
        f()?;
    }
    let start = Instant::now();
    for _ in 0..passes {
        f()?;
    }
    Ok(start.elapsed().as_secs_f64() / passes as f64)
}

fn bench<T: Scalar>(args: &BenchArgs, globals: &Globals) -> Result<(String, Vec<Row>)> {
    let (cfg, source) = args.model.resolve("gka-ti")?;
    if args.seq_lens.is_empty() || args.seq_lens.contains(&0) || args.batch == 0 || args.passes == 0 {
        bail!(gka_core::Error::Config(
            "seq lens, batch and passes must be >= 1".into()
        ));
    }
    let tiles = TileConfig::square(args.tiles);
    let mask = cfg.mask();
    let mut params = GkaLayerParams::<T>::identity(cfg.width, cfg.heads)?;
    params.prep = cfg.feature_prep();
    let mut rng = ChaCha8Rng::seed_from_u64(globals.seed);
    let mut rows = Vec::new();
    for &n in &args.seq_lens {
        let x = Tensor::<T>::randn(&[args.batch, n, cfg.width], 1.0, &mut rng);
        // Agreement is checked before anything is timed.
        let dense = gka_forward(&x, &params, &mask, 0, None)?;
        let (streamed, stats) = gka_forward_streaming(&x, &params, &mask, 0, tiles)?;
        let diff = streamed.rel_diff(&dense);
        let tol = agreement_tolerance(T::PRECISION);
        if diff > tol {
            bail!(gka_core::Error::NonFinite(format!(
                "streaming and dense outputs differ by {diff:.3e} (> {tol:e}) at N = {n}"
            )));
        }
        let tokens = (args.batch * n) as f64;
        if matches!(args.path, PathChoice::Naive | PathChoice::Both) {
            let t = time(args.warmup, args.passes, || {
                gka_forward(&x, &params, &mask, 0, None)?;
                Ok(())
            })?;
            rows.push(Row {
                n,
                path: "naive",
                tokens_per_sec: tokens / t,
                mean_ms: t * 1e3,
                workspace_floats: naive_workspace_floats(n, cfg.head_dim()),
            });
        }
        if matches!(args.path, PathChoice::Streaming | PathChoice::Both) {
            let t = time(args.warmup, args.passes, || {
                gka_forward_streaming(&x, &params, &mask, 0, tiles)?;
                Ok(())
            })?;
            rows.push(Row {
                n,
                path: "streaming",
                tokens_per_sec: tokens / t,
                mean_ms: t * 1e3,
                workspace_floats: stats.peak_floats_per_worker,
            });
        }
    }
    Ok((source, rows))
}

pub fn run(args: &BenchArgs, globals: &Globals) -> Result<u8> {
    let (source, rows) = match globals.precision {
        Precision::Single => bench::<f32>(args, globals)?,
        Precision::Double => bench::<f64>(args, globals)?,
    };
    let mut csv = String::from("seq_len,path,tokens_per_sec,mean_ms,workspace_floats\n");
    println!(
        "{:>8}  {:<10} {:>14} {:>12} {:>18}",
        "N", "path", "tokens/s", "mean ms", "workspace floats"
    );
    for r in &rows {
        println!(
            "{:>8}  {:<10} {:>14.1} {:>12.3} {:>18}",
            r.n, r.path, r.tokens_per_sec, r.mean_ms, r.workspace_floats
        );
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            r.n, r.path, r.tokens_per_sec, r.mean_ms, r.workspace_floats
        );
    }
    let dir = out_dir(args.out.as_ref(), "bench");
    RunManifest::new("bench", &source, globals, &dir).write(&dir)?;
    std::fs::write(dir.join("bench.csv"), csv)?;
    Ok(0)
}
