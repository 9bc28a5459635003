use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use gka_core::analysis::{export_tree, ExportOptions, RolloutConfig, DEFAULT_MAX_TOKENS};
use gka_core::checkpoint::{self, Checkpoint};
use gka_core::gka::AttentionCapture;
use gka_core::model::{Family, Input, Model, TokenBatch};
use gka_core::train::{gen_bars, gen_copy_sequences, BarsSpec, CopySpec};
use gka_core::{Precision, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::manifest::RunManifest;
use crate::{out_dir, Globals};

#[derive(Args, Debug)]
pub struct VisualizeArgs {
    /// Checkpoint written by `gka train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Whitespace-separated input: `C·S·S` pixel values for image models,
    /// token ids for language models. Defaults to a generated sample.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Largest exported raw matrix side before subsampling.
    #[arg(long, default_value_t = DEFAULT_MAX_TOKENS)]
    pub max_tokens: usize,
    /// Keep the diagonal in raw matrix exports.
    #[arg(long)]
    pub keep_diagonal: bool,
    /// Comma-separated rollout discard ratios.
    #[arg(long, value_delimiter = ',', default_value = "0.0,0.5,0.9")]
    pub discard_ratios: Vec<f64>,
}

fn read_numbers(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read input '{}'", path.display()))?;
    text.split_whitespace()
        .map(|w| {
            w.parse::<f64>()
                .map_err(|_| gka_core::Error::Input(format!("'{w}' in '{}' is not a number", path.display())).into())
        })
        .collect()
}

fn capture<T: Scalar>(ck: &Checkpoint, args: &VisualizeArgs, seed: u64) -> Result<(AttentionCapture<T>, Model<T>)> {
    let model = ck.into_model::<T>()?;
    let cfg = &model.config;
    let mut cap = AttentionCapture::new();
    match cfg.family {
        Family::Vit => {
            let (c, s) = (cfg.channels, cfg.image_size);
            let img = match &args.input {
                Some(p) => {
                    let v = read_numbers(p)?;
                    if v.len() != c * s * s {
                        bail!(gka_core::Error::Input(format!(
                            "image input needs {} values ({c}x{s}x{s}), got {}",
                            c * s * s,
                            v.len()
                        )));
                    }
                    Tensor::<T>::from_f64(&[1, c, s, s], &v)?
                }
                None => {
                    let spec = BarsSpec {
                        batch: 1,
                        channels: c,
                        size: s,
                        ..BarsSpec::default()
                    };
                    gen_bars::<T>(&spec, seed)?.0
                }
            };
            model.forward_train(Input::Images(&img), None, Some(&mut cap))?;
        }
        Family::CausalLm => {
            let ids: Vec<u32> = match &args.input {
                Some(p) => read_numbers(p)?
                    .into_iter()
                    .map(|v| {
                        if v < 0.0 || v.fract() != 0.0 {
                            Err(gka_core::Error::Input(format!(
                                "token id {v} is not a non-negative integer"
                            )))
                        } else {
                            Ok(v as u32)
                        }
                    })
                    .collect::<Result<_, _>>()?,
                None => {
                    let spec = CopySpec {
                        batch: 1,
                        ..CopySpec::default()
                    };
                    if cfg.vocab_size >= spec.vocab && cfg.seq_len >= spec.context() {
                        gen_copy_sequences(&spec, seed)?[0][..spec.context()].to_vec()
                    } else {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        (0..cfg.seq_len.min(64))
                            .map(|_| rng.gen_range(0..cfg.vocab_size as u32))
                            .collect()
                    }
                }
            };
            let len = ids.len();
            model.forward_train(Input::Tokens(&TokenBatch::new(1, len, ids)?), None, Some(&mut cap))?;
        }
    }
    Ok((cap, model))
}

fn export<T: Scalar>(ck: &Checkpoint, args: &VisualizeArgs, globals: &Globals, dir: &Path) -> Result<usize> {
    let (cap, model) = capture::<T>(ck, args, globals.seed)?;
    let opts = ExportOptions {
        rollout: RolloutConfig::new(args.discard_ratios.clone())?,
        sample: 0,
        mask_diagonal: !args.keep_diagonal,
        max_tokens: args.max_tokens,
    };
    let bw = model.bandwidths();
    Ok(export_tree(dir, &cap, bw.as_ref(), model.config.depth, &opts)?.len())
}

pub fn run(args: &VisualizeArgs, globals: &Globals) -> Result<u8> {
    if !args.checkpoint.exists() {
        bail!(gka_core::Error::Checkpoint(format!(
            "checkpoint '{}' does not exist",
            args.checkpoint.display()
        )));
    }
    let ck = checkpoint::load(&args.checkpoint)?;
    let dir = out_dir(args.out.as_ref(), "visualize");
    let files = match globals.precision {
        Precision::Single => export::<f32>(&ck, args, globals, &dir)?,
        Precision::Double => export::<f64>(&ck, args, globals, &dir)?,
    };
    RunManifest::new("visualize", &args.checkpoint.display().to_string(), globals, &dir).write(&dir)?;
    println!("wrote {files} files to {}", dir.display());
    Ok(0)
}
