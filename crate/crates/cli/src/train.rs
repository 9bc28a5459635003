use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, ValueEnum};
use gka_core::checkpoint;
use gka_core::model::{Family, Model, ModelConfig};
use gka_core::train::{
    train_cluster_sigma, train_loop, BarsSpec, ClusterSpec, CopySpec, MetricsTrace, TaskSpec, TrainConfig,
};
use gka_core::{Precision, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::manifest::RunManifest;
use crate::{out_dir, Globals, ModelSource};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.gkackpt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    #[value(name = "copy_lm")]
    CopyLm,
    #[value(name = "bars")]
    Bars,
    #[value(name = "cluster_regression")]
    ClusterRegression,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    #[command(flatten)]
    pub model: ModelSource,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Training items per step.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Steps between metrics rows.
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
    /// Items in the fixed evaluation batch.
    #[arg(long, default_value_t = 256)]
    pub eval_batch: usize,
    /// Stop early once evaluation accuracy reaches this fraction.
    #[arg(long)]
    pub target_accuracy: Option<f64>,
    /// Initial bandwidth for cluster_regression.
    #[arg(long, default_value_t = 50.0)]
    pub sigma_init: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn train_config(args: &TrainArgs, task: Task, seed: u64) -> TrainConfig {
    let mut cfg = match task {
        Task::CopyLm => TrainConfig::copy_task(),
        Task::Bars => TrainConfig {
            steps: 300,
            ..TrainConfig::default()
        },
        Task::ClusterRegression => TrainConfig::cluster_task(),
    };
    cfg.seed = seed;
    cfg.log_every = args.log_every;
    cfg.eval_batch = args.eval_batch;
    cfg.target_accuracy = args.target_accuracy;
    if let Some(s) = args.steps {
        cfg.steps = s;
    }
    if let Some(lr) = args.lr {
        cfg.optim.lr = lr;
    }
    if let Some(wd) = args.weight_decay {
        cfg.optim.weight_decay = wd;
    }
    cfg
}

fn model_task<T: Scalar>(
    args: &TrainArgs,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    dir: &std::path::Path,
) -> Result<MetricsTrace> {
    let mut model = Model::<T>::init(cfg, &mut ChaCha8Rng::seed_from_u64(tc.seed))?;
    let (task, batch) = match args.task {
        Task::CopyLm => {
            let spec = CopySpec::default();
            (TaskSpec::CopyLm(spec), args.batch.unwrap_or(spec.batch))
        }
        Task::Bars => {
            let spec = BarsSpec {
                size: cfg.image_size,
                channels: cfg.channels,
                ..BarsSpec::default()
            };
            (TaskSpec::Bars(spec), args.batch.unwrap_or(spec.batch))
        }
        Task::ClusterRegression => unreachable!("handled separately"),
    };
    let trace = train_loop(&mut model, &task, tc, batch)?;
    checkpoint::save(&model, &dir.join(CHECKPOINT_FILE))?;
    Ok(trace)
}

pub fn run(args: &TrainArgs, globals: &Globals) -> Result<u8> {
    let tc = train_config(args, args.task, globals.seed);
    let run_name = match args.task {
        Task::CopyLm => "train_copy_lm",
        Task::Bars => "train_bars",
        Task::ClusterRegression => "train_cluster_regression",
    };
    let dir = out_dir(args.out.as_ref(), run_name);
    std::fs::create_dir_all(&dir)?;
    let (trace, source) = match args.task {
        Task::ClusterRegression => {
            if args.sigma_init <= 0.0 || !args.sigma_init.is_finite() {
                bail!(gka_core::Error::Config("--sigma-init must be positive".into()));
            }
            let spec = ClusterSpec {
                seed: globals.seed,
                batch: args.batch.unwrap_or(ClusterSpec::default().batch),
                ..ClusterSpec::default()
            };
            let ln = args.sigma_init.ln();
            let trace = match globals.precision {
                Precision::Single => train_cluster_sigma::<f32>(&spec, ln, &tc)?.1,
                Precision::Double => train_cluster_sigma::<f64>(&spec, ln, &tc)?.1,
            };
            (trace, "task:cluster_regression".to_string())
        }
        Task::CopyLm | Task::Bars => {
            let default = if args.task == Task::CopyLm {
                "gka-copy"
            } else {
                "gka-vit-toy"
            };
            let (cfg, source) = args.model.resolve(default)?;
            let want = if args.task == Task::CopyLm {
                Family::CausalLm
            } else {
                Family::Vit
            };
            if cfg.family != want {
                bail!(gka_core::Error::Config(format!(
                    "task needs a {} model, got {}",
                    want.name(),
                    cfg.family.name()
                )));
            }
            let trace = match globals.precision {
                Precision::Single => model_task::<f32>(args, &cfg, &tc, &dir)?,
                Precision::Double => model_task::<f64>(args, &cfg, &tc, &dir)?,
            };
            (trace, source)
        }
    };
    std::fs::write(dir.join(METRICS_FILE), trace.to_csv())?;
    RunManifest::new("train", &source, globals, &dir).write(&dir)?;
    if let Some(last) = trace.last() {
        let acc = last.accuracy.map_or("-".into(), |a| format!("{a:.4}"));
        println!("step {} loss {:.6} accuracy {acc}", last.step, last.loss);
    }
    println!("wrote {}", dir.display());
    Ok(0)
}
