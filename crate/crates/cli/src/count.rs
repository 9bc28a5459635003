use anyhow::{bail, Result};
use clap::{Args, ValueEnum};
use gka_core::model::{count_flops, CostReport, PRESET_NAMES};
use serde::{Deserialize, Serialize};

use crate::ModelSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Json,
}

#[derive(Args, Debug)]
pub struct CountArgs {
    #[command(flatten)]
    pub model: ModelSource,
    /// Tokens per item for the FLOP figures (default: the model's own).
    #[arg(long)]
    pub tokens: Option<usize>,
    #[arg(long, value_enum, default_value = "table")]
    pub format: Format,
    /// Count every preset.
    #[arg(long, conflicts_with_all = ["preset", "config"])]
    pub all: bool,
    /// List preset names and exit.
    #[arg(long)]
    pub list: bool,
}

/// Machine-readable mirror of [`CostReport`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostJson {
    pub name: String,
    pub total_params: u64,
    pub attn_params: u64,
    pub mlp_params: u64,
    pub sigma_params: u64,
    pub embed_params: u64,
    pub norm_params: u64,
    pub head_params: u64,
    pub tokens: u64,
    pub flops_forward: u64,
    pub flops_per_token: Option<u64>,
    pub breakdown: Vec<(String, u64)>,
    pub convention: String,
}

impl From<&CostReport> for CostJson {
    fn from(r: &CostReport) -> Self {
        Self {
            name: r.name.clone(),
            total_params: r.total_params,
            attn_params: r.attn_params,
            mlp_params: r.mlp_params,
            sigma_params: r.sigma_params,
            embed_params: r.embed_params,
            norm_params: r.norm_params,
            head_params: r.head_params,
            tokens: r.tokens,
            flops_forward: r.flops_forward,
            flops_per_token: r.flops_per_token,
            breakdown: r.breakdown.clone(),
            convention: r.convention.clone(),
        }
    }
}

impl From<CostJson> for CostReport {
    fn from(j: CostJson) -> Self {
        Self {
            name: j.name,
            total_params: j.total_params,
            attn_params: j.attn_params,
            mlp_params: j.mlp_params,
            sigma_params: j.sigma_params,
            embed_params: j.embed_params,
            norm_params: j.norm_params,
            head_params: j.head_params,
            tokens: j.tokens,
            flops_forward: j.flops_forward,
            flops_per_token: j.flops_per_token,
            breakdown: j.breakdown,
            convention: j.convention,
        }
    }
}

/// The text `gka count` prints for `args`.
pub fn render(args: &CountArgs) -> Result<String> {
    if args.list {
        return Ok(PRESET_NAMES.iter().map(|p| format!("{p}\n")).collect());
    }
    let configs = if args.all {
        PRESET_NAMES
            .iter()
            .map(|p| Ok(gka_core::model::ModelConfig::preset(p)?))
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![args.model.resolve("gka-ti")?.0]
    };
    if args.tokens == Some(0) {
        bail!(gka_core::Error::Config("--tokens must be >= 1".into()));
    }
    let reports: Vec<CostReport> = configs.iter().map(|c| count_flops(c, args.tokens)).collect();
    Ok(match args.format {
        Format::Table => reports.iter().map(|r| r.to_string()).collect::<Vec<_>>().join("\n"),
        Format::Json => {
            let json: Vec<CostJson> = reports.iter().map(CostJson::from).collect();
            let text = if args.all {
                serde_json::to_string_pretty(&json)?
            } else {
                serde_json::to_string_pretty(&json[0])?
            };
            text + "\n"
        }
    })
}

pub fn run(args: &CountArgs) -> Result<u8> {
    crate::write_stdout(&render(args)?)?;
    Ok(0)
}
