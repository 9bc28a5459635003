use anyhow::Result;
use clap::Args;
use gka_core::gradcheck::{grad_check, GradCheckOptions, GradTarget};

use crate::Globals;

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Target name, or `all` for every target.
    #[arg(long, default_value = "all")]
    pub target: String,
    /// Number of consecutive seeds, starting at `--seed`.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Negate the analytic gradients; every check should then fail.
    #[arg(long)]
    pub corrupt: bool,
    /// Print every parameter group.
    #[arg(long)]
    pub verbose: bool,
}

/// Always runs in double precision. Exits with the numeric-failure status
/// when any check fails.
pub fn run(args: &GradcheckArgs, globals: &Globals) -> Result<u8> {
    let targets: Vec<GradTarget> = if args.target == "all" {
        GradTarget::ALL.to_vec()
    } else {
        vec![args.target.parse()?]
    };
    let mut failures = 0;
    for t in targets {
        for seed in globals.seed..globals.seed + args.seeds.max(1) {
            let report = grad_check(
                t,
                &GradCheckOptions {
                    seed,
                    corrupt: args.corrupt,
                    ..GradCheckOptions::default()
                },
            )?;
            if args.verbose {
                println!("{report}");
            } else {
                println!(
                    "{:<12} seed {:<4} max rel err {:.3e}  {}",
                    t.name(),
                    seed,
                    report.max_rel_err(),
                    if report.passed() { "PASS" } else { "FAIL" }
                );
            }
            failures += usize::from(!report.passed());
        }
    }
    if failures > 0 {
        println!("{failures} check(s) failed");
        Ok(crate::EXIT_NUMERIC)
    } else {
        println!("all checks passed");
        Ok(0)
    }
}
