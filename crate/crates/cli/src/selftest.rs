use anyhow::Result;
use gka_core::analysis::rollout_matrix;
use gka_core::gka::{gka_forward, AttentionCapture, GkaLayerParams};
use gka_core::gradcheck::{grad_check, GradCheckOptions, GradTarget};
use gka_core::model::{count_params, ModelConfig};
use gka_core::streaming::{gka_forward_streaming, TileConfig};
use gka_core::{MaskSpec, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Globals, EXIT_ACCEPTANCE};

type Check = (&'static str, Box<dyn Fn(u64) -> Result<bool>>);

fn checks() -> Vec<Check> {
    vec![
        (
            "gka-ti parameter total within 1% of 4.38M, 36 bandwidths",
            Box::new(|_| {
                let r = count_params(&ModelConfig::preset("gka-ti")?);
                Ok((r.total_params as f64 / 4.38e6 - 1.0).abs() <= 0.01 && r.sigma_params == 36)
            }),
        ),
        (
            "streaming matches dense kernel attention (double, causal window)",
            Box::new(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = Tensor::<f64>::randn(&[2, 70, 16], 1.0, &mut rng);
                let p = GkaLayerParams::identity(16, 2)?;
                let mask = MaskSpec::causal_window(9)?;
                let dense = gka_forward(&x, &p, &mask, 0, None)?;
                let (s, _) = gka_forward_streaming(&x, &p, &mask, 0, TileConfig::square(16))?;
                Ok(s.rel_diff(&dense) <= 1e-10)
            }),
        ),
        (
            "kernel attention gradients match finite differences; corrupted gradients do not",
            Box::new(|seed| {
                let ok = grad_check(
                    GradTarget::Gka,
                    &GradCheckOptions {
                        seed,
                        ..Default::default()
                    },
                )?;
                let bad = grad_check(
                    GradTarget::Gka,
                    &GradCheckOptions {
                        seed,
                        corrupt: true,
                        ..Default::default()
                    },
                )?;
                Ok(ok.passed() && !bad.passed())
            }),
        ),
        (
            "rollout of uniform attention matches its closed form",
            Box::new(|_| {
                let n = 10;
                let mut cap = AttentionCapture::<f64>::new();
                cap.record(0, Tensor::full(&[1, 1, n, n], 1.0 / n as f64), None);
                let r = rollout_matrix(&cap, 0, None)?;
                let want = 0.5 / n as f64;
                Ok((1..n).all(|j| (r.at(&[0, j]) - want).abs() < 1e-12))
            }),
        ),
    ]
}

pub fn run(globals: &Globals) -> Result<u8> {
    let mut failed = 0;
    for (name, check) in checks() {
        let ok = check(globals.seed)?;
        println!("{} {name}", if ok { "PASS" } else { "FAIL" });
        failed += usize::from(!ok);
    }
    Ok(if failed == 0 { 0 } else { EXIT_ACCEPTANCE })
}
