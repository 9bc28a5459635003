//! Library results checked against small independent reimplementations
//! written directly from the definitions.

use gka_core::gka::{gka_forward, AttentionCapture, FeaturePrep, GkaLayerParams};
use gka_core::mha::{mha_forward_with_probs, MhaLayerParams};
use gka_core::model::{count_flops, count_params, ModelConfig};
use gka_core::nn::Linear;
use gka_core::streaming::{gka_forward_streaming, TileConfig};
use gka_core::train::{bits_per_byte, cross_entropy};
use gka_core::{MaskSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn allowed(mask: &MaskSpec, layer: usize, i: usize, j: usize) -> bool {
    match mask.layer_pattern.as_deref() {
        Some(p) => {
            let c = p.as_bytes()[layer % p.len()];
            j <= i && (c == b'L' || i - j < mask.window)
        }
        None => match mask.kind {
            gka_core::MaskKind::None => true,
            gka_core::MaskKind::Causal => j <= i,
            gka_core::MaskKind::CausalWindow => j <= i && i - j < mask.window,
        },
    }
}

/// Direct evaluation: per head, `K_ij = exp(-|x_i - x_j|² / 2σ²)` on allowed
/// pairs, `W = K / (Σ_j K_ij + ε)`, `y_i = Σ_j W_ij x_j`, then `y·W_O + b_O`.
fn gka_oracle(
    x: &[Mat],
    log_sigma: &[f64],
    w_o: &Mat,
    b_o: &[f64],
    mask: &MaskSpec,
    layer: usize,
) -> (Vec<Mat>, Vec<Vec<Mat>>) {
    let heads = log_sigma.len();
    let d = w_o.len();
    let hd = d / heads;
    let mut outs = Vec::new();
    let mut weights = Vec::new();
    for seq in x {
        let n = seq.len();
        let mut concat = vec![vec![0.0; d]; n];
        let mut per_head = Vec::new();
        for (h, ls) in log_sigma.iter().enumerate() {
            let sigma = ls.exp();
            let cols = h * hd..(h + 1) * hd;
            let mut w = vec![vec![0.0; n]; n];
            for i in 0..n {
                let mut sum = 0.0;
                for j in 0..n {
                    if allowed(mask, layer, i, j) {
                        let dist: f64 = cols.clone().map(|c| (seq[i][c] - seq[j][c]).powi(2)).sum();
                        w[i][j] = (-dist / (2.0 * sigma * sigma)).exp();
                        sum += w[i][j];
                    }
                }
                for v in &mut w[i] {
                    *v /= sum + 1e-12;
                }
                for c in cols.clone() {
                    concat[i][c] = (0..n).map(|j| w[i][j] * seq[j][c]).sum();
                }
            }
            per_head.push(w);
        }
        let y = concat
            .iter()
            .map(|row| {
                (0..d)
                    .map(|o| b_o[o] + (0..d).map(|k| row[k] * w_o[k][o]).sum::<f64>())
                    .collect()
            })
            .collect();
        outs.push(y);
        weights.push(per_head);
    }
    (outs, weights)
}

fn to_nested(t: &Tensor<f64>) -> Vec<Mat> {
    let s = t.shape();
    let (b, n, d) = (s[0], s[1], s[2]);
    (0..b)
        .map(|bi| {
            (0..n)
                .map(|i| t.data()[(bi * n + i) * d..(bi * n + i + 1) * d].to_vec())
                .collect()
        })
        .collect()
}

fn to_mat(t: &Tensor<f64>) -> Mat {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

fn max_gap(a: &[Mat], b: &[Mat]) -> f64 {
    a.iter()
        .flatten()
        .flatten()
        .zip(b.iter().flatten().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn random_gka(d: usize, heads: usize, rng: &mut ChaCha8Rng) -> GkaLayerParams<f64> {
    let mut p = GkaLayerParams::<f64>::identity(d, heads).unwrap();
    p.log_sigma = Tensor::from_fn(&[heads], |_| rng.gen_range(-0.3..1.2));
    p.w_o = Tensor::randn(&[d, d], 0.4, rng);
    p.b_o = Some(Tensor::randn(&[d], 0.2, rng));
    p
}

fn masks() -> Vec<MaskSpec> {
    vec![
        MaskSpec::none(),
        MaskSpec::causal(),
        MaskSpec::causal_window(3).unwrap(),
        MaskSpec::patterned("SSL", 2).unwrap(),
    ]
}

#[test]
fn kernel_attention_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for mask in masks() {
        for layer in 0..3 {
            let (b, n, d, heads) = (2, 9, 12, 3);
            let x = Tensor::<f64>::randn(&[b, n, d], 1.0, &mut rng);
            let p = random_gka(d, heads, &mut rng);
            let mut cap = AttentionCapture::new();
            let y = gka_forward(&x, &p, &mask, layer, Some(&mut cap)).unwrap();
            let (want_y, want_w) = gka_oracle(
                &to_nested(&x),
                p.log_sigma.data(),
                &to_mat(&p.w_o),
                p.b_o.as_ref().unwrap().data(),
                &mask,
                layer,
            );
            assert!(max_gap(&to_nested(&y), &want_y) < 1e-12, "{mask:?} layer {layer}");
            for s in 0..b {
                for h in 0..heads {
                    let got = to_mat(&cap.matrix(layer, h, s).unwrap());
                    assert!(max_gap(&[got], &[want_w[s][h].clone()]) < 1e-14);
                }
            }
        }
    }
}

#[test]
fn tiled_kernel_attention_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for mask in masks() {
        for tile in [1, 4, 7, 64] {
            let x = Tensor::<f64>::randn(&[1, 23, 8], 1.0, &mut rng);
            let p = random_gka(8, 2, &mut rng);
            let (y, _) = gka_forward_streaming(
                &x,
                &p,
                &mask,
                1,
                TileConfig {
                    tile_rows: tile,
                    tile_cols: tile + 2,
                },
            )
            .unwrap();
            let (want, _) = gka_oracle(
                &to_nested(&x),
                p.log_sigma.data(),
                &to_mat(&p.w_o),
                p.b_o.as_ref().unwrap().data(),
                &mask,
                1,
            );
            assert!(max_gap(&to_nested(&y), &want) < 1e-12, "{mask:?} tile {tile}");
        }
    }
}

#[test]
fn identical_tokens_average_to_themselves() {
    let row: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
    let data: Vec<f64> = std::iter::repeat_n(row.clone(), 5).flatten().collect();
    let x = Tensor::new(&[1, 5, 6], data).unwrap();
    let p = GkaLayerParams::<f64>::identity(6, 2).unwrap();
    let y = gka_forward(&x, &p, &MaskSpec::none(), 0, None).unwrap();
    // Five unit kernels per row: W_ij = 1 / (5 + ε).
    let scale = 5.0 / (5.0 + 1e-12);
    for i in 0..5 {
        for (c, v) in row.iter().enumerate() {
            assert!((y.at(&[0, i, c]) - v * scale).abs() < 1e-15);
        }
    }
}

#[test]
fn unit_norm_features_change_the_kernel_but_not_the_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::<f64>::randn(&[1, 6, 4], 1.0, &mut rng);
    let mut p = GkaLayerParams::<f64>::identity(4, 1).unwrap();
    p.prep = FeaturePrep {
        rope_base: None,
        unit_norm: true,
    };
    let mut cap = AttentionCapture::new();
    let y = gka_forward(&x, &p, &MaskSpec::causal(), 0, Some(&mut cap)).unwrap();
    let rows = to_nested(&x).remove(0);
    let unit: Mat = rows
        .iter()
        .map(|r| {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / norm).collect()
        })
        .collect();
    let (_, w) = gka_oracle(
        &[unit],
        &[0.0],
        &to_mat(&Tensor::eye(4)),
        &[0.0; 4],
        &MaskSpec::causal(),
        0,
    );
    let w = &w[0][0];
    for i in 0..6 {
        for c in 0..4 {
            let want: f64 = (0..6).map(|j| w[i][j] * rows[j][c]).sum();
            assert!((y.at(&[0, i, c]) - want).abs() < 1e-12);
        }
    }
    assert!(max_gap(&[to_mat(&cap.matrix(0, 0, 0).unwrap())], std::slice::from_ref(w)) < 1e-12);
}

fn linear(d: usize, rng: &mut ChaCha8Rng) -> Linear<f64> {
    Linear {
        w: Tensor::randn(&[d, d], 0.5, rng),
        b: Some(Tensor::randn(&[d], 0.1, rng)),
    }
}

fn apply(l: &Linear<f64>, x: &Mat) -> Mat {
    let w = to_mat(&l.w);
    let b = l.b.as_ref().unwrap().data();
    x.iter()
        .map(|r| {
            (0..w[0].len())
                .map(|o| b[o] + (0..r.len()).map(|k| r[k] * w[k][o]).sum::<f64>())
                .collect()
        })
        .collect()
}

#[test]
fn dot_product_attention_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, d, heads) = (7, 8, 2);
    let hd = d / heads;
    for with_v in [true, false] {
        for mask in masks() {
            let p = MhaLayerParams {
                heads,
                q: linear(d, &mut rng),
                k: linear(d, &mut rng),
                v: with_v.then(|| linear(d, &mut rng)),
                o: linear(d, &mut rng),
                rope_base: None,
            };
            let x = Tensor::<f64>::randn(&[1, n, d], 1.0, &mut rng);
            let (y, probs) = mha_forward_with_probs(&x, &p, &mask, 2).unwrap();
            let xs = to_nested(&x).remove(0);
            let (q, k) = (apply(&p.q, &xs), apply(&p.k, &xs));
            let v = p.v.as_ref().map_or(xs.clone(), |l| apply(l, &xs));
            let mut concat = vec![vec![0.0; d]; n];
            for h in 0..heads {
                let cols = h * hd..(h + 1) * hd;
                for i in 0..n {
                    let logits: Vec<Option<f64>> = (0..n)
                        .map(|j| {
                            allowed(&mask, 2, i, j)
                                .then(|| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt())
                        })
                        .collect();
                    let m = logits.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = logits.iter().flatten().map(|l| (l - m).exp()).sum();
                    for j in 0..n {
                        let pij = logits[j].map_or(0.0, |l| (l - m).exp() / z);
                        assert!((probs.at(&[0, h, i, j]) - pij).abs() < 1e-12);
                        for c in cols.clone() {
                            concat[i][c] += pij * v[j][c];
                        }
                    }
                }
            }
            let want = apply(&p.o, &concat);
            assert!(max_gap(&to_nested(&y), &[want]) < 1e-12);
        }
    }
}

/// Parameter count of a ViT written out term by term.
fn vit_params(depth: u64, d: u64, heads: u64, projections: u64, classes: u64) -> u64 {
    let patch = 16 * 16 * 3;
    let tokens = 14 * 14 + 1;
    let embed = patch * d + d + d + tokens * d;
    let attn = projections * (d * d + d) + if projections == 1 { heads } else { 0 };
    let mlp = d * 4 * d + 4 * d + 4 * d * d + d;
    let norms = 2 * 2 * d;
    embed + depth * (attn + mlp + norms) + 2 * d + d * classes + classes
}

#[test]
fn vit_parameter_counts_follow_the_layer_inventory() {
    for (name, depth, d, heads, proj) in [
        ("deit-ti", 12, 192, 3, 4),
        ("deit-s", 12, 384, 6, 4),
        ("deit-b", 12, 768, 12, 4),
        ("gka-ti", 12, 192, 3, 1),
        ("gka-s", 12, 384, 6, 1),
        ("gka-b", 12, 768, 12, 1),
        ("vlt-ti", 12, 192, 3, 3),
    ] {
        let r = count_params(&ModelConfig::preset(name).unwrap());
        assert_eq!(r.total_params, vit_params(depth, d, heads, proj, 1000), "{name}");
        assert_eq!(r.sigma_params, if proj == 1 { depth * heads } else { 0 });
    }
}

#[test]
fn parameter_totals_hit_reference_values() {
    for (name, millions) in [
        ("deit-ti", 5.72),
        ("deit-s", 22.05),
        ("deit-b", 86.57),
        ("gka-ti", 4.38),
        ("gka-s", 16.73),
        ("gka-b", 65.31),
        ("vlt-ti", 5.28),
    ] {
        let total = count_params(&ModelConfig::preset(name).unwrap()).total_params as f64;
        assert!((total / (millions * 1e6) - 1.0).abs() <= 0.01, "{name}: {total}");
    }
    let lm = count_flops(&ModelConfig::preset("gka-lm-d20").unwrap(), None);
    assert!((lm.total_params as f64 / 378e6 - 1.0).abs() <= 0.02);
    assert!((lm.flops_per_token.unwrap() as f64 / 2.4143e9 - 1.0).abs() <= 0.05);
}

#[test]
fn kernel_attention_saves_three_quarters_of_attention_parameters() {
    for size in ["ti", "s", "b"] {
        let g = count_params(&ModelConfig::preset(&format!("gka-{size}")).unwrap());
        let s = count_params(&ModelConfig::preset(&format!("deit-{size}")).unwrap());
        assert_eq!(4 * (g.attn_params - g.sigma_params), s.attn_params);
        let saving = 1.0 - g.attn_params as f64 / s.attn_params as f64;
        assert!((saving - 0.75).abs() <= 0.01);
    }
}

#[test]
fn flop_reductions_hit_reference_deltas() {
    for (size, delta) in [("ti", -21.1), ("s", -22.7), ("b", -23.8)] {
        let g = count_flops(&ModelConfig::preset(&format!("gka-{size}")).unwrap(), None);
        let s = count_flops(&ModelConfig::preset(&format!("deit-{size}")).unwrap(), None);
        let got = 100.0 * (g.flops_forward as f64 / s.flops_forward as f64 - 1.0);
        assert!((got - delta).abs() <= 2.0, "{size}: {got}");
        let parts: u64 = g.breakdown.iter().map(|(_, v)| v).sum();
        assert_eq!(parts, g.flops_forward);
    }
}

#[test]
fn cross_entropy_and_bits_per_byte_match_log_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = Tensor::<f64>::randn(&[6, 11], 2.0, &mut rng);
    let targets: Vec<Option<u32>> = (0..6).map(|r| (r != 2).then(|| rng.gen_range(0..11))).collect();
    let out = cross_entropy(&logits, &targets).unwrap();
    let mut nats = 0.0;
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = t {
            let row = logits.row(r);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            nats -= (row[*t as usize].exp() / z).ln();
        }
    }
    assert!((out.total_nats - nats).abs() < 1e-12);
    assert_eq!(out.count, 5);
    let bpb = bits_per_byte(out.total_nats, 5).unwrap();
    assert!((bpb - nats / 5.0 / 2f64.ln()).abs() < 1e-12);
    assert!(out.grad.row(2).iter().all(|&g| g == 0.0));
}
