//! Finite-difference verification suites over the op catalog, the network
//! blocks, and the assembled model. The CLI's `gradcheck` subcommand and the
//! acceptance tests both run these.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    BlockConfig, ConvBlock, HpcaBlock, HpsaBlock, ParamEntry, RagBlock, SegmentationHead,
    SurvivalHead, TransformerBlock, VanillaGate,
};
use crate::model::{ModelConfig, XSurv};
use crate::tensor::{
    concat, conv3d, dropout_with_mask, gradient_check, gradient_check_directional,
    gradient_check_sampled, instance_norm, layer_norm, linear, matmul, Element, GradCheckReport,
    Tensor,
};

pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

pub fn all_passed(entries: &[SuiteEntry]) -> bool {
    entries.iter().all(|e| e.report.pass)
}

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rt(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn rt_off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::param(
        shape,
        (0..n)
            .map(|_| {
                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                sign * rng.gen_range(0.1..1.1)
            })
            .collect(),
    )
}

fn rt_pos(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| rng.gen_range(0.2..1.5)).collect())
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(2..=5)
}

type OpCase = (
    Vec<Tensor<f64>>,
    Box<dyn Fn(&[Tensor<f64>]) -> Tensor<f64>>,
);

/// Every catalog op on `rounds` random small shapes each, 64-bit, full
/// element coverage.
pub fn verify_ops(rounds: u64) -> Vec<SuiteEntry> {
    let mut out = Vec::new();
    let builders: Vec<(&str, Box<dyn Fn(&mut ChaCha8Rng) -> OpCase>)> = vec![
        ("add", Box::new(|rng| {
            let (d1, d2) = (dim(rng), dim(rng));
            let s = [d1, d2];
            let (a, b) = (rt(rng, &s), rt(rng, &s));
            (vec![a, b], Box::new(|t: &[Tensor<f64>]| t[0].add(&t[1]).unwrap().sum()))
        })),
        ("subtract", Box::new(|rng| {
            let (d1, d2) = (dim(rng), dim(rng));
            let s = [d1, d2];
            let (a, b) = (rt(rng, &s), rt(rng, &s));
            (vec![a, b], Box::new(|t: &[Tensor<f64>]| t[0].sub(&t[1]).unwrap().pow_scalar(2.0).sum()))
        })),
        ("multiply", Box::new(|rng| {
            let (d1, d2, d3) = (dim(rng), dim(rng), dim(rng));
            let s = [d1, d2, d3];
            let (a, b) = (rt(rng, &s), rt(rng, &s));
            (vec![a, b], Box::new(|t: &[Tensor<f64>]| t[0].mul(&t[1]).unwrap().sum()))
        })),
        ("divide", Box::new(|rng| {
            let d1 = dim(rng) * 2;
            let s = [d1];
            let (a, b) = (rt(rng, &s), rt_pos(rng, &s));
            (vec![a, b], Box::new(|t: &[Tensor<f64>]| t[0].div(&t[1]).unwrap().sum()))
        })),
        ("matmul", Box::new(|rng| {
            let (m, k, n) = (dim(rng), dim(rng), dim(rng));
            let (a, b) = (rt(rng, &[m, k]), rt(rng, &[k, n]));
            (vec![a, b], Box::new(|t: &[Tensor<f64>]| matmul(&t[0], &t[1]).unwrap().pow_scalar(2.0).sum()))
        })),
        ("matmul_batched", Box::new(|rng| {
            let (bt, m, k, n) = (dim(rng), dim(rng), dim(rng), dim(rng));
            let (a, b) = (rt(rng, &[bt, m, k]), rt(rng, &[bt, k, n]));
            (vec![a, b], Box::new(|t: &[Tensor<f64>]| matmul(&t[0], &t[1]).unwrap().pow_scalar(2.0).sum()))
        })),
        ("concat", Box::new(|rng| {
            let (d1, d2, inner) = (dim(rng), dim(rng), dim(rng));
            let a = rt(rng, &[2, d1, inner]);
            let b = rt(rng, &[2, d2, inner]);
            (vec![a, b], Box::new(|t: &[Tensor<f64>]| {
                concat(&[t[0].clone(), t[1].clone()], 1).unwrap().pow_scalar(2.0).sum()
            }))
        })),
        ("slice", Box::new(|rng| {
            let d = dim(rng) + 2;
            let a = rt(rng, &[3, d, 2]);
            let start = rng.gen_range(0..d - 1);
            let len = rng.gen_range(1..=d - start);
            (vec![a], Box::new(move |t: &[Tensor<f64>]| {
                t[0].narrow(1, start, len).unwrap().pow_scalar(2.0).sum()
            }))
        })),
        ("reshape_permute", Box::new(|rng| {
            let (a1, a2, a3) = (dim(rng), dim(rng), dim(rng));
            let a = rt(rng, &[a1, a2, a3]);
            (vec![a], Box::new(move |t: &[Tensor<f64>]| {
                t[0].permute(&[2, 0, 1])
                    .unwrap()
                    .reshape(&[a3 * a1, a2])
                    .unwrap()
                    .pow_scalar(2.0)
                    .sum()
            }))
        })),
        ("exp", Box::new(|rng| {
            let (d1, d2) = (dim(rng), dim(rng));
            let a = rt(rng, &[d1, d2]);
            (vec![a], Box::new(|t: &[Tensor<f64>]| t[0].exp().sum()))
        })),
        ("log", Box::new(|rng| {
            let d1 = dim(rng) * 2;
            let a = rt_pos(rng, &[d1]);
            (vec![a], Box::new(|t: &[Tensor<f64>]| t[0].log().sum()))
        })),
        ("relu", Box::new(|rng| {
            let d1 = dim(rng) * 3;
            let a = rt_off_kink(rng, &[d1]);
            (vec![a], Box::new(|t: &[Tensor<f64>]| t[0].relu().pow_scalar(2.0).sum()))
        })),
        ("leaky_relu", Box::new(|rng| {
            let d1 = dim(rng) * 3;
            let a = rt_off_kink(rng, &[d1]);
            (vec![a], Box::new(|t: &[Tensor<f64>]| t[0].leaky_relu(0.01).pow_scalar(2.0).sum()))
        })),
        ("sigmoid", Box::new(|rng| {
            let (d1, d2) = (dim(rng), dim(rng));
            let a = rt(rng, &[d1, d2]);
            (vec![a], Box::new(|t: &[Tensor<f64>]| t[0].sigmoid().pow_scalar(2.0).sum()))
        })),
        ("gelu", Box::new(|rng| {
            let d1 = dim(rng) * 2;
            let a = rt(rng, &[d1]);
            (vec![a], Box::new(|t: &[Tensor<f64>]| t[0].gelu().sum()))
        })),
        ("softmax", Box::new(|rng| {
            let (r, c) = (dim(rng), dim(rng) + 1);
            let a = rt(rng, &[r, c]);
            let w = rt(rng, &[r, c]);
            (vec![a, w], Box::new(|t: &[Tensor<f64>]| {
                t[0].softmax(1).unwrap().mul(&t[1]).unwrap().sum()
            }))
        })),
        ("conv3d", Box::new(|rng| {
            let (cin, cout, side) = (dim(rng).min(3), dim(rng).min(3), dim(rng).max(3));
            let x = rt(rng, &[1, cin, side, side, side]);
            let w = rt(rng, &[cout, cin, 3, 3, 3]);
            let b = rt(rng, &[cout]);
            (vec![x, w, b], Box::new(|t: &[Tensor<f64>]| {
                conv3d(&t[0], &t[1], Some(&t[2]), 1, 1).unwrap().pow_scalar(2.0).sum()
            }))
        })),
        ("conv3d_strided", Box::new(|rng| {
            let side = dim(rng).max(4);
            let x = rt(rng, &[1, 2, side, side, side]);
            let w = rt(rng, &[2, 2, 3, 3, 3]);
            (vec![x, w], Box::new(|t: &[Tensor<f64>]| {
                conv3d(&t[0], &t[1], None, 2, 1).unwrap().pow_scalar(2.0).sum()
            }))
        })),
        ("trilinear_upsample", Box::new(|rng| {
            let (d, h, w) = (dim(rng), dim(rng), dim(rng));
            let x = rt(rng, &[1, 2, d, h, w]);
            (vec![x], Box::new(|t: &[Tensor<f64>]| {
                t[0].upsample_trilinear_2x().unwrap().pow_scalar(2.0).sum()
            }))
        })),
        ("instance_norm", Box::new(|rng| {
            let (c, side) = (dim(rng).min(3), dim(rng).max(3));
            let x = rt(rng, &[2, c, side, side, side]);
            let g = rt_pos(rng, &[c]);
            let b = rt(rng, &[c]);
            (vec![x, g, b], Box::new(|t: &[Tensor<f64>]| {
                instance_norm(&t[0], &t[1], &t[2], 1e-5).unwrap().pow_scalar(2.0).sum()
            }))
        })),
        ("layer_norm", Box::new(|rng| {
            let (r, f) = (dim(rng) * 2, dim(rng) + 2);
            let x = rt(rng, &[r, f]);
            let g = rt_pos(rng, &[f]);
            let b = rt(rng, &[f]);
            (vec![x, g, b], Box::new(|t: &[Tensor<f64>]| {
                layer_norm(&t[0], &t[1], &t[2], 1e-5).unwrap().pow_scalar(2.0).sum()
            }))
        })),
        ("linear", Box::new(|rng| {
            let (bt, fi, fo) = (dim(rng), dim(rng) + 1, dim(rng) + 1);
            let x = rt(rng, &[bt, fi]);
            let w = rt(rng, &[fi, fo]);
            let b = rt(rng, &[fo]);
            (vec![x, w, b], Box::new(|t: &[Tensor<f64>]| {
                linear(&t[0], &t[1], Some(&t[2])).unwrap().pow_scalar(2.0).sum()
            }))
        })),
        ("max_pool", Box::new(|rng| {
            let side = dim(rng).max(4);
            let n = 2 * side * side * side;
            let data: Vec<f64> = (0..n).map(|i| rng.gen_range(-1.0..1.0) + i as f64 * 1e-3).collect();
            let x = Tensor::param(&[1, 2, side, side, side], data);
            (vec![x], Box::new(|t: &[Tensor<f64>]| {
                t[0].max_pool3d(2, 2).unwrap().pow_scalar(2.0).sum()
            }))
        })),
        ("avg_pool", Box::new(|rng| {
            let side = dim(rng).max(4);
            let x = rt(rng, &[1, 2, side, side, side]);
            (vec![x], Box::new(|t: &[Tensor<f64>]| {
                t[0].avg_pool3d(2, 2).unwrap().pow_scalar(2.0).sum()
            }))
        })),
        ("global_avg_pool", Box::new(|rng| {
            let (d, h, w) = (dim(rng), dim(rng), dim(rng));
            let x = rt(rng, &[2, 3, d, h, w]);
            (vec![x], Box::new(|t: &[Tensor<f64>]| {
                t[0].global_avg_pool().unwrap().pow_scalar(2.0).sum()
            }))
        })),
        ("dropout", Box::new(|rng| {
            let n = dim(rng) * 4;
            let x = rt(rng, &[n]);
            let mask: Vec<f64> = (0..n)
                .map(|_| if rng.gen::<f64>() < 0.7 { 1.0 / 0.7 } else { 0.0 })
                .collect();
            (vec![x], Box::new(move |t: &[Tensor<f64>]| {
                dropout_with_mask(&t[0], mask.clone()).pow_scalar(2.0).sum()
            }))
        })),
        ("sum_mean", Box::new(|rng| {
            let (d1, d2) = (dim(rng), dim(rng));
            let a = rt(rng, &[d1, d2]);
            (vec![a], Box::new(|t: &[Tensor<f64>]| {
                t[0].mul(&t[0]).unwrap().mean().add(&t[0].sum()).unwrap()
            }))
        })),
    ];

    for (name, build) in &builders {
        for round in 0..rounds {
            let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE + round * 7901);
            let (inputs, f) = build(&mut rng);
            let report = gradient_check(&*f, &inputs, STEP, TOL);
            out.push(SuiteEntry {
                name: format!("op::{} (shape round {})", name, round),
                report,
            });
        }
    }
    out
}

fn params_of(entries: Vec<ParamEntry<f64>>) -> Vec<Tensor<f64>> {
    entries.into_iter().map(|e| e.tensor).collect()
}

fn check_with_params<F>(leaves: Vec<Tensor<f64>>, f: F, seed: u64) -> GradCheckReport
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    gradient_check_sampled(f, &leaves, STEP, TOL, 8, seed)
}

/// Every block type on `rounds` random small shapes, 64-bit, sampled elements
/// per tensor (the analytic gradient is always computed in full).
pub fn verify_blocks(rounds: u64) -> Vec<SuiteEntry> {
    let mut out = Vec::new();
    for round in 0..rounds {
        let mut rng = ChaCha8Rng::seed_from_u64(0xB10C + round * 6151);
        let side = rng.gen_range(4..=6usize);
        let c = 2 * rng.gen_range(1..=2usize);
        let window = rng.gen_range(2..=3usize);

        let cfg = BlockConfig {
            channels_in: c,
            channels_out: c,
            n_conv: rng.gen_range(1..=2),
            n_trans: 2,
            num_heads: 2,
            window: [window; 3],
        };

        {
            let block = ConvBlock::<f64>::new(&cfg, &mut rng).unwrap();
            let x = rt(&mut rng, &[1, c, side, side, side]);
            let mut entries = Vec::new();
            block.append_params("p", &mut entries);
            let mut leaves = vec![x.clone()];
            leaves.extend(params_of(entries));
            out.push(SuiteEntry {
                name: format!("block::conv_block (round {})", round),
                report: check_with_params(leaves, |_| block.forward(&x).unwrap().pow_scalar(2.0).sum(), round),
            });
        }
        {
            let shifted = round % 2 == 1;
            let block = TransformerBlock::<f64>::new_self(&cfg, shifted, &mut rng).unwrap();
            let x = rt(&mut rng, &[1, c, side, side, side]);
            let mut entries = Vec::new();
            block.append_params("p", &mut entries);
            let mut leaves = vec![x.clone()];
            leaves.extend(params_of(entries));
            out.push(SuiteEntry {
                name: format!("block::windowed_self_attention (round {}, shifted {})", round, shifted),
                report: check_with_params(leaves, |_| block.forward_self(&x).unwrap().pow_scalar(2.0).sum(), round),
            });
        }
        {
            let shifted = round % 2 == 0;
            let block = TransformerBlock::<f64>::new_cross(&cfg, shifted, &mut rng).unwrap();
            let x = rt(&mut rng, &[1, c, side, side, side]);
            let y = rt(&mut rng, &[1, c, side, side, side]);
            let mut entries = Vec::new();
            block.append_params("p", &mut entries);
            let mut leaves = vec![x.clone(), y.clone()];
            leaves.extend(params_of(entries));
            out.push(SuiteEntry {
                name: format!("block::windowed_cross_attention (round {})", round),
                report: check_with_params(
                    leaves,
                    |_| block.forward_cross(&x, &y).unwrap().pow_scalar(2.0).sum(),
                    round,
                ),
            });
        }
        {
            let block = HpsaBlock::<f64>::new(&cfg, &mut rng).unwrap();
            let x = rt(&mut rng, &[1, c, side, side, side]);
            let mut entries = Vec::new();
            block.append_params("p", &mut entries);
            let mut leaves = vec![x.clone()];
            leaves.extend(params_of(entries));
            out.push(SuiteEntry {
                name: format!("block::hpsa (round {})", round),
                report: check_with_params(leaves, |_| block.forward(&x).unwrap().pow_scalar(2.0).sum(), round),
            });
        }
        {
            let block = HpcaBlock::<f64>::new(&cfg, &mut rng).unwrap();
            let x = rt(&mut rng, &[1, c, side, side, side]);
            let y = rt(&mut rng, &[1, c, side, side, side]);
            let mut entries = Vec::new();
            block.append_params("p", &mut entries);
            let mut leaves = vec![x.clone(), y.clone()];
            leaves.extend(params_of(entries));
            out.push(SuiteEntry {
                name: format!("block::hpca (round {})", round),
                report: check_with_params(
                    leaves,
                    |_| block.forward(&x, &y).unwrap().pow_scalar(2.0).sum(),
                    round,
                ),
            });
        }
        {
            // Gates sit one 2x upsampling below the skip grid.
            let half = (side / 2).max(1);
            let even = half * 2;
            let rag = RagBlock::<f64>::new(c, c, &mut rng);
            let x = rt(&mut rng, &[1, c, even, even, even]);
            let g1 = rt(&mut rng, &[1, c, half, half, half]);
            let g2 = rt(&mut rng, &[1, c, half, half, half]);
            let mut entries = Vec::new();
            rag.append_params("p", &mut entries);
            let mut leaves = vec![x.clone(), g1.clone(), g2.clone()];
            leaves.extend(params_of(entries));
            out.push(SuiteEntry {
                name: format!("block::rag (round {})", round),
                report: check_with_params(
                    leaves,
                    |_| {
                        let o = rag.forward(&x, &g1, &g2).unwrap();
                        o.x_pt.pow_scalar(2.0).sum().add(&o.x_mln.pow_scalar(2.0).sum()).unwrap()
                    },
                    round,
                ),
            });
        }
        {
            let half = (side / 2).max(1);
            let even = half * 2;
            let gate = VanillaGate::<f64>::new(c, c, &mut rng);
            let x = rt(&mut rng, &[1, c, even, even, even]);
            let g = rt(&mut rng, &[1, c, half, half, half]);
            let mut entries = Vec::new();
            gate.append_params("p", &mut entries);
            let mut leaves = vec![x.clone(), g.clone()];
            leaves.extend(params_of(entries));
            out.push(SuiteEntry {
                name: format!("block::vanilla_gate (round {})", round),
                report: check_with_params(
                    leaves,
                    |_| gate.forward(&x, &g).unwrap().pow_scalar(2.0).sum(),
                    round,
                ),
            });
        }
        {
            let head = SegmentationHead::<f64>::new(c, 1, &mut rng);
            let x = rt(&mut rng, &[1, c, side, side, side]);
            let mut entries = Vec::new();
            head.append_params("p", &mut entries);
            let mut leaves = vec![x.clone()];
            leaves.extend(params_of(entries));
            out.push(SuiteEntry {
                name: format!("block::segmentation_head (round {})", round),
                report: check_with_params(leaves, |_| head.forward(&x).unwrap().pow_scalar(2.0).sum(), round),
            });
        }
        {
            let feats = 4 + 2 * (round as usize % 3);
            let head = SurvivalHead::<f64>::new(feats, 5, 0.3, &mut rng);
            let x = rt(&mut rng, &[2, feats]);
            let mut entries = Vec::new();
            head.append_params("p", &mut entries);
            let mut leaves = vec![x.clone()];
            leaves.extend(params_of(entries));
            out.push(SuiteEntry {
                name: format!("block::survival_head (round {})", round),
                report: check_with_params(
                    leaves,
                    |_| {
                        let mut r = ChaCha8Rng::seed_from_u64(0);
                        head.forward(&x, false, &mut r).unwrap().pow_scalar(2.0).sum()
                    },
                    round,
                ),
            });
        }
    }
    out
}

fn micro_config() -> ModelConfig {
    ModelConfig {
        enc_channels: vec![2, 4, 8],
        dec_channels: vec![8, 4, 2],
        n_conv_stages: 1,
        n_self_stages: 1,
        n_cross_stages: 1,
        n_conv: vec![1, 1, 1],
        n_trans: vec![0, 2, 2],
        heads: vec![0, 2, 2],
        window: [2, 2, 2],
        n_intervals: 4,
        ablation: crate::model::Ablation::Full,
        dropout: 0.0,
    }
}

fn model_loss<E: Element>(model: &XSurv<E>, pet: &Tensor<E>, ct: &Tensor<E>) -> Tensor<E> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model.forward(pet, ct, false, &mut rng).unwrap();
    // Mean-scale terms keep the loss O(1) so 32-bit differences resolve.
    let mut loss = out.s_pred.mean();
    if let Some(p) = &out.pt_prob {
        loss = loss.add(&p.pow_scalar(E::of_f64(2.0)).mean()).unwrap();
    }
    if let Some(p) = &out.mln_prob {
        loss = loss.add(&p.pow_scalar(E::of_f64(2.0)).mean()).unwrap();
    }
    loss
}

/// Full-model check in 32-bit: one directional finite difference per
/// parameter tensor (plus the inputs) against the analytic gradient.
pub fn verify_model_f32(tol: f64) -> Vec<SuiteEntry> {
    let config = ModelConfig {
        enc_channels: vec![4, 8, 16, 32],
        dec_channels: vec![32, 16, 8, 4],
        n_conv_stages: 1,
        n_self_stages: 1,
        n_cross_stages: 2,
        n_conv: vec![1, 1, 1, 1],
        n_trans: vec![0, 2, 2, 2],
        heads: vec![0, 2, 4, 8],
        window: [3, 3, 3],
        n_intervals: 10,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let model = XSurv::<f32>::build(&config, 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mk = |rng: &mut ChaCha8Rng| {
        let n = 16 * 16 * 16;
        Tensor::<f32>::from_data(
            &[1, 1, 16, 16, 16],
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            true,
        )
    };
    let pet = mk(&mut rng);
    let ct = mk(&mut rng);
    let mut leaves = vec![pet.clone(), ct.clone()];
    leaves.extend(model.params().into_iter().map(|p| p.tensor));
    let report = gradient_check_directional(
        |_| model_loss(&model, &pet, &ct),
        &leaves,
        5e-3,
        tol,
        1,
        7,
    );
    vec![SuiteEntry {
        name: "model::full_f32_directional (1x1x16^3)".into(),
        report,
    }]
}

/// Full-model check in 64-bit at the op-level tolerance, sampled elements.
pub fn verify_model_f64() -> Vec<SuiteEntry> {
    let config = micro_config();
    let model = XSurv::<f64>::build(&config, 29).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mk = |rng: &mut ChaCha8Rng| {
        let n = 8 * 8 * 8;
        Tensor::<f64>::from_data(
            &[1, 1, 8, 8, 8],
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            true,
        )
    };
    let pet = mk(&mut rng);
    let ct = mk(&mut rng);
    let mut leaves = vec![pet.clone(), ct.clone()];
    leaves.extend(model.params().into_iter().map(|p| p.tensor));
    let report = gradient_check_sampled(
        |_| model_loss(&model, &pet, &ct),
        &leaves,
        STEP,
        TOL,
        3,
        13,
    );
    vec![SuiteEntry {
        name: "model::full_f64_sampled (1x1x8^3)".into(),
        report,
    }]
}
