//! The gradient-check suite: every differentiable op against central
//! finite differences on randomized shapes, plus the full model loss.
//! Backs `depthseq gradcheck` and the acceptance criteria.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics;
use crate::model::{ClsPosition, DstModel, ModelConfig, PaddingSide};
use crate::tensor::ops::{self, AttentionParams};
use crate::tensor::{grad_check, AttentionMask, Tensor};

pub const EPS: f64 = 1e-3;
/// Random shape draws per op.
pub const SHAPES_PER_OP: usize = 10;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckResult {
    pub name: String,
    pub max_rel_err: f64,
}

fn rand_param(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| rng.gen_range(-0.8..0.8)).collect())
}

fn check_many(
    rng: &mut ChaCha8Rng,
    mut case: impl FnMut(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<dyn Fn(&[Tensor]) -> Tensor>),
) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..SHAPES_PER_OP {
        let (params, f) = case(rng);
        worst = worst.max(grad_check(&*f, &params, EPS, 6));
    }
    worst
}

/// Runs the whole suite; each entry is the max relative error over
/// `SHAPES_PER_OP` random shapes.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name: &str, v: f64| {
        out.push(GradCheckResult {
            name: name.to_string(),
            max_rel_err: v,
        })
    };

    push(
        "elementwise_add_mul_gelu",
        check_many(&mut rng, |rng| {
            let n = rng.gen_range(2..30);
            let a = rand_param(rng, &[n]);
            let b = rand_param(rng, &[n]);
            (
                vec![a, b],
                Box::new(|p: &[Tensor]| {
                    ops::sum_all(&ops::gelu(&ops::mul(&ops::add(&p[0], &p[1]), &p[0])))
                }),
            )
        }),
    );

    push(
        "matmul",
        check_many(&mut rng, |rng| {
            let (m, k, n) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
            let a = rand_param(rng, &[m, k]);
            let b = rand_param(rng, &[k, n]);
            (
                vec![a, b],
                Box::new(|p: &[Tensor]| ops::sum_all(&ops::matmul(&p[0], &p[1]))),
            )
        }),
    );

    push(
        "linear",
        check_many(&mut rng, |rng| {
            let (b, fi, fo) = (rng.gen_range(1..4), rng.gen_range(1..6), rng.gen_range(1..6));
            let x = rand_param(rng, &[b, fi]);
            let w = rand_param(rng, &[fo, fi]);
            let bias = rand_param(rng, &[fo]);
            (
                vec![x, w, bias],
                Box::new(|p: &[Tensor]| ops::sum_all(&ops::linear(&p[0], &p[1], &p[2]))),
            )
        }),
    );

    push(
        "layer_norm",
        check_many(&mut rng, |rng| {
            let (b, c) = (rng.gen_range(1..4), rng.gen_range(2..8));
            let x = rand_param(rng, &[b, c]);
            let g = rand_param(rng, &[c]);
            let be = rand_param(rng, &[c]);
            (
                vec![x, g, be],
                Box::new(|p: &[Tensor]| {
                    ops::sum_all(&ops::gelu(&ops::layer_norm(&p[0], &p[1], &p[2], 1e-5)))
                }),
            )
        }),
    );

    push(
        "masked_softmax",
        check_many(&mut rng, |rng| {
            let (r, l) = (rng.gen_range(1..4), rng.gen_range(3..8));
            let x = rand_param(rng, &[r, l]);
            let valid: Vec<bool> = (0..r * l)
                .map(|i| i % l == 0 || rng.gen_bool(0.7))
                .collect();
            let weight = rand_param(rng, &[r, l]);
            (
                vec![x, weight],
                Box::new(move |p: &[Tensor]| {
                    let s = ops::masked_softmax(&p[0], &valid).unwrap();
                    ops::sum_all(&ops::mul(&s, &p[1]))
                }),
            )
        }),
    );

    push(
        "masked_cross_entropy",
        check_many(&mut rng, |rng| {
            let (r, l) = (rng.gen_range(1..4), rng.gen_range(3..8));
            let x = rand_param(rng, &[r, l]);
            let valid: Vec<bool> = (0..r * l).map(|i| i % l < 2 || rng.gen_bool(0.6)).collect();
            let targets: Vec<usize> = (0..r).map(|_| rng.gen_range(0..2)).collect();
            (
                vec![x],
                Box::new(move |p: &[Tensor]| {
                    ops::masked_cross_entropy(&p[0], &targets, &valid).unwrap()
                }),
            )
        }),
    );

    push(
        "conv3d",
        check_many(&mut rng, |rng| {
            let (ci, co) = (rng.gen_range(1..3), rng.gen_range(1..3));
            let (h, w, d) = (rng.gen_range(4..7), rng.gen_range(4..7), rng.gen_range(2..5));
            let x = rand_param(rng, &[1, ci, h, w, d]);
            let wt = rand_param(rng, &[co, ci, 3, 3, 3]);
            let b = rand_param(rng, &[co]);
            (
                vec![x, wt, b],
                Box::new(|p: &[Tensor]| {
                    ops::sum_all(
                        &ops::conv3d(&p[0], &p[1], &p[2], (2, 2, 1), (1, 1, 1)).unwrap(),
                    )
                }),
            )
        }),
    );

    push(
        "conv1d_depthwise",
        check_many(&mut rng, |rng| {
            let (c, l) = (rng.gen_range(1..5), rng.gen_range(3..9));
            let x = rand_param(rng, &[1, c, l]);
            let w = rand_param(rng, &[c, 3]);
            (
                vec![x, w],
                Box::new(|p: &[Tensor]| {
                    ops::sum_all(&ops::conv1d_depthwise(&p[0], &p[1]).unwrap())
                }),
            )
        }),
    );

    push(
        "mean_pool_hw",
        check_many(&mut rng, |rng| {
            let (c, h, w, d) = (
                rng.gen_range(1..4),
                rng.gen_range(2..5),
                rng.gen_range(2..5),
                rng.gen_range(1..4),
            );
            let x = rand_param(rng, &[1, c, h, w, d]);
            (
                vec![x],
                Box::new(|p: &[Tensor]| ops::sum_all(&ops::gelu(&ops::mean_pool_hw(&p[0])))),
            )
        }),
    );

    push(
        "multihead_attention",
        check_many(&mut rng, |rng| {
            let (b, l, c, heads) = (1, rng.gen_range(2..6), 4, 2);
            let x = rand_param(rng, &[b, l, c]);
            let mut valid = vec![vec![true; l]; b];
            for row in valid.iter_mut() {
                for t in row.iter_mut().skip(1) {
                    *t = rng.gen_bool(0.8);
                }
            }
            let mask = AttentionMask { valid };
            let p = AttentionParams {
                wq: rand_param(rng, &[c, c]),
                bq: rand_param(rng, &[c]),
                wk: rand_param(rng, &[c, c]),
                bk: rand_param(rng, &[c]),
                wv: rand_param(rng, &[c, c]),
                bv: rand_param(rng, &[c]),
                wo: rand_param(rng, &[c, c]),
                bo: rand_param(rng, &[c]),
            };
            let mut params = vec![x];
            params.extend(p.tensors());
            (
                params,
                Box::new(move |ps: &[Tensor]| {
                    let ap = AttentionParams {
                        wq: ps[1].clone(),
                        bq: ps[2].clone(),
                        wk: ps[3].clone(),
                        bk: ps[4].clone(),
                        wv: ps[5].clone(),
                        bv: ps[6].clone(),
                        wo: ps[7].clone(),
                        bo: ps[8].clone(),
                    };
                    ops::sum_all(&ops::multihead_attention(&ps[0], &mask, heads, &ap).unwrap())
                }),
            )
        }),
    );

    // full model: composite localization + classification loss
    // fixed well-conditioned configuration: very narrow layer_norms make
    // central differences at this eps unreliable regardless of gradient
    // correctness, so the full-model check uses d_model 8
    let cfg = ModelConfig {
        in_channels: 1,
        encoder_channels: vec![4, 8],
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        conv_kernel_depth: 3,
        d_max: 6,
        n_landmarks: 2,
        n_classes: 2,
        dropout: 0.0,
        cls_position: ClsPosition::AfterPads,
        padding_side: PaddingSide::Left,
        attention_enabled: true,
    };
    let model = DstModel::new(cfg, 1)?;
    let mut xrng = ChaCha8Rng::seed_from_u64(76);
    let x = rand_param(&mut xrng, &[1, 1, 8, 8, 4]);
    let params = model.params.tensors();
    let truth = metrics::LandmarkSet::new(vec![1, 3]);
    let f = move |_: &[Tensor]| {
        let out = model.forward(&x, None).unwrap();
        let loc = metrics::loss_loc(
            &out.loc_logits_full,
            &[&truth],
            &out.slice_valid,
            out.first_valid,
        )
        .unwrap();
        let cls = metrics::loss_cls(&out.cls_logits, &[1]).unwrap();
        ops::add(&loc, &cls)
    };
    push("full_model_loss", grad_check(f, &params, EPS, 4));

    Ok(out)
}
