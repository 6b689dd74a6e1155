//! Named finite-difference checks over every differentiable op and the
//! composed blocks, shared by the command-line `gradcheck` and the
//! acceptance tests.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::nn::{BaseAttentionBlock, GlanBlock, MaskActivation, ResidualUnit};
use crate::ssan::{AttentionMode, LstmCell, Readout, SsanConfig, SsanModel};
use crate::tensor::gradcheck::{max_relative_error, CheckOutcome};
use crate::tensor::{cross_entropy, Graph, Parameter, Tensor};

fn rand_values(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn weighted_sum(t: &Tensor, weights: &[f64]) -> Tensor {
    let w = t.graph().tensor(t.shape(), weights[..t.len()].to_vec());
    t.mul(&w).unwrap().sum_all()
}

/// Runs the whole suite; every outcome should pass the 1e-4 bound.
pub fn gradient_checks() -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let weights = rand_values(512, &mut rng);
    let mut out = Vec::new();
    let mut run = |name: &str, params: &[Parameter], build: &dyn Fn(&Graph) -> Tensor| {
        out.push(CheckOutcome {
            name: name.to_string(),
            max_rel_error: max_relative_error(params, build),
        });
    };

    let x = Parameter::new("x", vec![2, 3, 4], rand_values(24, &mut rng));
    for (name, f) in [
        ("relu", 0usize),
        ("sigmoid", 1),
        ("tanh", 2),
        ("scale", 3),
    ] {
        let x = x.clone();
        let w = weights.clone();
        run(name, &[x.clone()], &move |g| {
            let t = g.bind(&x);
            let y = match f {
                // Offset keeps relu inputs away from the kink.
                0 => t.relu(),
                1 => t.sigmoid(),
                2 => t.tanh(),
                _ => t.scale(-1.75),
            };
            weighted_sum(&y, &w)
        });
    }

    {
        let x = x.clone();
        let w = weights.clone();
        run("softmax", &[x.clone()], &move |g| {
            weighted_sum(&g.bind(&x).softmax(&[1, 2]).unwrap(), &w)
        });
        let x = Parameter::new("xm", vec![2, 3, 4], rand_values(24, &mut rng));
        let w = weights.clone();
        run("mean", &[x.clone()], &move |g| {
            weighted_sum(&g.bind(&x).mean(&[0, 2]).unwrap(), &w)
        });
    }

    {
        let a = Parameter::new("a", vec![2, 3, 4], rand_values(24, &mut rng));
        let b = Parameter::new("b", vec![4], rand_values(4, &mut rng));
        let w = weights.clone();
        run("broadcast_add_mul", &[a.clone(), b.clone()], &move |g| {
            let t = g.bind(&a).add(&g.bind(&b)).unwrap().mul(&g.bind(&b)).unwrap();
            weighted_sum(&t, &w)
        });
    }

    {
        let x = Parameter::new("xc", vec![1, 5, 5, 2], rand_values(50, &mut rng));
        let k = Parameter::new("k", vec![3, 3, 2, 3], rand_values(54, &mut rng));
        let w = weights.clone();
        run("conv2d", &[x.clone(), k.clone()], &move |g| {
            weighted_sum(&g.bind(&x).conv2d(&g.bind(&k), 2, 1).unwrap(), &w)
        });
    }

    {
        let x = Parameter::new("xp", vec![1, 6, 6, 2], rand_values(72, &mut rng));
        let w = weights.clone();
        run("maxpool2d", &[x.clone()], &move |g| {
            weighted_sum(&g.bind(&x).maxpool2d(2, 2).unwrap(), &w)
        });
        let x = Parameter::new("xu", vec![1, 3, 3, 2], rand_values(18, &mut rng));
        let w = weights.clone();
        run("bilinear_upsample", &[x.clone()], &move |g| {
            weighted_sum(&g.bind(&x).bilinear_upsample(6, 6).unwrap(), &w)
        });
    }

    {
        let x = Parameter::new("xa", vec![3, 4], rand_values(12, &mut rng));
        let w = Parameter::new("wa", vec![4, 2], rand_values(8, &mut rng));
        let b = Parameter::new("ba", vec![2], rand_values(2, &mut rng));
        run(
            "affine_cross_entropy",
            &[x.clone(), w.clone(), b.clone()],
            &move |g| {
                let logits = g.bind(&x).affine(&g.bind(&w), &g.bind(&b)).unwrap();
                cross_entropy(&logits, &[0, 1, 0]).unwrap()
            },
        );
    }

    {
        let x = Parameter::new("xb", vec![2, 3, 3, 2], rand_values(36, &mut rng));
        let gamma = Parameter::new("gamma", vec![2], vec![1.1, 0.9]);
        let beta = Parameter::new("beta", vec![2], vec![0.1, -0.2]);
        let w = weights.clone();
        run(
            "batchnorm",
            &[x.clone(), gamma.clone(), beta.clone()],
            &move |g| {
                let mut rm = vec![0.0; 2];
                let mut rv = vec![1.0; 2];
                let y = g
                    .bind(&x)
                    .batchnorm(&g.bind(&gamma), &g.bind(&beta), &mut rm, &mut rv, 0.1, true)
                    .unwrap();
                weighted_sum(&y, &w)
            },
        );
    }

    {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let unit = ResidualUnit::new(&mut r, "ru", 3, 3, 1);
        let input = Parameter::new("xr", vec![1, 4, 4, 3], rand_values(48, &mut rng));
        let mut params = vec![input.clone()];
        unit.collect_params(&mut params);
        let params: Vec<Parameter> = params.into_iter().filter(|p| p.is_trainable()).collect();
        let w = weights.clone();
        run("residual_unit", &params, &move |g| {
            weighted_sum(&unit.forward(g, &g.bind(&input), true).unwrap(), &w)
        });
    }

    {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let block = BaseAttentionBlock::new(&mut r, "ba", 2, MaskActivation::Sigmoid);
        let input = Parameter::new("xba", vec![1, 4, 4, 2], rand_values(32, &mut rng));
        let mut params = vec![input.clone()];
        block.collect_params(&mut params);
        let w = weights.clone();
        run("base_attention", &params, &move |g| {
            weighted_sum(&block.forward(g, &g.bind(&input)).unwrap(), &w)
        });
    }

    {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let block = GlanBlock::new(&mut r, "gb", 4, 8, 4).unwrap();
        let input = Parameter::new("xg", vec![1, 8, 8, 4], rand_values(256, &mut r));
        let mut params = vec![input.clone()];
        block.collect_params(&mut params);
        let params: Vec<Parameter> = params.into_iter().filter(|p| p.is_trainable()).collect();
        let w = weights.clone();
        run("glan_block_8x8x4", &params, &move |g| {
            weighted_sum(&block.forward(g, &g.bind(&input), true).unwrap(), &w)
        });
    }

    {
        let mut r = ChaCha8Rng::seed_from_u64(10);
        let cell = LstmCell::new(&mut r, "lstm", 3, 4);
        let x = Parameter::new("xl", vec![1, 3], rand_values(3, &mut rng));
        let h0 = Parameter::new("h0", vec![1, 4], rand_values(4, &mut rng));
        let c0 = Parameter::new("c0", vec![1, 4], rand_values(4, &mut rng));
        let mut params = vec![x.clone(), h0.clone(), c0.clone()];
        cell.collect_params(&mut params);
        let w = weights.clone();
        run("lstm_step", &params, &move |g| {
            let (h, c) = cell.step(g, &g.bind(&x), &g.bind(&h0), &g.bind(&c0)).unwrap();
            weighted_sum(&h, &w).add(&weighted_sum(&c, &w[8..])).unwrap()
        });
    }

    {
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let model = SsanModel::new(
            SsanConfig {
                hidden: 4,
                mode: AttentionMode::SoftmaxSpatial,
                readout: Readout::MeanLogits,
                num_classes: 3,
                feature_size: 2,
                feature_channels: 3,
            },
            &mut r,
        );
        let inputs: Vec<Parameter> = (0..2)
            .map(|t| Parameter::new(format!("feat{t}"), vec![1, 2, 2, 3], rand_values(12, &mut rng)))
            .collect();
        let mut params = model.parameters();
        params.extend(inputs.iter().cloned());
        run("ssan_tiny_k2_d3_h4_n2", &params, &move |g| {
            let feats: Vec<Tensor> = inputs.iter().map(|p| g.bind(p)).collect();
            cross_entropy(&model.forward(g, &feats).unwrap(), &[1]).unwrap()
        });
    }

    out
}
