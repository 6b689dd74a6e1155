use super::gradcheck::max_relative_error;
use super::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn rand_values(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn conv2d_identity_kernel() {
    let g = Graph::new();
    let x = g.tensor(vec![1, 3, 3, 1], (1..=9).map(|v| v as f64).collect());
    let k = g.tensor(vec![1, 1, 1, 1], vec![1.0]);
    let y = x.conv2d(&k, 1, 0).unwrap();
    assert_eq!(y.values(), x.values());
}

#[test]
fn conv2d_summation_oracle() {
    let g = Graph::new();
    let x = g.tensor(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
    let k = g.tensor(vec![2, 2, 1, 1], vec![1.0, 1.0, 1.0, 1.0]);
    let y = x.conv2d(&k, 1, 0).unwrap();
    assert_eq!(y.shape(), vec![1, 1, 1, 1]);
    assert_eq!(y.values(), vec![10.0]);
}

#[test]
fn conv2d_zero_kernel_zero_everything() {
    let g = Graph::new();
    let x = g.tensor(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
    let k = g.tensor(vec![2, 2, 1, 1], vec![0.0; 4]);
    let y = x.conv2d(&k, 1, 0).unwrap();
    assert_eq!(y.values(), vec![0.0]);
    backward(&y.sum_all()).unwrap();
    assert!(x.grad().iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_channel_mismatch_rejected() {
    let g = Graph::new();
    let x = g.zeros(vec![1, 2, 2, 3]);
    let k = g.zeros(vec![2, 2, 2, 1]);
    assert!(x.conv2d(&k, 1, 0).is_err());
}

#[test]
fn maxpool_examples() {
    let g = Graph::new();
    let x = g.tensor(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
    let y = x.maxpool2d(2, 2).unwrap();
    assert_eq!(y.values(), vec![4.0]);

    // 4x4 ramp against a brute-force per-window maximum.
    let vals: Vec<f64> = (0..16).map(|v| (v * 7 % 11) as f64).collect();
    let x = g.tensor(vec![1, 4, 4, 1], vals.clone());
    let y = x.maxpool2d(2, 2).unwrap();
    let mut expect = Vec::new();
    for wy in 0..2 {
        for wx in 0..2 {
            let mut best = f64::NEG_INFINITY;
            for ky in 0..2 {
                for kx in 0..2 {
                    best = best.max(vals[(wy * 2 + ky) * 4 + wx * 2 + kx]);
                }
            }
            expect.push(best);
        }
    }
    assert_eq!(y.values(), expect);

    // Ties route gradient to the first element per window.
    let x = g.tensor(vec![1, 2, 2, 1], vec![5.0; 4]);
    let y = x.maxpool2d(2, 2).unwrap();
    assert_eq!(y.values(), vec![5.0]);
    backward(&y.sum_all()).unwrap();
    assert_eq!(x.grad(), vec![1.0, 0.0, 0.0, 0.0]);

    assert!(g.zeros(vec![1, 1, 1, 1]).maxpool2d(2, 2).is_err());
}

#[test]
fn bilinear_upsample_examples() {
    let g = Graph::new();
    let vals = vec![1.0, 2.0, 3.0, 4.0];
    let x = g.tensor(vec![1, 2, 2, 1], vals.clone());

    let same = x.bilinear_upsample(2, 2).unwrap();
    assert_eq!(same.values(), vals);
    backward(&same.sum_all()).unwrap();
    assert_eq!(x.grad(), vec![1.0; 4]);

    let g = Graph::new();
    let x = g.tensor(vec![1, 2, 2, 1], vals.clone());
    let up = x.bilinear_upsample(3, 3).unwrap();
    assert!((up.values()[4] - 2.5).abs() < 1e-12);
    // Gradient of the center output with respect to each input is 0.25.
    let center = up.reshape(vec![9]).unwrap().slice(0, 4, 1).unwrap();
    backward(&center.sum_all()).unwrap();
    assert!(x.grad().iter().all(|&v| (v - 0.25).abs() < 1e-12));

    let g = Graph::new();
    let x = g.tensor(vec![1, 1, 1, 1], vec![3.5]);
    let up = x.bilinear_upsample(4, 4).unwrap();
    assert!(up.values().iter().all(|&v| v == 3.5));
    backward(&up.sum_all()).unwrap();
    assert_eq!(x.grad(), vec![16.0]);
}

#[test]
fn pointwise_examples() {
    let g = Graph::new();
    let x = g.tensor(vec![3], vec![0.0, -3.0, 3.0]);
    assert_eq!(x.sigmoid().values()[0], 0.5);
    assert_eq!(x.tanh().values()[0], 0.0);
    let r = x.relu().values();
    assert_eq!((r[1], r[2]), (0.0, 3.0));

    let t = x.tanh();
    backward(&t.slice(0, 0, 1).unwrap().sum_all()).unwrap();
    assert!((x.grad()[0] - 1.0).abs() < 1e-12);
}

#[test]
fn softmax_examples() {
    let g = Graph::new();
    assert_eq!(
        g.tensor(vec![2], vec![0.0, 0.0]).softmax(&[0]).unwrap().values(),
        vec![0.5, 0.5]
    );
    assert_eq!(
        g.tensor(vec![2], vec![1000.0, 1000.0])
            .softmax(&[0])
            .unwrap()
            .values(),
        vec![0.5, 0.5]
    );
    let y = g
        .tensor(vec![2], vec![0.0, 3.0f64.ln()])
        .softmax(&[0])
        .unwrap()
        .values();
    assert!((y[0] - 0.25).abs() < 1e-12 && (y[1] - 0.75).abs() < 1e-12);

    // Probability vector along the chosen axis.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = g.tensor(vec![4, 5], rand_values(20, &mut rng));
    let y = x.softmax(&[1]).unwrap();
    for row in y.values().chunks(5) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn affine_examples() {
    let g = Graph::new();
    let x = g.tensor(vec![1, 2], vec![1.0, 2.0]);
    let w = g.tensor(vec![2, 1], vec![1.0, 1.0]);
    let b = g.tensor(vec![1], vec![3.0]);
    let y = x.affine(&w, &b).unwrap();
    assert_eq!(y.values(), vec![6.0]);
    backward(&y.sum_all()).unwrap();
    assert_eq!(b.grad(), vec![1.0]);

    let x = g.tensor(vec![1, 2], vec![0.7, -0.2]);
    let eye = g.tensor(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
    let zero = g.tensor(vec![2], vec![0.0, 0.0]);
    assert_eq!(x.affine(&eye, &zero).unwrap().values(), x.values());
}

#[test]
fn batchnorm_examples() {
    let g = Graph::new();
    let mut rm = vec![0.0];
    let mut rv = vec![1.0];

    // Zero-variance channel maps to beta.
    let x = g.tensor(vec![4, 1], vec![5.0; 4]);
    let gamma = g.tensor(vec![1], vec![2.0]);
    let beta = g.tensor(vec![1], vec![-1.0]);
    let y = x.batchnorm(&gamma, &beta, &mut rm, &mut rv, 0.1, true).unwrap();
    assert!(y.values().iter().all(|&v| (v + 1.0).abs() < 1e-9));

    // Already standardized batch passes through with gamma=1, beta=0.
    let vals = vec![-1.0, 1.0, 0.0, -1.0, 1.0, 0.0];
    let x = g.tensor(vec![6, 1], vals.clone());
    let gamma = g.tensor(vec![1], vec![1.0]);
    let beta = g.tensor(vec![1], vec![0.0]);
    let mean: f64 = vals.iter().sum::<f64>() / 6.0;
    let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
    let y = x.batchnorm(&gamma, &beta, &mut rm, &mut rv, 0.1, true).unwrap();
    for (a, b) in y.values().iter().zip(&vals) {
        assert!((a - (b - mean) / (var + 1e-5).sqrt()).abs() < 1e-6);
    }

    // Two-sample channel {0, 2} standardizes to +-1/sqrt(1+eps).
    let x = g.tensor(vec![2, 1], vec![0.0, 2.0]);
    let y = x.batchnorm(&gamma, &beta, &mut rm, &mut rv, 0.1, true).unwrap();
    let expect = 1.0 / (1.0 + 1e-5_f64).sqrt();
    assert!((y.values()[0] + expect).abs() < 1e-12);
    assert!((y.values()[1] - expect).abs() < 1e-12);
}

#[test]
fn elementwise_and_reduce_examples() {
    let g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a_vals = rand_values(6, &mut rng);
    let a = g.tensor(vec![2, 3], a_vals.clone());
    let zero = g.zeros(vec![2, 3]);
    let one = g.tensor(vec![1], vec![1.0]);
    assert_eq!(a.add(&zero).unwrap().values(), a_vals);
    assert_eq!(a.mul(&one).unwrap().values(), a_vals);

    let ones = g.tensor(vec![2, 3], vec![1.0; 6]);
    assert_eq!(ones.sum_all().values(), vec![6.0]);

    // Broadcast [K2,1] mask against [K2,D] features, against a loop oracle.
    let (k2, d) = (4, 3);
    let mask_vals = rand_values(k2, &mut rng);
    let feat_vals = rand_values(k2 * d, &mut rng);
    let mask = g.tensor(vec![k2, 1], mask_vals.clone());
    let features = g.tensor(vec![k2, d], feat_vals.clone());
    let weighted = mask.mul(&features).unwrap();
    for i in 0..k2 {
        for z in 0..d {
            assert!(
                (weighted.values()[i * d + z] - mask_vals[i] * feat_vals[i * d + z]).abs() < 1e-15
            );
        }
    }

    let m = g.tensor(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    assert_eq!(m.mean(&[0, 1]).unwrap().values(), vec![2.5]);
    assert_eq!(m.sum(&[0]).unwrap().values(), vec![4.0, 6.0]);
}

#[test]
fn backward_examples() {
    let g = Graph::new();
    let x = g.tensor(vec![3], vec![1.0, -2.0, 0.5]);
    let loss = x.sum_all();
    backward(&loss).unwrap();
    assert_eq!(x.grad(), vec![1.0; 3]);

    let g = Graph::new();
    let x = g.tensor(vec![3], vec![1.0, -2.0, 0.5]);
    let loss = x.mul(&x).unwrap().sum_all();
    backward(&loss).unwrap();
    assert_eq!(x.grad(), vec![2.0, -4.0, 1.0]);

    let g = Graph::new();
    let not_scalar = g.zeros(vec![2]);
    assert!(backward(&not_scalar).is_err());
}

#[test]
fn unreachable_parameter_gets_zero_grad() {
    let g = Graph::new();
    let used = Parameter::new("used", vec![2], vec![1.0, 2.0]);
    let unused = Parameter::new("unused", vec![2], vec![3.0, 4.0]);
    let x = g.bind(&used);
    let _dangling = g.bind(&unused);
    let loss = x.sum_all();
    backward(&loss).unwrap();
    g.flush_param_grads();
    assert_eq!(used.grad(), vec![1.0, 1.0]);
    assert_eq!(unused.grad(), vec![0.0, 0.0]);
}

#[test]
fn sgd_examples() {
    let p = Parameter::new("p", vec![1], vec![1.0]);
    p.add_grad(&[1.0]);
    let mut opt = Sgd::new(0.1, 0.0);
    opt.step(&[p.clone()]);
    assert!((p.values()[0] - 0.9).abs() < 1e-15);

    // Zero gradient leaves the parameter unchanged.
    p.zero_grad();
    opt.step(&[p.clone()]);
    assert!((p.values()[0] - 0.9).abs() < 1e-15);

    // Momentum 0.9 two-step trace against the hand-unrolled recurrence.
    let p = Parameter::new("p", vec![1], vec![0.0]);
    let mut opt = Sgd::new(0.5, 0.9);
    p.add_grad(&[2.0]);
    opt.step(&[p.clone()]); // v=2, p=-1
    p.zero_grad();
    p.add_grad(&[1.0]);
    opt.step(&[p.clone()]); // v=0.9*2+1=2.8, p=-1-1.4=-2.4
    assert!((p.values()[0] + 2.4).abs() < 1e-12);
}

#[test]
fn concat_slice_roundtrip() {
    let g = Graph::new();
    let a = g.tensor(vec![1, 2], vec![1.0, 2.0]);
    let b = g.tensor(vec![1, 3], vec![3.0, 4.0, 5.0]);
    let joined = concat(&[a.clone(), b.clone()], 1).unwrap();
    assert_eq!(joined.values(), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    let back = joined.slice(1, 2, 3).unwrap();
    assert_eq!(back.values(), b.values());
    backward(&back.sum_all()).unwrap();
    assert_eq!(a.grad(), vec![0.0, 0.0]);
    assert_eq!(b.grad(), vec![1.0, 1.0, 1.0]);
}

#[test]
fn cross_entropy_uniform_logits() {
    let g = Graph::new();
    let logits = g.zeros(vec![2, 4]);
    let loss = cross_entropy(&logits, &[0, 3]).unwrap();
    assert!((loss.values()[0] - 4.0f64.ln()).abs() < 1e-12);
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let vals = rand_values(2 * 4 * 4 * 3, &mut rng);
    let kvals = rand_values(3 * 3 * 3 * 2, &mut rng);
    let run = || {
        let g = Graph::new();
        let x = g.tensor(vec![2, 4, 4, 3], vals.clone());
        let k = g.tensor(vec![3, 3, 3, 2], kvals.clone());
        x.conv2d(&k, 1, 1)
            .unwrap()
            .relu()
            .maxpool2d(2, 2)
            .unwrap()
            .sum_all()
            .values()
    };
    assert_eq!(run(), run());
}

fn fd_check_unary(name: &str, f: impl Fn(&Graph, &Tensor) -> Tensor, shape: Vec<usize>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = shape.iter().product();
    // keep values away from relu/maxpool kinks
    let vals: Vec<f64> = (0..len)
        .map(|_| {
            let v: f64 = rng.gen_range(0.2..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v - 0.2
            }
        })
        .collect();
    let weights = rand_values(len.max(256), &mut rng);
    let p = Parameter::new("x", shape, vals);
    let err = max_relative_error(&[p.clone()], |g| {
        let x = g.bind(&p);
        let y = f(g, &x);
        let w = g.tensor(y.shape(), weights[..y.len()].to_vec());
        y.mul(&w).unwrap().sum_all()
    });
    assert!(err < 1e-4, "{name}: max rel err {err}");
}

#[test]
fn finite_difference_per_op() {
    fd_check_unary("relu", |_, x| x.relu(), vec![2, 5], 21);
    fd_check_unary("sigmoid", |_, x| x.sigmoid(), vec![2, 5], 22);
    fd_check_unary("tanh", |_, x| x.tanh(), vec![2, 5], 23);
    fd_check_unary("softmax", |_, x| x.softmax(&[1]).unwrap(), vec![2, 5], 24);
    fd_check_unary(
        "maxpool",
        |_, x| x.maxpool2d(2, 2).unwrap(),
        vec![1, 4, 4, 2],
        25,
    );
    fd_check_unary(
        "upsample",
        |_, x| x.bilinear_upsample(5, 7).unwrap(),
        vec![1, 3, 3, 2],
        26,
    );
    fd_check_unary(
        "mean",
        |_, x| x.mean(&[1]).unwrap(),
        vec![3, 4],
        27,
    );

    // conv2d in both inputs.
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let x = Parameter::new("x", vec![1, 4, 4, 2], rand_values(32, &mut rng));
    let k = Parameter::new("k", vec![3, 3, 2, 2], rand_values(36, &mut rng));
    let weights = rand_values(1 * 4 * 4 * 2, &mut rng);
    let err = max_relative_error(&[x.clone(), k.clone()], |g| {
        let xv = g.bind(&x);
        let kv = g.bind(&k);
        let y = xv.conv2d(&kv, 1, 1).unwrap();
        let w = g.tensor(y.shape(), weights[..y.len()].to_vec());
        y.mul(&w).unwrap().sum_all()
    });
    assert!(err < 1e-4, "conv2d: {err}");

    // batchnorm in x, gamma, beta (training statistics).
    let x = Parameter::new("x", vec![6, 3], rand_values(18, &mut rng));
    let gamma = Parameter::new("gamma", vec![3], vec![1.1, 0.9, 1.3]);
    let beta = Parameter::new("beta", vec![3], vec![0.1, -0.2, 0.0]);
    let weights = rand_values(18, &mut rng);
    let err = max_relative_error(&[x.clone(), gamma.clone(), beta.clone()], |g| {
        let xv = g.bind(&x);
        let gv = g.bind(&gamma);
        let bv = g.bind(&beta);
        let mut rm = vec![0.0; 3];
        let mut rv = vec![1.0; 3];
        let y = xv.batchnorm(&gv, &bv, &mut rm, &mut rv, 0.1, true).unwrap();
        let w = g.tensor(y.shape(), weights.clone());
        y.mul(&w).unwrap().sum_all()
    });
    assert!(err < 1e-4, "batchnorm: {err}");

    // affine in all three inputs plus cross-entropy.
    let x = Parameter::new("x", vec![3, 4], rand_values(12, &mut rng));
    let w = Parameter::new("w", vec![4, 5], rand_values(20, &mut rng));
    let b = Parameter::new("b", vec![5], rand_values(5, &mut rng));
    let err = max_relative_error(&[x.clone(), w.clone(), b.clone()], |g| {
        let xv = g.bind(&x);
        let wv = g.bind(&w);
        let bv = g.bind(&b);
        let logits = xv.affine(&wv, &bv).unwrap();
        cross_entropy(&logits, &[1, 0, 4]).unwrap()
    });
    assert!(err < 1e-4, "affine+cross_entropy: {err}");
}

#[test]
fn finite_difference_matches_composed_graph() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let x = Parameter::new("x", vec![1, 4, 4, 2], rand_values(32, &mut rng));
    let k = Parameter::new("k", vec![3, 3, 2, 2], rand_values(36, &mut rng));
    let err = max_relative_error(&[x.clone(), k.clone()], |g| {
        let xv = g.bind(&x);
        let kv = g.bind(&k);
        let y = xv.conv2d(&kv, 1, 1).unwrap().sigmoid();
        let pooled = y.maxpool2d(2, 2).unwrap();
        let up = pooled.bilinear_upsample(4, 4).unwrap();
        up.mul(&xv).unwrap().sum_all()
    });
    assert!(err < 1e-4, "composed graph: {err}");
}
