use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trl_core::gradcheck::{check_blocks, finite_difference_check};
use trl_core::{Error, Graph, Result, Tensor, Var};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// `sum(out ⊙ W)` for a fixed random `W`, so every output coordinate gets a
/// distinct upstream gradient.
fn weighted_sum(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(g.shape(v), &mut rng);
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

#[test]
fn matmul_examples() {
    let mut g = Graph::<f64>::new();
    let i2 = g.constant(Tensor::eye(2));
    let m = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let out = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(out).data(), &[1., 2., 3., 4.]);

    let b = g.constant(t(&[2, 2], &[5., 6., 7., 8.]));
    let out = g.matmul(m, b).unwrap();
    assert_eq!(g.value(out).data(), &[19., 22., 43., 50.]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dimension { .. }));
    assert!(msg.contains("[2, 3] · [2, 3]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let blocks = vec![
        ("a".to_string(), random(&[3, 3], &mut rng)),
        ("b".to_string(), random(&[3, 3], &mut rng)),
    ];
    let reports = check_blocks(&blocks, 1e-5, None, |g, v| {
        let p = g.matmul(v[0], v[1])?;
        Ok(g.sum(p))
    })
    .unwrap();
    for r in reports {
        assert!(r.max_error <= 1e-6, "{r:?}");
    }
}

#[test]
fn conv2d_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[4, 5, 1], &mut rng);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let k = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let y = g.conv2d(xv, k, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv2d_counts_overlaps() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[3, 3, 1], 1.0));
    let k = g.constant(Tensor::full(&[3, 3, 1, 1], 1.0));
    let y = g.conv2d(x, k, 1, 1).unwrap();
    assert_eq!(g.shape(y), &[3, 3, 1]);
    assert_eq!(
        g.value(y).data(),
        &[4., 6., 4., 6., 9., 6., 4., 6., 4.]
    );
}

#[test]
fn conv2d_rejects_nonpositive_output() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[2, 2, 1]));
    let k = g.constant(Tensor::zeros(&[3, 3, 1, 1]));
    assert!(matches!(g.conv2d(x, k, 1, 0), Err(Error::Dimension { .. })));
}

#[test]
fn conv2d_kernel_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[5, 5, 2], &mut rng);
    let blocks = vec![("kernel".to_string(), random(&[3, 3, 2, 3], &mut rng))];
    let reports = check_blocks(&blocks, 1e-5, None, |g, v| {
        let xv = g.constant(x.clone());
        let y = g.conv2d(xv, v[0], 1, 1)?;
        weighted_sum(g, y, 11)
    })
    .unwrap();
    assert!(reports[0].max_error <= 1e-6, "{:?}", reports[0]);
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::<f64>::new();
    let z = g.param(Tensor::scalar(0.0));
    let s = g.sigmoid(z);
    assert_eq!(g.value(s).item(), 0.5);

    let x = g.param(Tensor::scalar(-3.0));
    let r = g.relu(x);
    assert_eq!(g.value(r).item(), 0.0);
    g.backward(r).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 0.0);

    // ReLU at exactly zero passes no gradient.
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(0.0));
    let r = g.relu(x);
    g.backward(r).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 0.0);
}

#[test]
fn tanh_gradient_is_analytic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let v: f64 = rng.gen_range(-3.0..3.0);
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(v));
        let y = g.tanh(x);
        g.backward(y).unwrap();
        let expected = 1.0 - v.tanh().powi(2);
        assert!((g.grad(x).unwrap().item() - expected).abs() <= 1e-7);
    }
}

#[test]
fn binary_ops_reject_mismatched_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2]));
    let b = g.constant(Tensor::zeros(&[3]));
    assert!(g.add(a, b).is_err());
    assert!(g.sub(a, b).is_err());
    assert!(g.mul(a, b).is_err());
}

#[test]
fn reduce_mean_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[3], &[1., 2., 3.]));
    let m = g.mean(x, 0).unwrap();
    assert_eq!(g.value(m).data(), &[2.0]);
    g.backward(m).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1. / 3., 1. / 3., 1. / 3.]);

    let y = g.constant(t(&[2, 1, 2], &[1., 2., 3., 4.]));
    let m = g.mean(y, 1).unwrap();
    assert_eq!(g.shape(m), &[2, 2]);
    assert_eq!(g.value(m).data(), &[1., 2., 3., 4.]);

    assert!(matches!(g.mean(y, 3), Err(Error::Dimension { .. })));
}

#[test]
fn backward_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(4.0));
    g.backward(x).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 1.0);

    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[2], &[1., 2.]));
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2., 4.]);
    assert_eq!(g.grad(loss).unwrap().item(), 1.0);

    // Repeated calls accumulate until zeroed.
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[4., 8.]);
    g.zero_grad();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(g.grad(loss).unwrap().data().iter().all(|&v| v == 0.0));

    assert!(matches!(g.backward(sq), Err(Error::Contract(_))));
}

#[test]
fn softmax_cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let z = g.param(Tensor::zeros(&[5]));
    let l = g.softmax_xent(z, &[2]).unwrap();
    assert!((g.value(l).item() - 5f64.ln()).abs() < 1e-12);

    let mut logits = vec![-50.0; 4];
    logits[1] = 50.0;
    let z = g.param(t(&[4], &logits));
    let l = g.softmax_xent(z, &[1]).unwrap();
    assert!(g.value(l).item() <= 1e-20);

    assert!(matches!(g.softmax_xent(z, &[4]), Err(Error::Contract(_))));
}

#[test]
fn softmax_cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let logits = random(&[6], &mut rng);
    let mut g = Graph::<f64>::new();
    let z = g.param(logits.clone());
    let l = g.softmax_xent(z, &[3]).unwrap();
    g.backward(l).unwrap();
    let grad = g.grad(z).unwrap();
    let max = logits.data().iter().cloned().fold(f64::MIN, f64::max);
    let denom: f64 = logits.data().iter().map(|v| (v - max).exp()).sum();
    for (j, (&zj, &gj)) in logits.data().iter().zip(grad.data()).enumerate() {
        let p = (zj - max).exp() / denom;
        let expected = p - if j == 3 { 1.0 } else { 0.0 };
        assert!((gj - expected).abs() < 1e-12);
    }
    let err = finite_difference_check(&logits, 1e-5, |g, v| g.softmax_xent(v, &[3])).unwrap();
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_fn(&[2, 6, 6, 3], |_| rng.gen_range(-1.0..1.0)));
        let k = g.param(Tensor::from_fn(&[3, 3, 3, 4], |_| rng.gen_range(-1.0..1.0)));
        let y = g.conv2d(x, k, 1, 1).unwrap();
        let y = g.tanh(y);
        let p = g.max_pool2d(y, 2, 2).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        (g.value(p).clone(), g.grad(k).unwrap())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.data(), b.data());
    assert_eq!(ga.data(), gb.data());
}

type Case = (&'static str, Vec<Vec<usize>>, fn(&mut Graph<f64>, &[Var]) -> Result<Var>);

fn cases() -> Vec<Case> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| g.matmul(v[0], v[1])),
        ("add", vec![vec![2, 3], vec![2, 3]], |g, v| g.add(v[0], v[1])),
        ("sub", vec![vec![2, 3], vec![2, 3]], |g, v| g.sub(v[0], v[1])),
        ("mul", vec![vec![2, 3], vec![2, 3]], |g, v| g.mul(v[0], v[1])),
        ("scale", vec![vec![5]], |g, v| Ok(g.scale(v[0], -1.7))),
        ("sigmoid", vec![vec![5]], |g, v| Ok(g.sigmoid(v[0]))),
        ("tanh", vec![vec![5]], |g, v| Ok(g.tanh(v[0]))),
        ("relu", vec![vec![6]], |g, v| Ok(g.relu(v[0]))),
        ("add_row_bias", vec![vec![3, 4], vec![4]], |g, v| g.add_row_bias(v[0], v[1])),
        ("mul_mask", vec![vec![4]], |g, v| g.mul_mask(v[0], vec![0.0, 2.0, 2.0, 0.0])),
        ("conv2d_strided", vec![vec![2, 5, 6, 2], vec![3, 3, 2, 3]], |g, v| {
            g.conv2d(v[0], v[1], 2, 1)
        }),
        ("conv2d_pointwise", vec![vec![2, 3, 3, 4], vec![1, 1, 4, 2]], |g, v| {
            g.conv2d(v[0], v[1], 1, 0)
        }),
        ("max_pool", vec![vec![2, 4, 4, 3]], |g, v| g.max_pool2d(v[0], 2, 2)),
        ("mean_axis1", vec![vec![2, 3, 4]], |g, v| g.mean(v[0], 1)),
        ("concat", vec![vec![2, 3], vec![2, 2]], |g, v| g.concat(v, 1)),
        ("stack", vec![vec![2, 3], vec![2, 3]], |g, v| g.stack(v, 1)),
        ("slice", vec![vec![3, 5]], |g, v| g.slice(v[0], 1, 1, 3)),
        ("select", vec![vec![2, 3, 4]], |g, v| g.select(v[0], 1, 2)),
        ("reshape", vec![vec![2, 6]], |g, v| g.reshape(v[0], &[3, 4])),
        ("batch_norm_train", vec![vec![5, 3], vec![3], vec![3]], |g, v| {
            Ok(g.batch_norm(v[0], v[1], v[2], None, 1e-5)?.0)
        }),
        ("batch_norm_eval", vec![vec![5, 3], vec![3], vec![3]], |g, v| {
            let mean = [0.1, -0.2, 0.3];
            let var = [0.5, 1.5, 0.8];
            Ok(g.batch_norm(v[0], v[1], v[2], Some((&mean, &var)), 1e-5)?.0)
        }),
        ("l2_normalize", vec![vec![3, 4]], |g, v| g.l2_normalize_rows(v[0])),
        ("affine_from_theta", vec![vec![3, 4]], |g, v| g.affine_from_theta(v[0], None)),
        ("affine_grid", vec![vec![2, 2, 3]], |g, v| g.affine_grid(v[0], 3, 4)),
        ("bilinear_sample", vec![vec![2, 4, 5, 3], vec![2, 3, 3, 2]], |g, v| {
            g.bilinear_sample(v[0], v[1])
        }),
        ("softmax_xent", vec![vec![3, 5]], |g, v| g.softmax_xent(v[0], &[0, 4, 2])),
    ]
}

#[test]
fn every_differentiable_op_matches_finite_differences_at_random_points() {
    for (name, shapes, op) in cases() {
        for trial in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 * trial + name.len() as u64);
            let blocks: Vec<(String, Tensor<f64>)> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| (format!("{name}.{i}"), random(s, &mut rng)))
                .collect();
            let reports = check_blocks(&blocks, 1e-6, None, |g, v| {
                let out = op(g, v)?;
                if g.value(out).numel() == 1 {
                    Ok(out)
                } else {
                    weighted_sum(g, out, trial)
                }
            })
            .unwrap();
            for r in reports {
                assert!(r.max_error <= 1e-5, "{name} trial {trial}: {r:?}");
            }
        }
    }
}

#[test]
fn detached_inputs_get_no_gradient() {
    let mut g = Graph::<f64>::new();
    let c = g.constant(Tensor::full(&[2], 3.0));
    let p = g.param(Tensor::full(&[2], 2.0));
    let y = g.mul(c, p).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(p).unwrap().data(), &[3.0, 3.0]);
}
