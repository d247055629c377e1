use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn matmul_identity_and_scalar() {
    let mut g = Graph::new();
    let eye = g.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let col = g.constant(&[2, 1], vec![3.0, 4.0]).unwrap();
    let out = g.matmul(eye, col).unwrap();
    assert_eq!(g.shape(out), &[2, 1]);
    assert_eq!(g.value(out), &[3.0, 4.0]);

    let a = g.constant(&[1, 1], vec![2.0]).unwrap();
    let b = g.constant(&[1, 1], vec![5.0]).unwrap();
    let out = g.matmul(a, b).unwrap();
    assert_eq!(g.value(out), &[10.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_vec(&mut rng, 12);
    let b = random_vec(&mut rng, 8);
    let mut want = vec![0.0; 6];
    for i in 0..3 {
        for j in 0..2 {
            for k in 0..4 {
                want[i * 2 + j] += a[i * 4 + k] * b[k * 2 + j];
            }
        }
    }
    let mut g = Graph::new();
    let ta = g.constant(&[3, 4], a).unwrap();
    let tb = g.constant(&[4, 2], b).unwrap();
    let out = g.matmul(ta, tb).unwrap();
    assert!(close(g.value(out), &want, 1e-14));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let b = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let err = g.matmul(a, b).unwrap_err();
    assert_eq!(err, TensorError::Shape { op: "matmul", left: vec![2, 3], right: vec![2, 3] });
}

#[test]
fn matmul_rejects_non_finite() {
    let mut g = Graph::new();
    let a = g.constant(&[1, 1], vec![f64::NAN]).unwrap();
    let b = g.constant(&[1, 1], vec![1.0]).unwrap();
    assert!(matches!(g.matmul(a, b), Err(TensorError::NonFinite { .. })));
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let x = g.constant(&[2], vec![-1.0, 2.0]).unwrap();
    let r = g.elementwise(Elementwise::Relu, x, None).unwrap();
    assert_eq!(g.value(r), &[0.0, 2.0]);

    let v = g.constant(&[1, 2], vec![3.0, 4.0]).unwrap();
    let n = g.elementwise(Elementwise::L2NormalizeRows, v, None).unwrap();
    assert!(close(g.value(n), &[0.6, 0.8], 1e-15));

    let s = g.elementwise(Elementwise::Scale(2.5), v, None).unwrap();
    assert_eq!(g.value(s), &[7.5, 10.0]);

    assert!(matches!(g.elementwise(Elementwise::Add, v, None), Err(TensorError::Contract { .. })));
}

#[test]
fn log_rejects_non_positive() {
    let mut g = Graph::new();
    let x = g.constant(&[3], vec![1.0, 0.0, 2.0]).unwrap();
    assert!(matches!(g.log(x), Err(TensorError::Domain { op: "log", .. })));
}

#[test]
fn row_broadcast_only() {
    let mut g = Graph::new();
    let m = g.constant(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let row = g.constant(&[3], vec![10.0, 20.0, 30.0]).unwrap();
    let out = g.add(m, row).unwrap();
    assert_eq!(g.value(out), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    let col = g.constant(&[2, 1], vec![1.0, 1.0]).unwrap();
    assert!(g.add(m, col).is_err());
}

/// erf by its Maclaurin series; independent of the libm routine.
fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    for n in 1..200 {
        term *= -x * x / n as f64;
        let contrib = term / (2 * n + 1) as f64;
        sum += contrib;
        if contrib.abs() < 1e-18 {
            break;
        }
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

#[test]
fn gelu_matches_erf_series() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let xs: Vec<f64> = (0..64).map(|_| rng.random_range(-2.5..2.5)).collect();
    let mut g = Graph::new();
    let x = g.constant(&[64], xs.clone()).unwrap();
    let y = g.gelu(x);
    for (xi, yi) in xs.iter().zip(g.value(y)) {
        let want = 0.5 * xi * (1.0 + erf_series(xi / std::f64::consts::SQRT_2));
        assert!((want - yi).abs() < 1e-12, "gelu({xi}) = {yi}, oracle {want}");
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let z = g.constant(&[1, 2], vec![0.0, 0.0]).unwrap();
    let s = g.softmax_rows(z).unwrap();
    assert_eq!(g.value(s), &[0.5, 0.5]);
    let big = g.constant(&[1, 2], vec![1000.0, 1000.0]).unwrap();
    let s = g.softmax_rows(big).unwrap();
    assert_eq!(g.value(s), &[0.5, 0.5]);
    let flat = g.constant(&[4], vec![0.0; 4]).unwrap();
    assert!(g.softmax_rows(flat).is_err());
}

#[test]
fn softmax_matches_unshifted_oracle_and_is_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let row = random_vec(&mut rng, 7);
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        let want: Vec<f64> = row.iter().map(|v| v.exp() / denom).collect();
        let shift = rng.random_range(-50.0..50.0);
        let mut g = Graph::new();
        let a = g.constant(&[1, 7], row.clone()).unwrap();
        let b = g.constant(&[1, 7], row.iter().map(|v| v + shift).collect()).unwrap();
        let sa = g.softmax_rows(a).unwrap();
        let sb = g.softmax_rows(b).unwrap();
        assert!(close(g.value(sa), &want, 1e-12));
        assert!(close(g.value(sa), g.value(sb), 1e-12));
        assert!((g.value(sa).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn backward_quadratic() {
    let mut g = Graph::new();
    let x = g.leaf(&[3], vec![1.0, 2.0, 3.0], true).unwrap();
    let sq = g.mul(x, x).unwrap();
    let root = g.sum(sq);
    let grads = g.backward(root).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_of_constant_is_empty() {
    let mut g = Graph::new();
    let c = g.constant(&[1], vec![4.0]).unwrap();
    let root = g.scale(c, 2.0);
    assert!(g.backward(root).unwrap().is_empty());
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut g = Graph::new();
    let x = g.leaf(&[2], vec![1.0, 2.0], true).unwrap();
    assert_eq!(g.backward(x).unwrap_err(), TensorError::NonScalarRoot(vec![2]));
}

#[test]
fn gradients_accumulate_over_consumers() {
    let mut g = Graph::new();
    let x = g.leaf(&[2], vec![1.0, -2.0], true).unwrap();
    let a = g.scale(x, 3.0);
    let b = g.add(a, x).unwrap();
    let root = g.sum(b);
    assert_eq!(g.backward(root).unwrap().get(x).unwrap(), &[4.0, 4.0]);
}

#[test]
fn retained_intermediate_gradient() {
    let mut g = Graph::new();
    let w = g.leaf(&[2], vec![1.0, 2.0], true).unwrap();
    let h = g.scale(w, 2.0);
    g.retain_grad(h);
    let sq = g.mul(h, h).unwrap();
    let root = g.sum(sq);
    let grads = g.backward(root).unwrap();
    assert_eq!(grads.get(h).unwrap(), &[4.0, 8.0]);
    assert_eq!(grads.get(w).unwrap(), &[8.0, 16.0]);
}

#[test]
fn grad_check_of_sum_is_exact() {
    let x: Vec<f64> = (0..10).map(|i| i as f64 * 0.3 - 1.0).collect();
    let err = grad_check(|g, x| Ok(g.sum(x)), &[10], &x, 1e-5).unwrap();
    assert!(err < 1e-10, "{err}");
}

#[test]
fn two_layer_network_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let w1 = random_vec(&mut rng, 4 * 5);
    let w2 = random_vec(&mut rng, 5 * 2);
    let x = random_vec(&mut rng, 3 * 4);
    let err = grad_check(
        |g, x| {
            let w1 = g.constant(&[4, 5], w1.clone())?;
            let w2 = g.constant(&[5, 2], w2.clone())?;
            let h = g.matmul(x, w1)?;
            let h = g.gelu(h);
            let o = g.matmul(h, w2)?;
            let t = g.tanh(o);
            Ok(g.sum(t))
        },
        &[3, 4],
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

type OpUnderTest = fn(&mut Graph, GraphTensor, GraphTensor) -> Result<GraphTensor>;

/// Every differentiable op against central differences on 100 seeds.
#[test]
fn every_op_matches_finite_differences() {
    let ops: Vec<(&str, OpUnderTest)> = vec![
        ("matmul", |g, x, _| {
            let t = g.transpose(x);
            g.matmul(x, t)
        }),
        ("add_row", |g, x, w| {
            let row = g.slice(w, 0..1, 0..4)?;
            g.add(x, row)
        }),
        ("sub", |g, x, w| g.sub(w, x)),
        ("mul", |g, x, w| g.mul(x, w)),
        ("mul_row", |g, x, w| {
            let row = g.slice(w, 1..2, 0..4)?;
            g.mul(x, row)
        }),
        ("relu", |g, x, _| Ok(g.relu(x))),
        ("gelu", |g, x, _| Ok(g.gelu(x))),
        ("tanh", |g, x, _| Ok(g.tanh(x))),
        ("scale", |g, x, _| Ok(g.scale(x, -1.7))),
        ("exp", |g, x, _| Ok(g.exp(x))),
        ("log", |g, x, _| {
            let e = g.exp(x);
            g.log(e)
        }),
        ("l2_normalize_rows", |g, x, _| g.l2_normalize_rows(x)),
        ("softmax_rows", |g, x, _| g.softmax_rows(x)),
        ("logsumexp_rows", |g, x, _| Ok(g.logsumexp_rows(x))),
        ("layer_norm_rows", |g, x, _| Ok(g.layer_norm_rows(x))),
        ("slice", |g, x, _| g.slice(x, 1..3, 1..3)),
        ("concat", |g, x, w| {
            let r = g.concat_rows(&[x, w])?;
            let c = g.concat_cols(&[x, x])?;
            let c = g.sum_cols(c);
            let r = g.mean(r);
            let rr = g.reshape(r, &[1, 1])?;
            let c = g.sum(c);
            let cc = g.reshape(c, &[1, 1])?;
            g.concat_cols(&[rr, cc])
        }),
        ("gather_rows", |g, x, _| g.gather_rows(x, &[2, 0, 2, 1])),
    ];
    for (name, op) in ops {
        let mut worst = 0.0_f64;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut x = random_vec(&mut rng, 12);
            if name == "relu" {
                // keep clear of the kink
                x.iter_mut().for_each(|v| *v += 0.1 * v.signum());
            }
            let w = random_vec(&mut rng, 12);
            let weights = random_vec(&mut rng, 64);
            let err = grad_check(
                |g, x| {
                    let wt = g.constant(&[3, 4], w.clone())?;
                    let y = op(g, x, wt)?;
                    let n = g.value(y).len();
                    let shape = g.shape(y).to_vec();
                    let mix = g.constant(&shape, weights[..n].to_vec())?;
                    let prod = g.mul(y, mix)?;
                    Ok(g.sum(prod))
                },
                &[3, 4],
                &x,
                1e-5,
            )
            .unwrap();
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "{name}: max relative error {worst}");
    }
}

#[test]
fn evaluation_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph::new();
        let a = g.constant(&[4, 6], random_vec(&mut rng, 24)).unwrap();
        let b = g.constant(&[6, 3], random_vec(&mut rng, 18)).unwrap();
        let m = g.matmul(a, b).unwrap();
        let s = g.softmax_rows(m).unwrap();
        g.value(s).to_vec()
    };
    let (x, y) = (run(), run());
    assert!(x.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits()));
}
