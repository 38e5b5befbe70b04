use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    out
}

fn rows(r: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn matmul_identity_and_hand_case() {
    let x = rows(&[&[1.5, -2.0, 3.0], &[0.25, 4.0, -1.0]]);
    assert_eq!(matmul(&Tensor::eye(2), &x).unwrap(), x);

    let a = rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
    let b = rows(&[&[1.0], &[1.0]]);
    let c = matmul(&a, &b).unwrap();
    assert_eq!(c.data(), &[3.0, 7.0]);
    assert_eq!(c.data(), naive_matmul(&a, &b).as_slice());
}

#[test]
fn matmul_mismatch_names_both_shapes() {
    let a = Tensor::zeros(&[2, 3]);
    let err = matmul(&a, &a).unwrap_err();
    assert_eq!(
        err,
        NumericsError::ShapeMismatch {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("[2, 3] and [2, 3]"));
}

fn softmax_of(values: &[f64]) -> Vec<f64> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![values.len()], values.to_vec()).unwrap());
    let y = g.softmax(x, 0).unwrap();
    g.value(y).data().to_vec()
}

#[test]
fn softmax_examples() {
    for v in softmax_of(&[0.0, 0.0, 0.0]) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let big = softmax_of(&[1000.0, 0.0]);
    assert!(big.iter().all(|v| v.is_finite()));
    assert!((big[0] - 1.0).abs() < 1e-12 && big[1] < 1e-300);
    let s = softmax_of(&[2f64.ln(), 1f64.ln()]);
    assert!((s[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((s[1] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn softmax_along_inner_axis() {
    let mut g = Graph::new();
    let x = g.constant(rows(&[&[1.0, 5.0], &[1.0, 5.0]]));
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
    assert!(g.softmax(x, 2).is_err());
}

fn layer_norm_of(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mut g = Graph::new();
    let xv = g.constant(Tensor::new(vec![1, d], x.to_vec()).unwrap());
    let gv = g.constant(Tensor::new(vec![d], gamma.to_vec()).unwrap());
    let bv = g.constant(Tensor::new(vec![d], beta.to_vec()).unwrap());
    let y = g.layer_norm(xv, gv, bv, 1e-5).unwrap();
    g.value(y).data().to_vec()
}

#[test]
fn layer_norm_examples() {
    assert_eq!(layer_norm_of(&[4.0; 5], &[1.0; 5], &[0.0; 5]), vec![0.0; 5]);
    // mean 2, variance 1: (x - 2) / sqrt(1 + eps)
    let y = layer_norm_of(&[1.0, 3.0], &[1.0, 1.0], &[0.0, 0.0]);
    let s = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((y[0] + s).abs() < 1e-15 && (y[1] - s).abs() < 1e-15);
    assert_eq!(
        layer_norm_of(&[0.3, -7.0, 2.0], &[0.0; 3], &[1.0, 2.0, 3.0]),
        vec![1.0, 2.0, 3.0]
    );
}

#[test]
fn layer_norm_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::uniform(&[7, 16], 3.0, &mut rng);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let gv = g.constant(Tensor::ones(&[16]));
    let bv = g.constant(Tensor::zeros(&[16]));
    let y = g.layer_norm(xv, gv, bv, 1e-5).unwrap();
    for r in 0..7 {
        let row = g.value(y).row(r);
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
        // eps shrinks the variance by var / (var + eps)
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }
}

#[test]
fn linear_examples() {
    let mut g = Graph::new();
    let x = g.constant(rows(&[&[1.0, 1.0]]));
    let w = g.constant(rows(&[&[1.0], &[2.0]]));
    let b = g.constant(Tensor::new(vec![1], vec![0.5]).unwrap());
    let y = g.linear(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[3.5]);

    let xi = g.constant(rows(&[&[0.5, -1.0], &[2.0, 3.0]]));
    let eye = g.constant(Tensor::eye(2));
    let zero = g.constant(Tensor::zeros(&[2]));
    let y = g.linear(xi, eye, zero).unwrap();
    assert_eq!(g.value(y), g.value(xi));

    let z = g.constant(Tensor::zeros(&[3, 2]));
    let bias = g.constant(Tensor::new(vec![2], vec![0.25, -4.0]).unwrap());
    let y = g.linear(z, eye, bias).unwrap();
    assert_eq!(g.value(y).data(), &[0.25, -4.0, 0.25, -4.0, 0.25, -4.0]);

    let bad = g.constant(Tensor::zeros(&[3, 2]));
    assert!(g.linear(x, bad, bias).is_err());
}

#[test]
fn linear_over_higher_rank_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let x = g.constant(Tensor::uniform(&[2, 3, 4], 1.0, &mut rng));
    let w = g.constant(Tensor::uniform(&[4, 5], 1.0, &mut rng));
    let b = g.constant(Tensor::zeros(&[5]));
    let y = g.linear(x, w, b).unwrap();
    assert_eq!(g.shape(y), &[2, 3, 5]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2]));
    assert_eq!(
        g.backward(x).unwrap_err(),
        NumericsError::NonScalarLoss(vec![2])
    );
}

#[test]
fn sum_of_product_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = Tensor::uniform(&[3, 4], 1.0, &mut rng);
    let x = Tensor::uniform(&[4, 2], 1.0, &mut rng);
    let err = grad_check(
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            Ok::<_, crate::Error>(g.sum(y))
        },
        &[w, x],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn unused_parameter_gets_zero_gradient() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::ones(&[2]));
    let unused = g.leaf(Tensor::ones(&[3]));
    let loss = g.sum(a);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(unused).is_none());
    let like = g.value(unused).clone();
    assert_eq!(grads.get_or_zeros(unused, &like), Tensor::zeros(&[3]));
}

#[test]
fn gradients_accumulate_over_paths() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let b = g.add(a, a).unwrap();
    let c = g.add(b, a).unwrap();
    let loss = g.sum(c);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(a).unwrap().data(), &[3.0, 3.0]);
}

/// Random probe weights turn any tensor into a scalar with a generic gradient.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let shape = g.shape(y).to_vec();
    let probe = g.constant(Tensor::uniform(&shape, 1.0, &mut rng));
    let flat_y = g.reshape(y, &[1, shape.iter().product()])?;
    let flat_p = g.reshape(probe, &[shape.iter().product(), 1])?;
    let s = g.matmul(flat_y, flat_p)?;
    Ok(g.sum(s))
}

const SEEDS: u64 = 20;

#[test]
fn gradcheck_each_op_over_seeds() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let b = Tensor::uniform(&[4, 2], 1.0, &mut rng);
        let c = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let bias = Tensor::uniform(&[4], 1.0, &mut rng);
        let gamma = Tensor::uniform(&[4], 1.0, &mut rng);

        let cases: Vec<(&str, f64)> = vec![
            (
                "matmul",
                grad_check(
                    |g, v| {
                        let y = g.matmul(v[0], v[1])?;
                        weighted_sum(g, y, seed)
                    },
                    &[a.clone(), b.clone()],
                    1e-5,
                )
                .unwrap(),
            ),
            (
                "linear",
                grad_check(
                    |g, v| {
                        let y = g.linear(v[0], v[1], v[2])?;
                        weighted_sum(g, y, seed)
                    },
                    &[a.clone(), b.clone(), Tensor::uniform(&[2], 1.0, &mut rng)],
                    1e-5,
                )
                .unwrap(),
            ),
            (
                "add_sub_scale",
                grad_check(
                    |g, v| {
                        let s = g.add(v[0], v[1])?;
                        let d = g.sub(s, v[1])?;
                        let d = g.sub(d, v[1])?;
                        let y = g.scale(d, -1.7);
                        weighted_sum(g, y, seed)
                    },
                    &[a.clone(), c.clone()],
                    1e-5,
                )
                .unwrap(),
            ),
            (
                "add_row",
                grad_check(
                    |g, v| {
                        let y = g.add_row(v[0], v[1])?;
                        weighted_sum(g, y, seed)
                    },
                    &[a.clone(), bias.clone()],
                    1e-5,
                )
                .unwrap(),
            ),
            (
                "relu",
                grad_check(
                    |g, v| {
                        let y = g.relu(v[0]);
                        weighted_sum(g, y, seed)
                    },
                    std::slice::from_ref(&a),
                    1e-6,
                )
                .unwrap(),
            ),
            (
                "softmax_rows",
                grad_check(
                    |g, v| {
                        let y = g.softmax(v[0], 1)?;
                        weighted_sum(g, y, seed)
                    },
                    std::slice::from_ref(&a),
                    1e-5,
                )
                .unwrap(),
            ),
            (
                "softmax_cols",
                grad_check(
                    |g, v| {
                        let y = g.softmax(v[0], 0)?;
                        weighted_sum(g, y, seed)
                    },
                    std::slice::from_ref(&a),
                    1e-5,
                )
                .unwrap(),
            ),
            (
                "softmax_matmul",
                grad_check(
                    |g, v| {
                        let y = g.matmul(v[0], v[1])?;
                        let y = g.softmax(y, 1)?;
                        weighted_sum(g, y, seed)
                    },
                    &[a.clone(), b.clone()],
                    1e-5,
                )
                .unwrap(),
            ),
            (
                "layer_norm",
                grad_check(
                    |g, v| {
                        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                        weighted_sum(g, y, seed)
                    },
                    &[a.clone(), gamma.clone(), bias.clone()],
                    1e-5,
                )
                .unwrap(),
            ),
            (
                "transpose_reshape_permute_gather_concat",
                grad_check(
                    |g, v| {
                        let t = g.transpose(v[0])?;
                        let r = g.reshape(t, &[2, 2, 3])?;
                        let p = g.permute(r, &[2, 0, 1])?;
                        let p = g.reshape(p, &[3, 4])?;
                        let rows = g.gather_rows(p, &[2, 0, 0, 1])?;
                        let y = g.concat(&[rows, v[1]])?;
                        weighted_sum(g, y, seed)
                    },
                    &[a.clone(), c.clone()],
                    1e-5,
                )
                .unwrap(),
            ),
            (
                "cross_entropy",
                grad_check(
                    |g, v| g.cross_entropy(v[0], &[1, 3, 0]),
                    std::slice::from_ref(&a),
                    1e-5,
                )
                .unwrap(),
            ),
        ];
        for (name, err) in cases {
            assert!(err < 1e-4, "seed {seed} op {name}: rel err {err}");
        }
    }
}

#[test]
fn gradcheck_grouped_attention_over_seeds() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let q = Tensor::uniform(&[6, 4], 1.5, &mut rng);
        let k = Tensor::uniform(&[9, 4], 1.5, &mut rng);
        let v = Tensor::uniform(&[9, 4], 1.5, &mut rng);
        let err = grad_check(
            |g, x| {
                let y = g.grouped_attention(x[0], x[1], x[2], 3, 2)?;
                weighted_sum(g, y, seed)
            },
            &[q, k, v],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn grouped_attention_validates_layout() {
    let mut g = Graph::new();
    let q = g.constant(Tensor::zeros(&[4, 6]));
    let k = g.constant(Tensor::zeros(&[6, 6]));
    assert_eq!(
        g.grouped_attention(q, k, k, 1, 4).unwrap_err(),
        NumericsError::HeadSplit { dim: 6, heads: 4 }
    );
    assert!(matches!(
        g.grouped_attention(q, k, k, 4, 1),
        Err(NumericsError::GroupSplit { .. })
    ));
}

proptest! {
    #[test]
    fn matmul_agrees_with_triple_loop(
        m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::uniform(&[m, k], 2.0, &mut rng);
        let b = Tensor::uniform(&[k, n], 2.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        for (x, y) in c.data().iter().zip(naive_matmul(&a, &b)) {
            prop_assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_at_extreme_magnitudes(
        values in proptest::collection::vec(-1e4f64..1e4, 1..32)
    ) {
        let s = softmax_of(&values);
        prop_assert!(s.iter().all(|&v| v >= 0.0));
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn permute_then_inverse_is_identity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::uniform(&[2, 3, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let p = g.permute(x, &[1, 2, 0]).unwrap();
        let back = g.permute(p, &[2, 0, 1]).unwrap();
        prop_assert_eq!(g.value(back), &t);
    }
}
