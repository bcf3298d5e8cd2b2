use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduce any node to a scalar through a fixed random linear functional, so
/// every output coordinate carries a distinct weight into the loss.
fn weighted_loss(g: &mut Graph<f64>, rng: &mut ChaCha8Rng, out: NodeId) -> NodeId {
    let w = rand_tensor(rng, g.value(out).shape());
    let w = g.leaf(w).unwrap();
    g.dot(out, w).unwrap()
}

#[test]
fn softmax_of_equal_logits_splits_mass() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![0.0, 0.0]).unwrap()).unwrap();
    let s = g.softmax(x).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn identity_matmul() {
    let mut g = Graph::new();
    let i = g.leaf(Tensor::identity(2)).unwrap();
    let b = g
        .leaf(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap())
        .unwrap();
    let c = g.matmul(i, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 4.0]);
    assert_eq!(g.value(c).shape(), &[2, 1]);
}

#[test]
fn tanh_at_origin() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![0.0]).unwrap()).unwrap();
    let t = g.tanh(x).unwrap();
    assert_eq!(g.value(t).data(), &[0.0]);
}

#[test]
fn square_gradient() {
    let mut g = Graph::new();
    let w = g.leaf(Tensor::vector(vec![3.0]).unwrap()).unwrap();
    let sq = g.mul(w, w).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(w).data(), &[6.0]);
}

#[test]
fn log_softmax_gradient_at_origin() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::vector(vec![0.0, 0.0]).unwrap()).unwrap();
    let s = g.softmax(x).unwrap();
    let l = g.log(s).unwrap();
    let first = g.select(l, vec![0]).unwrap();
    let grads = g.backward(first).unwrap();
    let d = grads.get(x);
    assert!((d.data()[0] - 0.5).abs() < 1e-15);
    assert!((d.data()[1] + 0.5).abs() < 1e-15);
}

#[test]
fn untouched_leaf_has_zero_gradient() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
    let unused = g.leaf(Tensor::zeros(&[3, 2])).unwrap();
    let loss = g.sum(a).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(unused), Tensor::zeros(&[3, 2]));
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
    assert!(matches!(g.backward(a), Err(crate::Error::Contract(_))));
}

#[test]
fn shape_mismatch_names_shapes() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::<f64>::zeros(&[2, 3])).unwrap();
    let b = g.leaf(Tensor::<f64>::zeros(&[2, 3])).unwrap();
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
}

#[test]
fn non_finite_output_names_node() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::vector(vec![0.0]).unwrap()).unwrap();
    match g.log(a) {
        Err(crate::Error::Numeric { node, op, .. }) => {
            assert_eq!(node, 1);
            assert_eq!(op, "log");
        }
        other => panic!("expected numeric error, got {other:?}"),
    }
    assert!(g.leaf(Tensor::vector(vec![f64::NAN]).unwrap()).is_err());
}

#[test]
fn finite_diff_exact_for_linear_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let w = g.leaf(rand_tensor(&mut rng, &[5])).unwrap();
    let loss = weighted_loss(&mut g, &mut rng, w);
    for h in [1e-3, 1e-4, 1e-6] {
        assert!(finite_diff_check(&g, loss, w, h).unwrap() <= 1e-9);
    }
}

#[test]
fn finite_diff_quadratic_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::new();
    let w = g.leaf(rand_tensor(&mut rng, &[6])).unwrap();
    let sq = g.mul(w, w).unwrap();
    let loss = weighted_loss(&mut g, &mut rng, sq);
    assert!(finite_diff_check(&g, loss, w, 1e-5).unwrap() <= 1e-6);
}

#[test]
fn finite_diff_constant_loss() {
    let mut g = Graph::new();
    let w = g.leaf(Tensor::vector(vec![1.0, -1.0]).unwrap()).unwrap();
    let c = g.leaf(Tensor::scalar(4.0)).unwrap();
    let loss = g.sum(c).unwrap();
    assert_eq!(g.backward(loss).unwrap().get(w).data(), &[0.0, 0.0]);
    assert_eq!(finite_diff_check(&g, loss, w, 1e-5).unwrap(), 0.0);
}

/// One randomized graph per op kind; every leaf is checked against central differences.
#[test]
fn every_op_matches_finite_differences() {
    type Build = fn(&mut Graph<f64>, &mut ChaCha8Rng) -> (Vec<NodeId>, NodeId);
    let cases: Vec<(&str, Build)> = vec![
        ("matmul", |g, r| {
            let a = g.leaf(rand_tensor(r, &[3, 4])).unwrap();
            let b = g.leaf(rand_tensor(r, &[4, 2])).unwrap();
            (vec![a, b], g.matmul(a, b).unwrap())
        }),
        ("add", |g, r| {
            let a = g.leaf(rand_tensor(r, &[3, 4])).unwrap();
            let b = g.leaf(rand_tensor(r, &[3, 4])).unwrap();
            (vec![a, b], g.add(a, b).unwrap())
        }),
        ("add_broadcast", |g, r| {
            let a = g.leaf(rand_tensor(r, &[3, 4])).unwrap();
            let b = g.leaf(rand_tensor(r, &[4])).unwrap();
            (vec![a, b], g.add(a, b).unwrap())
        }),
        ("mul", |g, r| {
            let a = g.leaf(rand_tensor(r, &[2, 3])).unwrap();
            let b = g.leaf(rand_tensor(r, &[2, 3])).unwrap();
            (vec![a, b], g.mul(a, b).unwrap())
        }),
        ("scale", |g, r| {
            let a = g.leaf(rand_tensor(r, &[4])).unwrap();
            (vec![a], g.scale(a, -1.7).unwrap())
        }),
        ("embedding_lookup", |g, r| {
            let t = g.leaf(rand_tensor(r, &[5, 3])).unwrap();
            (vec![t], g.embedding_lookup(t, vec![4, 0, 4, 2]).unwrap())
        }),
        ("mean_pool_rows", |g, r| {
            let x = g.leaf(rand_tensor(r, &[4, 3])).unwrap();
            (vec![x], g.mean_pool_rows(x).unwrap())
        }),
        ("tanh", |g, r| {
            let x = g.leaf(rand_tensor(r, &[2, 3])).unwrap();
            (vec![x], g.tanh(x).unwrap())
        }),
        ("exp", |g, r| {
            let x = g.leaf(rand_tensor(r, &[5])).unwrap();
            (vec![x], g.exp(x).unwrap())
        }),
        ("log", |g, r| {
            let x = rand_tensor(r, &[5]).map(|v| v.abs() + 0.5);
            let x = g.leaf(x).unwrap();
            (vec![x], g.log(x).unwrap())
        }),
        ("softmax_lastdim", |g, r| {
            let x = g.leaf(rand_tensor(r, &[3, 4])).unwrap();
            (vec![x], g.softmax(x).unwrap())
        }),
        ("log_softmax_lastdim", |g, r| {
            let x = g.leaf(rand_tensor(r, &[3, 4])).unwrap();
            (vec![x], g.log_softmax(x).unwrap())
        }),
        ("logsumexp_lastdim", |g, r| {
            let x = g.leaf(rand_tensor(r, &[3, 4])).unwrap();
            (vec![x], g.logsumexp(x).unwrap())
        }),
        ("sum", |g, r| {
            let x = g.leaf(rand_tensor(r, &[2, 2])).unwrap();
            (vec![x], g.sum(x).unwrap())
        }),
        ("concat_lastdim", |g, r| {
            let a = g.leaf(rand_tensor(r, &[2, 3])).unwrap();
            let b = g.leaf(rand_tensor(r, &[2, 1])).unwrap();
            (vec![a, b], g.concat(&[a, b, a]).unwrap())
        }),
        ("layernorm_lastdim", |g, r| {
            let x = g.leaf(rand_tensor(r, &[3, 5])).unwrap();
            (vec![x], g.layernorm(x).unwrap())
        }),
        ("scaled_dot_attention", |g, r| {
            let q = g.leaf(rand_tensor(r, &[3, 4])).unwrap();
            let k = g.leaf(rand_tensor(r, &[5, 4])).unwrap();
            let v = g.leaf(rand_tensor(r, &[5, 2])).unwrap();
            (vec![q, k, v], g.attention(q, k, v).unwrap())
        }),
        ("transpose", |g, r| {
            let x = g.leaf(rand_tensor(r, &[2, 3])).unwrap();
            (vec![x], g.transpose(x).unwrap())
        }),
        ("reshape", |g, r| {
            let x = g.leaf(rand_tensor(r, &[2, 3])).unwrap();
            (vec![x], g.reshape(x, vec![6]).unwrap())
        }),
    ];
    for (seed, (name, build)) in cases.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed as u64);
        let mut g = Graph::new();
        let (leaves, out) = build(&mut g, &mut rng);
        // A nonlinearity after the op keeps second-order terms in play.
        let squashed = g.tanh(out).unwrap();
        let loss = weighted_loss(&mut g, &mut rng, squashed);
        for leaf in leaves {
            let err = finite_diff_check(&g, loss, leaf, 1e-5).unwrap();
            assert!(err <= 1e-6, "{name}: relative error {err:e}");
        }
    }
}

#[test]
fn three_layer_composite_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::new();
    let x = g.leaf(rand_tensor(&mut rng, &[4, 5])).unwrap();
    let w1 = g.leaf(rand_tensor(&mut rng, &[5, 6])).unwrap();
    let w2 = g.leaf(rand_tensor(&mut rng, &[6, 6])).unwrap();
    let w3 = g.leaf(rand_tensor(&mut rng, &[6, 3])).unwrap();
    let h1 = g.matmul(x, w1).unwrap();
    let h1 = g.tanh(h1).unwrap();
    let h2 = g.matmul(h1, w2).unwrap();
    let h2 = g.layernorm(h2).unwrap();
    let h3 = g.matmul(h2, w3).unwrap();
    let lp = g.log_softmax(h3).unwrap();
    let loss = weighted_loss(&mut g, &mut rng, lp);
    for leaf in [x, w1, w2, w3] {
        assert!(finite_diff_check(&g, loss, leaf, 1e-5).unwrap() <= 1e-6);
    }
}

#[test]
fn backward_is_bit_reproducible() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let w = g.leaf(rand_tensor(&mut rng, &[4, 4])).unwrap();
        let x = g.leaf(rand_tensor(&mut rng, &[3, 4])).unwrap();
        let a = g.attention(x, x, x).unwrap();
        let b = g.matmul(a, w).unwrap();
        let c = g.matmul(b, w).unwrap();
        let loss = weighted_loss(&mut g, &mut rng, c);
        g.backward(loss).unwrap().get(w)
    };
    let first = build();
    let second = build();
    let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&first), bits(&second));
}

#[test]
fn works_in_single_precision() {
    let mut g = Graph::<f32>::new();
    let w = g.leaf(Tensor::vector(vec![3.0f32]).unwrap()).unwrap();
    let sq = g.mul(w, w).unwrap();
    let loss = g.sum(sq).unwrap();
    assert_eq!(g.backward(loss).unwrap().get(w).data(), &[6.0f32]);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..4, logits in proptest::collection::vec(-30.0f64..30.0, 1..24)) {
        let cols = (logits.len() / rows).max(1);
        let data: Vec<f64> = logits.iter().copied().cycle().take(rows * cols).collect();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(rows, cols, data).unwrap()).unwrap();
        let s = g.softmax(x).unwrap();
        for r in 0..rows {
            let row = g.value(s).row(r);
            let total: f64 = row.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }
}
