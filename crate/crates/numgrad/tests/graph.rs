use numgrad::{fd_check, GradError, Graph, Tensor, TensorMap, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bind(pairs: Vec<(&str, Tensor)>) -> TensorMap {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn square_value_and_derivative() {
    let g = Graph::new();
    let x = g.input("x");
    let y = g.mul(x, x);
    let params = bind(vec![("x", Tensor::scalar(3.0).with_grad())]);
    assert_eq!(g.eval(&params, y).unwrap().item(), Some(9.0));
    assert_eq!(g.backward(y).unwrap()["x"].item(), Some(6.0));
}

#[test]
fn sum_of_vector() {
    let g = Graph::new();
    let x = g.input("x");
    let s = g.sum(x);
    let params = bind(vec![("x", Tensor::vector(vec![1.0, 2.0, 3.0]))]);
    assert_eq!(g.eval(&params, s).unwrap().item(), Some(6.0));
}

#[test]
fn grad_of_sum_of_product_is_other_factor() {
    let g = Graph::new();
    let a = g.input("a");
    let b = g.input("b");
    let p = g.mul(a, b);
    let s = g.sum(p);
    let bv = Tensor::matrix(2, 2, vec![5.0, -1.0, 0.5, 2.0]).unwrap();
    let params = bind(vec![("a", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap().with_grad()), ("b", bv.clone())]);
    g.eval(&params, s).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads["a"].data(), bv.data());
    assert!(!grads.contains_key("b"), "b was bound without requires_grad");
}

fn mlp(g: &Graph) -> Var {
    let x = g.input("x");
    let w1 = g.input("w1");
    let b1 = g.input("b1");
    let w2 = g.input("w2");
    let b2 = g.input("b2");
    let h = g.affine(x, w1, b1);
    let h = g.relu(h);
    g.affine(h, w2, b2)
}

#[test]
fn mlp_forward_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, din, dh, dout) = (5, 4, 6, 3);
    let x = random_matrix(&mut rng, n, din);
    let w1 = random_matrix(&mut rng, din, dh);
    let b1 = random_matrix(&mut rng, 1, dh);
    let w2 = random_matrix(&mut rng, dh, dout);
    let b2 = random_matrix(&mut rng, 1, dout);
    let params = bind(vec![("x", x.clone()), ("w1", w1.clone()), ("b1", b1.clone()), ("w2", w2.clone()), ("b2", b2.clone())]);
    let g = Graph::new();
    let out = mlp(&g);
    let got = g.eval(&params, out).unwrap();

    for r in 0..n {
        let mut hidden = vec![0.0; dh];
        for (j, h) in hidden.iter_mut().enumerate() {
            let mut acc = b1.at(0, j);
            for k in 0..din {
                acc += x.at(r, k) * w1.at(k, j);
            }
            *h = acc.max(0.0);
        }
        for j in 0..dout {
            let mut acc = b2.at(0, j);
            for (k, h) in hidden.iter().enumerate() {
                acc += h * w2.at(k, j);
            }
            assert!((got.at(r, j) - acc).abs() < 1e-12, "row {r} col {j}: {} vs {acc}", got.at(r, j));
        }
    }
}

#[test]
fn softmax_cross_entropy_composite_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut params = TensorMap::new();
    params.insert("w".into(), random_matrix(&mut rng, 4, 5).with_grad());
    params.insert("x".into(), random_matrix(&mut rng, 3, 4).with_grad());
    let targets = Tensor::matrix(3, 5, vec![0., 1., 0., 0., 0., 0., 0., 0., 1., 0., 1., 0., 0., 0., 0.]).unwrap();
    let build = |g: &Graph| {
        let logits = g.matmul(g.input("x"), g.input("w"));
        let p = g.softmax(logits);
        let lp = g.log(p);
        let t = g.constant(targets.clone());
        let prod = g.mul(t, lp);
        let s = g.sum(prod);
        Ok(g.neg(s))
    };
    let report = fd_check(build, &params, 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
    assert_eq!(report.checked, 20 + 12);
}

#[test]
fn fd_check_cubic_is_tight() {
    let params = bind(vec![("x", Tensor::scalar(2.0).with_grad())]);
    let report = fd_check(
        |g| {
            let x = g.input("x");
            let x2 = g.mul(x, x);
            Ok(g.mul(x2, x))
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}

#[test]
fn fd_check_constant_function_is_exact_zero() {
    let params = bind(vec![("x", Tensor::vector(vec![0.3, -0.7]).with_grad())]);
    let report = fd_check(
        |g| {
            let _x = g.input("x");
            Ok(g.scalar(4.0))
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert_eq!(report.max_rel_error, 0.0);
    assert_eq!(report.checked, 2);
}

#[test]
fn fd_check_rejects_nondeterministic_function() {
    use std::cell::Cell;
    let calls = Cell::new(0.0);
    let params = bind(vec![("x", Tensor::scalar(1.0).with_grad())]);
    let err = fd_check(
        |g| {
            calls.set(calls.get() + 1.0);
            let x = g.input("x");
            Ok(g.add_scalar(x, calls.get()))
        },
        &params,
        1e-5,
    )
    .unwrap_err();
    assert!(matches!(err, GradError::NonDeterministic(_)), "{err}");
}

#[test]
fn fd_check_rejects_bad_step() {
    let params = bind(vec![("x", Tensor::scalar(1.0).with_grad())]);
    let err = fd_check(|g| Ok(g.input("x")), &params, 0.0).unwrap_err();
    assert_eq!(err, GradError::BadStep(0.0));
}

#[test]
fn backward_before_eval_is_an_error() {
    let g = Graph::new();
    let x = g.input("x");
    let y = g.mul(x, x);
    assert_eq!(g.backward(y).unwrap_err(), GradError::NotEvaluated);
}

#[test]
fn backward_from_non_scalar_is_an_error() {
    let g = Graph::new();
    let x = g.input("x");
    let y = g.mul(x, x);
    let params = bind(vec![("x", Tensor::vector(vec![1.0, 2.0]).with_grad())]);
    g.eval(&params, y).unwrap();
    assert!(matches!(g.backward(y).unwrap_err(), GradError::NonScalarRoot(s) if s == vec![2]));
}

#[test]
fn shape_mismatch_names_the_operation() {
    let g = Graph::new();
    let y = g.matmul(g.input("a"), g.input("b"));
    let params = bind(vec![("a", Tensor::zeros(&[2, 3])), ("b", Tensor::zeros(&[2, 3]))]);
    match g.eval(&params, y).unwrap_err() {
        GradError::Shape { op, detail } => {
            assert_eq!(op, "matmul");
            assert!(detail.contains("node 2"), "{detail}");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn non_finite_intermediate_reports_node_index() {
    let g = Graph::new();
    let x = g.input("x");
    let l = g.log(x);
    let s = g.sum(l);
    let params = bind(vec![("x", Tensor::vector(vec![1.0, 0.0]))]);
    assert_eq!(g.eval(&params, s).unwrap_err(), GradError::NonFinite { node: 1, op: "log".into() });
}

#[test]
fn unbound_leaf_is_reported() {
    let g = Graph::new();
    let x = g.input("missing");
    assert_eq!(g.eval(&TensorMap::new(), x).unwrap_err(), GradError::Unbound("missing".into()));
}

#[test]
fn unused_leaves_get_exact_zero_gradients() {
    let g = Graph::new();
    let x = g.input("x");
    let _unused = g.input("u");
    let y = g.square(x);
    let s = g.sum(y);
    let params = bind(vec![("x", Tensor::vector(vec![1.0, 2.0]).with_grad()), ("u", Tensor::zeros(&[3, 2]).with_grad())]);
    g.eval(&params, s).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads["u"].data(), &[0.0; 6]);
    assert_eq!(grads["u"].shape(), &[3, 2]);
}

#[test]
fn fan_out_accumulates_additively() {
    // f = x*x + 3x uses x three times
    let g = Graph::new();
    let x = g.input("x");
    let sq = g.mul(x, x);
    let lin = g.scale(x, 3.0);
    let f = g.add(sq, lin);
    let params = bind(vec![("x", Tensor::scalar(1.5).with_grad())]);
    g.eval(&params, f).unwrap();
    assert_eq!(g.backward(f).unwrap()["x"].item(), Some(2.0 * 1.5 + 3.0));
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let g = Graph::new();
    let x = g.input("x");
    let r = g.relu(x);
    let s = g.sum(r);
    let params = bind(vec![("x", Tensor::vector(vec![0.0, 1.0, -1.0]).with_grad())]);
    g.eval(&params, s).unwrap();
    assert_eq!(g.backward(s).unwrap()["x"].data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn repeated_evaluation_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params: TensorMap = ["x", "w1", "b1", "w2", "b2"]
        .iter()
        .zip([(6, 5), (5, 8), (1, 8), (8, 2), (1, 2)])
        .map(|(n, (r, c))| (n.to_string(), random_matrix(&mut rng, r, c).with_grad()))
        .collect();
    let run = || {
        let g = Graph::new();
        let out = mlp(&g);
        let sq = g.square(out);
        let loss = g.mean(sq);
        let v = g.eval(&params, loss).unwrap().item().unwrap();
        let grads = g.backward(loss).unwrap();
        let flat: Vec<u64> = grads.values().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect();
        (v.to_bits(), flat)
    };
    assert_eq!(run(), run());
}
