//! Every primitive against central differences, plus linearity of backward.

use numgrad::{fd_check, Axis, Graph, Tensor, TensorMap, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

/// Values in [-1, 1] kept at least `gap` away from every kink in `kinks`.
fn away_from(rng: &mut ChaCha8Rng, n: usize, kinks: &[f64], gap: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-1.0..1.0);
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
        .collect()
}

fn check(name: &str, params: TensorMap, build: impl Fn(&Graph) -> Var) {
    // weighted sum so every output entry contributes a distinct sensitivity
    let report = fd_check(
        |g| {
            let out = build(g);
            let w = g.input("__probe");
            let prod = g.mul(out, w);
            Ok(g.sum(prod))
        },
        &params,
        1e-5,
    );
    let report = match report {
        Ok(r) => r,
        Err(numgrad::GradError::Unbound(_)) => panic!("{name}: probe missing"),
        Err(e) => panic!("{name}: {e}"),
    };
    assert!(report.max_rel_error < TOL, "{name}: {report:?}");
}

fn probe_for(params: &mut TensorMap, build: impl Fn(&Graph) -> Var, seed: u64) {
    let g = Graph::new();
    let out = build(&g);
    let mut bound = params.clone();
    bound.insert("__probe".into(), Tensor::scalar(1.0));
    let shape = g.eval(&bound, out).unwrap().shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    params.insert("__probe".into(), Tensor::new(shape, data).unwrap());
}

fn run(name: &str, inputs: Vec<(&str, Vec<usize>, Vec<f64>)>, build: impl Fn(&Graph) -> Var + Copy) {
    let mut params = TensorMap::new();
    for (n, shape, data) in inputs {
        params.insert(n.to_string(), Tensor::new(shape, data).unwrap().with_grad());
    }
    probe_for(&mut params, build, 99);
    check(name, params, build);
}

#[test]
fn elementwise_binary_ops_with_broadcasting() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = away_from(&mut rng, 12, &[], 0.0);
    let row = away_from(&mut rng, 4, &[0.0], 0.2);
    let col = away_from(&mut rng, 3, &[0.0], 0.2);
    let full = away_from(&mut rng, 12, &[0.0], 0.2);
    for (label, bshape, bdata) in [("row", vec![1, 4], row), ("col", vec![3, 1], col), ("full", vec![3, 4], full)] {
        let inputs = || vec![("a", vec![3, 4], a.clone()), ("b", bshape.clone(), bdata.clone())];
        run(&format!("add/{label}"), inputs(), |g| g.add(g.input("a"), g.input("b")));
        run(&format!("sub/{label}"), inputs(), |g| g.sub(g.input("a"), g.input("b")));
        run(&format!("mul/{label}"), inputs(), |g| g.mul(g.input("a"), g.input("b")));
        run(&format!("div/{label}"), inputs(), |g| g.div(g.input("a"), g.input("b")));
    }
}

#[test]
fn matmul_transpose_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = away_from(&mut rng, 15, &[], 0.0);
    let b = away_from(&mut rng, 10, &[], 0.0);
    run("matmul", vec![("a", vec![3, 5], a.clone()), ("b", vec![5, 2], b.clone())], |g| g.matmul(g.input("a"), g.input("b")));
    run("transpose", vec![("a", vec![3, 5], a.clone())], |g| g.transpose(g.input("a")));
    run("sum", vec![("a", vec![3, 5], a.clone())], |g| g.sum(g.input("a")));
    run("mean", vec![("a", vec![3, 5], a.clone())], |g| g.mean(g.input("a")));
    for axis in [Axis::Rows, Axis::Cols] {
        run("sum_axis", vec![("a", vec![3, 5], a.clone())], move |g| g.sum_axis(g.input("a"), axis));
        run("mean_axis", vec![("a", vec![3, 5], a.clone())], move |g| g.mean_axis(g.input("a"), axis));
        run("prod_axis", vec![("a", vec![3, 5], a.clone())], move |g| g.prod_axis(g.input("a"), axis));
    }
}

#[test]
fn prod_axis_gradient_with_zero_entry() {
    run("prod_axis/zero", vec![("a", vec![3, 2], vec![0.0, 0.5, 0.7, -0.2, 0.9, 1.1])], |g| g.prod_axis(g.input("a"), Axis::Rows));
}

#[test]
fn unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let smooth = away_from(&mut rng, 10, &[], 0.0);
    let positive: Vec<f64> = smooth.iter().map(|v| v.abs() + 0.3).collect();
    let kinked = away_from(&mut rng, 10, &[0.0], 0.05);
    let huber = away_from(&mut rng, 10, &[-0.5, 0.5], 0.05);
    let shape = vec![2, 5];
    type Case = (&'static str, Vec<f64>, fn(&Graph, Var) -> Var);
    let cases: Vec<Case> = vec![
        ("relu", kinked.clone(), |g, x| g.relu(x)),
        ("abs", kinked.clone(), |g, x| g.abs(x)),
        ("clamp_min", kinked.clone(), |g, x| g.clamp_min(x, 0.0)),
        ("sigmoid", smooth.clone(), |g, x| g.sigmoid(x)),
        ("softplus", smooth.clone(), |g, x| g.softplus(x)),
        ("exp", smooth.clone(), |g, x| g.exp(x)),
        ("log", positive.clone(), |g, x| g.log(x)),
        ("sqrt", positive.clone(), |g, x| g.sqrt(x)),
        ("square", smooth.clone(), |g, x| g.square(x)),
        ("sin", smooth.clone(), |g, x| g.sin(x)),
        ("cos", smooth.clone(), |g, x| g.cos(x)),
        ("smooth_l1", huber.clone(), |g, x| g.smooth_l1(x, 0.5)),
        ("scale", smooth.clone(), |g, x| g.scale(x, -2.5)),
        ("add_scalar", smooth.clone(), |g, x| g.add_scalar(x, 0.7)),
        ("softmax", smooth.clone(), |g, x| g.softmax(x)),
        ("row_norm", smooth.clone(), |g, x| g.row_norm(x)),
    ];
    for (name, data, f) in cases {
        let mut params = TensorMap::new();
        params.insert("x".into(), Tensor::new(shape.clone(), data).unwrap().with_grad());
        let build = move |g: &Graph| f(g, g.input("x"));
        probe_for(&mut params, build, 5);
        check(name, params, build);
    }
}

#[test]
fn layer_norm_all_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    run(
        "layer_norm",
        vec![
            ("x", vec![3, 6], away_from(&mut rng, 18, &[], 0.0)),
            ("gamma", vec![1, 6], away_from(&mut rng, 6, &[], 0.0)),
            ("beta", vec![1, 6], away_from(&mut rng, 6, &[], 0.0)),
        ],
        |g| g.layer_norm(g.input("x"), g.input("gamma"), g.input("beta"), 1e-5),
    );
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = away_from(&mut rng, 12, &[], 0.0);
    let b = away_from(&mut rng, 6, &[], 0.0);
    let c = away_from(&mut rng, 8, &[], 0.0);
    run("concat_cols", vec![("a", vec![3, 4], a.clone()), ("b", vec![3, 2], b.clone())], |g| {
        g.concat_cols(&[g.input("a"), g.input("b"), g.input("a")])
    });
    run("concat_rows", vec![("a", vec![3, 4], a.clone()), ("c", vec![2, 4], c.clone())], |g| g.concat_rows(&[g.input("c"), g.input("a")]));
    run("slice_cols", vec![("a", vec![3, 4], a.clone())], |g| g.slice_cols(g.input("a"), 1, 3));
    run("slice_rows", vec![("a", vec![3, 4], a.clone())], |g| g.slice_rows(g.input("a"), 1, 3));
    run("reshape", vec![("a", vec![3, 4], a.clone())], |g| g.reshape(g.input("a"), &[2, 6]));
}

fn composite(g: &Graph, x: Var) -> Var {
    let w = g.input("w");
    let h = g.matmul(x, w);
    let t = g.sigmoid(h);
    let e = g.softplus(t);
    g.sum(e)
}

fn other(g: &Graph, x: Var) -> Var {
    let s = g.sin(x);
    let sq = g.square(s);
    g.mean(sq)
}

fn grads_of(params: &TensorMap, build: impl Fn(&Graph) -> Var) -> Vec<f64> {
    let g = Graph::new();
    let root = build(&g);
    g.eval(params, root).unwrap();
    g.backward(root).unwrap()["x"].data().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn backward_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = TensorMap::new();
        params.insert("x".into(), Tensor::matrix(2, 3, away_from(&mut rng, 6, &[], 0.0)).unwrap().with_grad());
        params.insert("w".into(), Tensor::matrix(3, 2, away_from(&mut rng, 6, &[], 0.0)).unwrap());
        let combined = grads_of(&params, |g| {
            let x = g.input("x");
            let f = composite(g, x);
            let h = other(g, x);
            let fa = g.scale(f, a);
            let hb = g.scale(h, b);
            g.add(fa, hb)
        });
        let gf = grads_of(&params, |g| composite(g, g.input("x")));
        let gh = grads_of(&params, |g| other(g, g.input("x")));
        for i in 0..combined.len() {
            let expect = a * gf[i] + b * gh[i];
            prop_assert!((combined[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }
}
