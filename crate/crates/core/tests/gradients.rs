//! Analytic gradients versus central finite differences for every
//! differentiable graph operation.

use evifed_core::gradcheck::{numeric_gradient, relative_error, STEP};
use evifed_core::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;
const CASES: u64 = 100;

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

/// Scalarizes `build` with a fixed random projection and compares the
/// gradient of every input against finite differences.
fn check(inputs: &[Tensor], build: &Build, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        g.value(out).numel()
    };
    let weights: Vec<f64> = (0..probe).map(|_| rng.random_range(-1.0..1.0)).collect();

    let forward = |ins: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        g.value(out).data().iter().zip(&weights).map(|(a, b)| a * b).sum()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(Tensor::new(shape, weights.clone()).unwrap());
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (idx, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[idx]).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]);
        let numeric = numeric_gradient(
            |x| {
                let mut ins = inputs.to_vec();
                ins[idx] = Tensor::new(t.shape().to_vec(), x.to_vec()).unwrap();
                forward(&ins)
            },
            t.data(),
            STEP,
        );
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn run(name: &str, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, build: &Build) {
    let mut worst: f64 = 0.0;
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = make(&mut rng);
        worst = worst.max(check(&inputs, build, seed));
    }
    assert!(worst < TOL, "{name}: worst relative error {worst:e}");
}

#[test]
fn matmul() {
    run(
        "matmul",
        |r| vec![random(r, 3, 4, -1.0, 1.0), random(r, 4, 2, -1.0, 1.0)],
        &|g, v| g.matmul(v[0], v[1]),
    );
}

#[test]
fn matmul_bt() {
    run(
        "matmul_bt",
        |r| vec![random(r, 3, 4, -1.0, 1.0), random(r, 5, 4, -1.0, 1.0)],
        &|g, v| g.matmul_bt(v[0], v[1]),
    );
}

#[test]
fn transpose() {
    run("transpose", |r| vec![random(r, 3, 2, -1.0, 1.0)], &|g, v| g.transpose(v[0]));
}

#[test]
fn elementwise_binary() {
    let make = |r: &mut ChaCha8Rng| vec![random(r, 2, 3, -2.0, 2.0), random(r, 2, 3, -2.0, 2.0)];
    run("add", make, &|g, v| g.add(v[0], v[1]));
    run("sub", make, &|g, v| g.sub(v[0], v[1]));
    run("mul", make, &|g, v| g.mul(v[0], v[1]));
}

#[test]
fn scale_and_shift() {
    let make = |r: &mut ChaCha8Rng| vec![random(r, 2, 3, -2.0, 2.0)];
    run("scale", make, &|g, v| g.scale(v[0], -1.7));
    run("add_scalar", make, &|g, v| g.add_scalar(v[0], 2.5));
}

#[test]
fn row_bias_and_broadcasts() {
    run(
        "add_row_bias",
        |r| vec![random(r, 4, 3, -1.0, 1.0), random(r, 1, 3, -1.0, 1.0)],
        &|g, v| g.add_row_bias(v[0], v[1]),
    );
    run("broadcast_cols", |r| vec![random(r, 4, 1, -1.0, 1.0)], &|g, v| g.broadcast_cols(v[0], 3));
    run("broadcast_rows", |r| vec![random(r, 1, 4, -1.0, 1.0)], &|g, v| g.broadcast_rows(v[0], 3));
}

#[test]
fn exp_activation() {
    // stay clear of the clamp kink at the ceiling
    run("exp_activation", |r| vec![random(r, 2, 5, -3.0, 3.0)], &|g, v| {
        g.exp_activation(v[0], 10.0)
    });
}

#[test]
fn log_gelu() {
    run("log", |r| vec![random(r, 2, 4, 0.2, 5.0)], &|g, v| g.log(v[0]));
    run("gelu", |r| vec![random(r, 2, 4, -3.0, 3.0)], &|g, v| g.gelu(v[0]));
}

#[test]
fn special_functions() {
    run("digamma", |r| vec![random(r, 2, 4, 0.5, 20.0)], &|g, v| g.digamma(v[0]));
    run("lgamma", |r| vec![random(r, 2, 4, 0.5, 20.0)], &|g, v| g.lgamma(v[0]));
}

#[test]
fn softmax_family() {
    run("softmax_rows", |r| vec![random(r, 3, 5, -3.0, 3.0)], &|g, v| g.softmax_rows(v[0]));
    let mask = [false, true, false, false, false, false, true, false, true];
    run("masked_softmax_rows", |r| vec![random(r, 3, 3, -3.0, 3.0)], &move |g, v| {
        g.masked_softmax_rows(v[0], &mask)
    });
}

#[test]
fn layer_norm() {
    run("layer_norm_rows", |r| vec![random(r, 3, 6, -2.0, 2.0)], &|g, v| {
        g.layer_norm_rows(v[0], 1e-5)
    });
}

#[test]
fn reductions() {
    let make = |r: &mut ChaCha8Rng| vec![random(r, 6, 3, -1.0, 1.0)];
    run("sum", make, &|g, v| g.sum(v[0]));
    run("sum_rows", make, &|g, v| g.sum_rows(v[0]));
    run("mean_segments", make, &|g, v| g.mean_segments(v[0], 3));
}

#[test]
fn structural() {
    run(
        "concat_rows",
        |r| vec![random(r, 2, 3, -1.0, 1.0), random(r, 4, 3, -1.0, 1.0)],
        &|g, v| g.concat_rows(&[v[0], v[1]]),
    );
    run(
        "concat_cols",
        |r| vec![random(r, 3, 2, -1.0, 1.0), random(r, 3, 4, -1.0, 1.0)],
        &|g, v| g.concat_cols(&[v[0], v[1]]),
    );
    let make = |r: &mut ChaCha8Rng| vec![random(r, 4, 5, -1.0, 1.0)];
    run("slice_cols", make, &|g, v| g.slice_cols(v[0], 1, 3));
    run("slice_rows", make, &|g, v| g.slice_rows(v[0], 1, 2));
    run("gather_rows", make, &|g, v| g.gather_rows(v[0], &[3, 0, 3, 1]));
    run("reshape", make, &|g, v| g.reshape(v[0], 2, 10));
}

#[test]
fn attention_with_prefix() {
    run(
        "attention",
        |r| {
            vec![
                random(r, 2 * 3, 8, -1.0, 1.0),
                random(r, 2 * 4, 8, -1.0, 1.0),
                random(r, 2 * 4, 8, -1.0, 1.0),
                random(r, 2, 8, -1.0, 1.0),
                random(r, 2, 8, -1.0, 1.0),
            ]
        },
        &|g, v| g.attention(v[0], v[1], v[2], Some((v[3], v[4])), 2, 2),
    );
}

#[test]
fn attention_without_prefix() {
    run(
        "attention (no prefix)",
        |r| vec![random(r, 5, 4, -1.0, 1.0), random(r, 5, 4, -1.0, 1.0), random(r, 5, 4, -1.0, 1.0)],
        &|g, v| g.attention(v[0], v[1], v[2], None, 1, 1),
    );
}

#[test]
fn backward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = [random(&mut rng, 6, 8, -1.0, 1.0), random(&mut rng, 2, 8, -1.0, 1.0)];
    let grads = || {
        let mut g = Graph::new();
        let x = g.param(inputs[0].clone());
        let p = g.param(inputs[1].clone());
        let a = g.attention(x, x, x, Some((p, p)), 2, 2).unwrap();
        let n = g.layer_norm_rows(a, 1e-5).unwrap();
        let s = g.softmax_rows(n).unwrap();
        let l = g.sum(s).unwrap();
        let sq = g.mul(n, n).unwrap();
        let l2 = g.sum(sq).unwrap();
        let t = g.add(l, l2).unwrap();
        g.backward(t).unwrap();
        (g.grad(x).unwrap().to_vec(), g.grad(p).unwrap().to_vec())
    };
    let (a, b) = (grads(), grads());
    assert!(a.0.iter().zip(&b.0).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
}
