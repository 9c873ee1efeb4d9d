use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use salu_autodiff::gradcheck::{check_inputs, FD_STEP};
use salu_autodiff::{AutodiffError, Graph, Tensor, Var};

const FD_TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.2..2.0)).collect()).unwrap()
}

/// Reduces an arbitrary tensor to a scalar with a fixed random weighting so
/// every output element contributes a distinct gradient.
fn weighted_sum(g: &mut Graph<'_>, x: Var, seed: u64) -> salu_autodiff::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, g.shape(x), 1.0);
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    g.sum(p)
}

fn assert_fd<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: Fn(&mut Graph<'_>, &[Var]) -> salu_autodiff::Result<Var>,
{
    let report = check_inputs(f, inputs, FD_STEP).unwrap();
    assert!(
        report.passes(FD_TOL),
        "{name}: max rel err {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn matmul_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = random(&mut rng, &[3, 3], 5.0);
    let mut g = Graph::new();
    let i = g.leaf(Tensor::identity(3));
    let mv = g.leaf(m.clone());
    let out = g.matmul(i, mv).unwrap();
    assert_eq!(g.value(out), &m);
}

#[test]
fn softmax_uniform() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![0.0; 4]));
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.25; 4]);
}

#[test]
fn cross_entropy_uniform_is_ln_vocab() {
    let mut g = Graph::new();
    let logits = g.leaf(Tensor::matrix(1, 64, vec![0.3; 64]));
    for target in [0, 17, 63] {
        let ce = g.cross_entropy(logits, &[target]).unwrap();
        assert!((g.item(ce) - 64f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).with_grad());
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).data(), &[1.0; 6]);
}

#[test]
fn backward_of_mean_square() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
    let sq = g.mul(x, x).unwrap();
    let m = g.mean(sq).unwrap();
    let grads = g.backward(m).unwrap();
    assert_eq!(grads.wrt(x).data(), &[1.0, 2.0]);
}

#[test]
fn unreachable_leaf_gets_zero_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
    let unused = g.leaf(Tensor::vector(vec![3.0, 4.0, 5.0]).with_grad());
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(unused).data(), &[0.0; 3]);
}

#[test]
fn leaf_used_twice_accumulates() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![2.0, -1.0]).with_grad());
    let y = g.add(x, x).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).data(), &[2.0, 2.0]);
}

#[test]
fn non_scalar_root_rejected() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
    assert_eq!(
        g.backward(x).err(),
        Some(AutodiffError::NonScalarRoot(vec![2]))
    );
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::zeros(&[2, 3]));
    let b = g.leaf(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(AutodiffError::ShapeMismatch { op, shapes }) => {
            assert_eq!(op, "matmul");
            assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn non_finite_output_rejected() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1000.0]));
    assert_eq!(g.exp(x).err(), Some(AutodiffError::NonFinite { op: "exp" }));
}

#[test]
fn log_clamps_tiny_probabilities() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![0.0, 1e-300]));
    let y = g.log(x).unwrap();
    let expected = 1e-12f64.ln();
    assert_eq!(g.value(y).data(), &[expected, expected]);
}

#[test]
fn finite_differences_every_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let a = random(&mut rng, &[3, 4], 1.0);
    let b = random(&mut rng, &[4, 2], 1.0);
    let bt = random(&mut rng, &[2, 4], 1.0);
    let c = random(&mut rng, &[3, 4], 1.0);
    let row = random(&mut rng, &[4], 1.0);
    let pos = positive(&mut rng, &[3, 4]);
    let table = random(&mut rng, &[5, 3], 1.0);

    assert_fd("matmul", &[a.clone(), b.clone()], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        weighted_sum(g, y, 1)
    });
    assert_fd("matmul_bt", &[a.clone(), bt.clone()], |g, v| {
        let y = g.matmul_bt(v[0], v[1])?;
        weighted_sum(g, y, 2)
    });
    assert_fd("add", &[a.clone(), c.clone()], |g, v| {
        let y = g.add(v[0], v[1])?;
        weighted_sum(g, y, 3)
    });
    assert_fd("add_row", &[a.clone(), row.clone()], |g, v| {
        let y = g.add(v[0], v[1])?;
        weighted_sum(g, y, 4)
    });
    assert_fd("sub", &[a.clone(), c.clone()], |g, v| {
        let y = g.sub(v[0], v[1])?;
        weighted_sum(g, y, 5)
    });
    assert_fd("mul", &[a.clone(), c.clone()], |g, v| {
        let y = g.mul(v[0], v[1])?;
        weighted_sum(g, y, 6)
    });
    assert_fd("scale", std::slice::from_ref(&a), |g, v| {
        let y = g.scale(v[0], -1.7)?;
        weighted_sum(g, y, 7)
    });
    assert_fd("softmax", std::slice::from_ref(&a), |g, v| {
        let y = g.softmax(v[0])?;
        weighted_sum(g, y, 8)
    });
    assert_fd("log", std::slice::from_ref(&pos), |g, v| {
        let y = g.log(v[0])?;
        weighted_sum(g, y, 9)
    });
    assert_fd("exp", std::slice::from_ref(&a), |g, v| {
        let y = g.exp(v[0])?;
        weighted_sum(g, y, 10)
    });
    assert_fd("embedding_gather", std::slice::from_ref(&table), |g, v| {
        let y = g.gather(v[0], &[4, 0, 4, 2])?;
        weighted_sum(g, y, 11)
    });
    let gain = positive(&mut rng, &[4]);
    assert_fd("layer_norm", &[a.clone(), gain, row.clone()], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2])?;
        weighted_sum(g, y, 12)
    });
    assert_fd("gelu", std::slice::from_ref(&a), |g, v| {
        let y = g.gelu(v[0])?;
        weighted_sum(g, y, 13)
    });
    assert_fd("cross_entropy", std::slice::from_ref(&a), |g, v| {
        let y = g.cross_entropy(v[0], &[3, 0, 1])?;
        weighted_sum(g, y, 14)
    });
    assert_fd("mean", std::slice::from_ref(&a), |g, v| {
        let w = g.scale(v[0], 1.0)?;
        let sq = g.mul(w, v[0])?;
        g.mean(sq)
    });
    assert_fd("sum_last_axis", std::slice::from_ref(&a), |g, v| {
        let y = g.sum_last_axis(v[0])?;
        weighted_sum(g, y, 15)
    });
    assert_fd("slice_rows", std::slice::from_ref(&a), |g, v| {
        let y = g.slice(v[0], 0, 1, 3)?;
        weighted_sum(g, y, 16)
    });
    assert_fd("slice_cols", std::slice::from_ref(&a), |g, v| {
        let y = g.slice(v[0], 1, 1, 3)?;
        weighted_sum(g, y, 17)
    });
    assert_fd("concat_cols", &[a.clone(), c.clone()], |g, v| {
        let y = g.concat(&[v[0], v[1]], 1)?;
        weighted_sum(g, y, 18)
    });
    assert_fd("concat_rows", &[a.clone(), c.clone()], |g, v| {
        let y = g.concat(&[v[0], v[1]], 0)?;
        weighted_sum(g, y, 19)
    });
    assert_fd("transpose", std::slice::from_ref(&a), |g, v| {
        let y = g.transpose(v[0])?;
        weighted_sum(g, y, 20)
    });
    assert_fd("reshape", std::slice::from_ref(&a), |g, v| {
        let y = g.reshape(v[0], &[12])?;
        weighted_sum(g, y, 21)
    });
    // Clamp and minimum are piecewise; keep evaluation points off the kinks.
    let spread = Tensor::vector(vec![-0.9, -0.3, 0.35, 0.8, 1.6]);
    assert_fd("clamp", std::slice::from_ref(&spread), |g, v| {
        let y = g.clamp(v[0], -0.5, 1.0)?;
        weighted_sum(g, y, 22)
    });
    let other = Tensor::vector(vec![-0.5, -0.6, 0.9, 0.1, 1.0]);
    assert_fd("minimum", &[spread.clone(), other], |g, v| {
        let y = g.minimum(v[0], v[1])?;
        weighted_sum(g, y, 23)
    });
    assert_fd("log_sigmoid", std::slice::from_ref(&a), |g, v| {
        let y = g.log_sigmoid(v[0])?;
        weighted_sum(g, y, 24)
    });
}

#[test]
fn finite_differences_composed_graph() {
    // A miniature attention block followed by a classifier head.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[4, 4], 1.0);
    let wq = random(&mut rng, &[4, 4], 0.5);
    let wk = random(&mut rng, &[4, 4], 0.5);
    let gain = positive(&mut rng, &[4]);
    let bias = random(&mut rng, &[4], 0.1);
    assert_fd("composed", &[x, wq, wk, gain, bias], |g, v| {
        let h = g.layer_norm(v[0], v[3], v[4])?;
        let q = g.matmul(h, v[1])?;
        let k = g.matmul(h, v[2])?;
        let s = g.matmul_bt(q, k)?;
        let s = g.scale(s, 0.5)?;
        let p = g.softmax(s)?;
        let o = g.matmul(p, h)?;
        let o = g.gelu(o)?;
        let r = g.add(o, h)?;
        let ce = g.cross_entropy(r, &[0, 3, 1, 2])?;
        g.mean(ce)
    });
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_normalized(vals in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(3, 4, vals));
        let y = g.softmax(x).unwrap();
        for r in 0..3 {
            let s: f64 = g.value(y).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_nonnegative(vals in prop::collection::vec(-30.0f64..30.0, 8), t in 0usize..4) {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(2, 4, vals));
        let ce = g.cross_entropy(x, &[t, 3 - t]).unwrap();
        prop_assert!(g.value(ce).data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn backward_is_linear(vals in prop::collection::vec(-2.0f64..2.0, 6), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let build = |g: &mut Graph<'_>, x: Var| -> (Var, Var) {
            let sq = g.mul(x, x).unwrap();
            let f = g.sum(sq).unwrap();
            let sm = g.softmax(x).unwrap();
            let lg = g.log(sm).unwrap();
            let h = g.mean(lg).unwrap();
            (f, h)
        };
        let x0 = Tensor::matrix(2, 3, vals).with_grad();

        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let (f, h) = build(&mut g, x);
        let af = g.scale(f, a).unwrap();
        let bh = g.scale(h, b).unwrap();
        let root = g.add(af, bh).unwrap();
        let combined = g.backward(root).unwrap().wrt(x);

        let mut g1 = Graph::new();
        let x1 = g1.leaf(x0.clone());
        let (f1, _) = build(&mut g1, x1);
        let gf = g1.backward(f1).unwrap().wrt(x1);
        let mut g2 = Graph::new();
        let x2 = g2.leaf(x0);
        let (_, h2) = build(&mut g2, x2);
        let gh = g2.backward(h2).unwrap().wrt(x2);

        for i in 0..6 {
            let expect = a * gf.data()[i] + b * gh.data()[i];
            prop_assert!((combined.data()[i] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn random_small_ops_pass_finite_differences(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = rng.random_range(1..=4);
        let cols = rng.random_range(1..=4);
        let x = random(&mut rng, &[rows, cols], 1.5);
        let w = random(&mut rng, &[cols, cols], 1.0);
        let report = check_inputs(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            let y = g.gelu(y)?;
            let p = g.softmax(y)?;
            let l = g.log(p)?;
            weighted_sum(g, l, seed)
        }, &[x, w], FD_STEP).unwrap();
        prop_assert!(report.passes(FD_TOL), "rel err {}", report.max_rel_error);
    }
}
