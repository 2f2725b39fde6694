use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// Central differences of `f` at `x`, step `h`.
fn finite_diff(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut out = Array2::zeros(x.dim());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = xp[[r, c]];
        xp[[r, c]] = orig + h;
        let up = f(&xp);
        xp[[r, c]] = orig - h;
        let down = f(&xp);
        xp[[r, c]] = orig;
        out[[r, c]] = (up - down) / (2.0 * h);
    }
    out
}

fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

fn random(rng: &mut ChaCha8Rng, shape: (usize, usize), lo: f64, hi: f64) -> Tensor {
    Array2::from_shape_simple_fn(shape, || rng.random_range(lo..hi))
}

#[test]
fn affine_hand_values() {
    let mut g = Graph::new();
    let x = g.constant(array![[1.0, 2.0]]);
    let w = g.constant(array![[1.0, 0.0], [0.0, 1.0]]);
    let b = g.constant(array![[0.0, 0.0]]);
    let y = g.affine(x, w, b).unwrap();
    assert_eq!(g.value(y), &array![[1.0, 2.0]]);

    let x = g.constant(array![[1.0, 1.0]]);
    let w = g.constant(array![[2.0, 3.0], [4.0, 5.0]]);
    let b = g.constant(array![[1.0, 1.0]]);
    let y = g.affine(x, w, b).unwrap();
    assert_eq!(g.value(y), &array![[7.0, 9.0]]);
}

#[test]
fn affine_shape_mismatch() {
    let mut g = Graph::new();
    let x = g.constant(Array2::zeros((1, 3)));
    let w = g.constant(Array2::zeros((2, 2)));
    let b = g.constant(Array2::zeros((1, 2)));
    assert!(matches!(
        g.affine(x, w, b),
        Err(DiffError::Shape { op: "affine", .. })
    ));
}

#[test]
fn affine_weight_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let xv = random(&mut rng, (3, 2), -1.0, 1.0);
    let wv = random(&mut rng, (2, 2), -1.0, 1.0);
    let bv = random(&mut rng, (1, 2), -1.0, 1.0);
    let mut g = Graph::new();
    let x = g.constant(xv.clone());
    let w = g.variable(wv.clone());
    let b = g.constant(bv.clone());
    let y = g.affine(x, w, b).unwrap();
    let loss = g.sum(y, Axis::All);
    g.backward(loss).unwrap();
    let fd = finite_diff(&wv, 1e-5, |wp| (xv.dot(wp) + &bv).sum());
    assert!(max_rel_err(g.grad(w).unwrap(), &fd) < 1e-6);
}

#[test]
fn elementwise_closed_forms() {
    let mut g = Graph::new();
    let z = g.constant(array![[0.0]]);
    let s = g.sigmoid(z).unwrap();
    assert_eq!(g.scalar(s), 0.5);
    let sp = g.unary(UnaryOp::Softplus, z).unwrap();
    assert!((g.scalar(sp) - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn domain_errors_name_op_and_index() {
    let mut g = Graph::new();
    let x = g.constant(array![[1.0, -2.0]]);
    for op in [UnaryOp::Log, UnaryOp::Sqrt, UnaryOp::Lgamma] {
        let err = g.unary(op, x).unwrap_err();
        assert_eq!(
            err,
            DiffError::Domain {
                op: op.name(),
                index: (0, 1),
                value: -2.0
            }
        );
    }
    let zero = g.constant(array![[0.0]]);
    assert!(g.lgamma(zero).is_err());
    assert!(g.unary(UnaryOp::Ln1mExp, zero).is_err());
}

#[test]
fn lgamma_values_and_digamma_backward() {
    let mut g = Graph::new();
    let x = g.variable(array![[1.0, 2.0, 0.5]]);
    let y = g.lgamma(x).unwrap();
    let v = g.value(y).clone();
    assert!(v[[0, 0]].abs() < 1e-14 && v[[0, 1]].abs() < 1e-14);
    assert!((v[[0, 2]] - 0.572_364_942_9).abs() < 1e-10);
    let l = g.sum(y, Axis::All);
    g.backward(l).unwrap();
    assert!((g.grad(x).unwrap()[[0, 0]] + 0.577_215_664_9).abs() < 1e-10);
}

#[test]
fn unary_gradients_match_finite_differences() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for op in UnaryOp::ALL {
            let (lo, hi) = match op {
                UnaryOp::Log | UnaryOp::Sqrt | UnaryOp::Lgamma => (0.5, 3.0),
                UnaryOp::Ln1mExp => (-3.0, -0.2),
                _ => (-2.0, 2.0),
            };
            let xv = random(&mut rng, (3, 4), lo, hi);
            let wv = random(&mut rng, (3, 4), 0.5, 1.5);
            let mut g = Graph::new();
            let x = g.variable(xv.clone());
            let w = g.constant(wv.clone());
            let y = g.unary(op, x).unwrap();
            let yw = g.mul(y, w).unwrap();
            let loss = g.sum(yw, Axis::All);
            g.backward(loss).unwrap();
            let fd = finite_diff(&xv, 1e-5, |xp| {
                let mut g2 = Graph::inference();
                let x2 = g2.constant(xp.clone());
                let y2 = g2.unary(op, x2).unwrap();
                (g2.value(y2) * &wv).sum()
            });
            let err = max_rel_err(g.grad(x).unwrap(), &fd);
            assert!(err < 1e-6, "{op}: seed {seed}: rel err {err}");
        }
    }
}

#[test]
fn reductions() {
    let mut g = Graph::new();
    let x = g.variable(array![[1.0, 2.0], [3.0, 4.0]]);
    let s = g.sum(x, Axis::All);
    assert_eq!(g.scalar(s), 10.0);
    let c = g.constant(Array2::from_elem((3, 5), 2.5));
    let m = g.mean(c, Axis::All);
    assert_eq!(g.scalar(m), 2.5);
    let rows = g.sum(x, Axis::Rows);
    assert_eq!(g.value(rows), &array![[4.0, 6.0]]);
    let cols = g.mean(x, Axis::Cols);
    assert_eq!(g.value(cols), &array![[1.5], [3.5]]);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &Array2::<f64>::ones((2, 2)));
}

#[test]
fn square_gradient_is_two_x() {
    let xv = array![[1.5, -2.0, 0.25]];
    let mut g = Graph::new();
    let x = g.variable(xv.clone());
    let sq = g.square(x).unwrap();
    let l = g.sum(sq, Axis::All);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &(xv * 2.0));
}

#[test]
fn diamond_graph_sums_both_paths() {
    // f = x*x + exp(x): df/dx = 2x + exp(x)
    let mut g = Graph::new();
    let x = g.variable(array![[0.7]]);
    let a = g.mul(x, x).unwrap();
    let b = g.exp(x).unwrap();
    let s = g.add(a, b).unwrap();
    let l = g.sum(s, Axis::All);
    g.backward(l).unwrap();
    let want = 1.4 + 0.7f64.exp();
    assert!((g.grad(x).unwrap()[[0, 0]] - want).abs() < 1e-14);
}

#[test]
fn backward_contracts() {
    let mut g = Graph::new();
    let x = g.variable(array![[1.0, 2.0]]);
    let y = g.square(x).unwrap();
    assert!(matches!(g.backward(y), Err(DiffError::Contract(_))));
    let l = g.sum(y, Axis::All);
    g.backward(l).unwrap();
    assert!(matches!(g.backward(l), Err(DiffError::Contract(_))));
}

#[test]
fn composite_ops_match_finite_differences() {
    // Exercises matmul, sub, scale, shift, clamp, mean over axes,
    // broadcast_cols and log_softmax in a single graph.
    let build = |g: &mut Graph, a: NodeId, b: NodeId| -> NodeId {
        let ab = g.matmul(a, b).unwrap(); // 3x4
        let ls = g.log_softmax(ab);
        let colsum = g.mean(ab, Axis::Cols); // 3x1
        let bc = g.broadcast_cols(colsum, 4).unwrap();
        let d = g.sub(ls, bc).unwrap();
        let sc = g.scale(d, 0.7);
        let sh = g.shift(sc, 0.3);
        let cl = g.clamp(sh, -50.0, 50.0);
        let sq = g.square(cl).unwrap();
        let r = g.sum(sq, Axis::Rows);
        g.mean(r, Axis::All)
    };
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let av = random(&mut rng, (3, 2), -1.0, 1.0);
        let bv = random(&mut rng, (2, 4), -1.0, 1.0);
        let mut g = Graph::new();
        let a = g.variable(av.clone());
        let b = g.variable(bv.clone());
        let loss = build(&mut g, a, b);
        g.backward(loss).unwrap();
        let eval = |av: &Tensor, bv: &Tensor| {
            let mut g = Graph::inference();
            let a = g.constant(av.clone());
            let b = g.constant(bv.clone());
            let l = build(&mut g, a, b);
            g.scalar(l)
        };
        let fda = finite_diff(&av, 1e-5, |ap| eval(ap, &bv));
        let fdb = finite_diff(&bv, 1e-5, |bp| eval(&av, bp));
        assert!(max_rel_err(g.grad(a).unwrap(), &fda) < 1e-6);
        assert!(max_rel_err(g.grad(b).unwrap(), &fdb) < 1e-6);
    }
}

#[test]
fn clamp_blocks_gradient_outside_range() {
    let mut g = Graph::new();
    let x = g.variable(array![[-5.0, 0.5, 5.0]]);
    let c = g.clamp(x, -1.0, 1.0);
    let l = g.sum(c, Axis::All);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &array![[0.0, 1.0, 0.0]]);
}

#[test]
fn parameters_collect_gradients() {
    let mut store = ParamStore::new();
    let w = store.add("w", array![[2.0]]);
    let mut g = Graph::new();
    let wn = g.param(&store, w);
    let sq = g.square(wn).unwrap();
    let l = g.sum(sq, Axis::All);
    g.backward(l).unwrap();
    assert_eq!(g.param_gradients(&store).get(w), &array![[4.0]]);

    let mut g = Graph::inference();
    let wn = g.param(&store, w);
    let sq = g.square(wn).unwrap();
    let l = g.sum(sq, Axis::All);
    g.backward(l).unwrap();
    assert_eq!(g.param_gradients(&store).get(w), &array![[0.0]]);
}
