//! Per-op gradient checks on the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check_gradients;
use super::graph::{Graph, NormMode, Var};
use super::params::ParamStore;
use super::tensor::Tensor;

fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Smooth scalar readout that weights every element differently.
fn readout(g: &mut Graph, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = (0..g.value(y).len()).map(|_| rng.random::<f64>()).collect();
    g.bce_with_logits_mean(y, target)
}

/// Analytic grads once, finite differences per element; returns max relative error.
fn check(store: &mut ParamStore, build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let eval = |store: &ParamStore| {
        let mut g = Graph::new();
        let vars: Vec<Var> = (0..store.len()).map(|i| g.param(i, store.get(i).clone())).collect();
        let root = build(&mut g, &vars);
        (g.value(root).item(), g.backward(root).param_grads(store.len()))
    };
    let (_, analytic) = eval(store);
    let ids: Vec<usize> = (0..store.len()).collect();
    let report = check_gradients(store, &ids, &analytic, 1e-5, 1e-4, |s| eval(s).0);
    assert_eq!(report.checked, (0..store.len()).map(|i| store.get(i).len()).sum::<usize>());
    report.max_rel_error
}

#[test]
fn conv2d() {
    let mut store = ParamStore::new();
    store.add("x", rand_tensor(vec![2, 3, 6, 6], 1), true);
    store.add("w", rand_tensor(vec![4, 3, 4, 4], 2), true);
    store.add("b", rand_tensor(vec![4], 3), true);
    let err = check(&mut store, |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1);
        readout(g, y, 9)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn conv_transpose2d() {
    let mut store = ParamStore::new();
    store.add("x", rand_tensor(vec![2, 3, 3, 3], 4), true);
    store.add("w", rand_tensor(vec![3, 2, 4, 4], 5), true);
    store.add("b", rand_tensor(vec![2], 6), true);
    let err = check(&mut store, |g, v| {
        let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1);
        assert_eq!(g.value(y).shape(), &[2, 2, 6, 6]);
        readout(g, y, 10)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn batch_norm_both_modes() {
    let mut store = ParamStore::new();
    store.add("x", rand_tensor(vec![2, 3, 2, 2], 7), true);
    store.add("gamma", rand_tensor(vec![3], 8), true);
    store.add("beta", rand_tensor(vec![3], 9), true);
    let err = check(&mut store, |g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], NormMode::Batch);
        readout(g, y, 11)
    });
    assert!(err < 1e-4, "{err}");
    let (mean, var) = ([0.1, -0.2, 0.3], [0.5, 1.5, 2.0]);
    let err = check(&mut store, |g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], NormMode::Running { mean: &mean, var: &var });
        readout(g, y, 12)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn elementwise_and_structural() {
    let mut store = ParamStore::new();
    store.add("a", rand_tensor(vec![1, 2, 4, 4], 13), true);
    store.add("b", rand_tensor(vec![1, 1, 4, 4], 14), true);
    let err = check(&mut store, |g, v| {
        let a = g.leaky_relu(v[0], 0.2);
        let c = g.concat(a, v[1]);
        let p = g.max_pool2(c);
        let t = g.tanh(p);
        let s = g.sigmoid(t);
        let l = g.log_clamped(s, 1e-7);
        let om = g.one_minus(s);
        let l2 = g.log_clamped(om, 1e-7);
        let m1 = g.mean(l);
        let m2 = g.mean(l2);
        let sum = g.add(m1, m2);
        let sc = g.scale(sum, -0.5);
        let r = readout(g, c, 15);
        g.add(sc, r)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn abs_diff_mean_matches_definition() {
    let mut g = Graph::new();
    let a = g.param(0, Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 0.0]));
    let b = g.input(Tensor::new(vec![4], vec![0.0, 0.0, 1.0, 0.0]));
    let m = g.abs_diff_mean(a, b);
    assert_eq!(g.value(m).item(), (1.0 + 2.0 + 0.5) / 4.0);
    let grads = g.backward(m);
    assert_eq!(grads.get(a).unwrap().data(), &[0.25, -0.25, -0.25, 0.0]);
}

#[test]
fn dropout_and_detach_block_or_mask_gradients() {
    let mut g = Graph::new();
    let a = g.param(0, Tensor::new(vec![3], vec![1.0, 2.0, 3.0]));
    let d = g.dropout(a, vec![2.0, 0.0, 2.0]);
    let det = g.detach(a);
    let s = g.add(d, det);
    let m = g.mean(s);
    let grads = g.backward(m);
    let ga = grads.param_grads(1)[0].clone().unwrap();
    assert_eq!(ga.data(), &[2.0 / 3.0, 0.0, 2.0 / 3.0]);
}

#[test]
fn shared_parameter_gradients_accumulate() {
    let mut g = Graph::new();
    let a1 = g.param(0, Tensor::scalar(2.0));
    let a2 = g.param(0, Tensor::scalar(2.0));
    let s = g.add(a1, a2);
    let grads = g.backward(s);
    assert_eq!(grads.param_grads(1)[0].as_ref().unwrap().item(), 2.0);
}
