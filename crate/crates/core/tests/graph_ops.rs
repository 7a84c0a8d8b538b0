//! Every differentiable graph op checked against central differences in f64.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sptx_core::numerics::{grad_check, Graph, ParamStore, Tensor, Var};
use sptx_core::Result;

fn random_store(shapes: &[(&str, Vec<usize>)], seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in shapes {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        store.add(*name, Tensor::new(shape.clone(), data).unwrap(), true).unwrap();
    }
    store
}

fn p(g: &mut Graph<'_, f64>, name: &str) -> Var {
    let id = g.store().id(name).unwrap();
    g.param(id)
}

/// Reduces any tensor to a scalar with a fixed non-uniform weighting so that
/// every output element contributes a distinct gradient.
fn weighted_sum(g: &mut Graph<'_, f64>, x: Var) -> Result<Var> {
    let n = g.value(x).len();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
    let y = g.mul_const(x, w)?;
    g.sum(y)
}

fn check(store: &ParamStore<f64>, tol: f64, f: impl for<'p> Fn(&mut Graph<'p, f64>) -> Result<Var> + Sync) {
    let report = grad_check(store, 1e-6, f).unwrap();
    let worst = report.worst().unwrap();
    assert!(
        report.max_rel_err() < tol,
        "`{}` rel err {:.3e}",
        worst.name,
        worst.max_rel_err
    );
}

#[test]
fn elementwise_ops() {
    let store = random_store(&[("a", vec![3, 4]), ("b", vec![3, 4]), ("r", vec![4])], 1);
    check(&store, 1e-5, |g| {
        let (a, b, r) = (p(g, "a"), p(g, "b"), p(g, "r"));
        let s = g.add(a, b)?;
        let d = g.sub(s, b)?;
        let m = g.mul(d, b)?;
        let m = g.mul(m, a)?;
        let row = g.add_row(m, r)?;
        let ge = g.gelu(row)?;
        let si = g.sin(ge)?;
        let sc = g.scale(si, 1.7)?;
        weighted_sum(g, sc)
    });
}

#[test]
fn matmul_both_layouts() {
    let store = random_store(&[("a", vec![3, 5]), ("b", vec![5, 2]), ("c", vec![4, 5])], 2);
    check(&store, 1e-5, |g| {
        let (a, b, c) = (p(g, "a"), p(g, "b"), p(g, "c"));
        let ab = g.matmul(a, b)?;
        let ac = g.matmul_nt(a, c)?;
        let x = weighted_sum(g, ab)?;
        let y = weighted_sum(g, ac)?;
        g.add(x, y)
    });
}

#[test]
fn self_product_accumulates_both_paths() {
    let store = random_store(&[("a", vec![6])], 3);
    check(&store, 1e-5, |g| {
        let a = p(g, "a");
        let sq = g.mul(a, a)?;
        g.sum(sq)
    });
}

#[test]
fn rms_norm() {
    let store = random_store(&[("x", vec![4, 6]), ("g", vec![6])], 4);
    check(&store, 1e-5, |g| {
        let (x, gain) = (p(g, "x"), p(g, "g"));
        let y = g.rms_norm(x, gain, 1e-6)?;
        weighted_sum(g, y)
    });
}

#[test]
fn layer_norm() {
    let store = random_store(&[("x", vec![2, 3, 5]), ("g", vec![3]), ("b", vec![3])], 5);
    check(&store, 1e-5, |g| {
        let (x, gain, bias) = (p(g, "x"), p(g, "g"), p(g, "b"));
        let y = g.layer_norm(x, gain, bias, 1e-5)?;
        weighted_sum(g, y)
    });
}

#[test]
fn dilated_conv() {
    let store = random_store(&[("x", vec![2, 2, 9]), ("w", vec![3, 2, 3]), ("b", vec![3])], 6);
    for dilation in [1, 2, 4, 16] {
        check(&store, 1e-5, move |g| {
            let (x, w, b) = (p(g, "x"), p(g, "w"), p(g, "b"));
            let y = g.conv1d(x, w, b, dilation)?;
            weighted_sum(g, y)
        });
    }
}

#[test]
fn grouped_attention_with_rope() {
    let store = random_store(&[("q", vec![6, 8]), ("k", vec![6, 8]), ("v", vec![6, 8])], 7);
    let groups = Arc::new(vec![vec![0, 2, 4], vec![1, 3], vec![5]]);
    check(&store, 1e-5, move |g| {
        let (q, k, v) = (p(g, "q"), p(g, "k"), p(g, "v"));
        let pos = [0, 0, 1, 1, 2, 2];
        let qr = g.rope(q, 2, &pos, 10000.0)?;
        let kr = g.rope(k, 2, &pos, 10000.0)?;
        let y = g.attention(qr, kr, v, 2, groups.clone())?;
        weighted_sum(g, y)
    });
}

#[test]
fn gather_scatter_and_reshape() {
    let store = random_store(&[("x", vec![5, 3])], 8);
    check(&store, 1e-5, |g| {
        let x = p(g, "x");
        let sel = g.gather_rows(x, vec![4, 0, 4, 2])?;
        let back = g.scatter_rows(sel, vec![1, 1, 0, 3], 4)?;
        let r = g.reshape(back, vec![2, 6])?;
        weighted_sum(g, r)
    });
}

#[test]
fn losses() {
    let store = random_store(&[("a", vec![4, 3]), ("b", vec![4, 3]), ("z", vec![5])], 9);
    check(&store, 1e-5, |g| {
        let (a, b, z) = (p(g, "a"), p(g, "b"), p(g, "z"));
        let mse = g.mse_rows(a, b)?;
        let bce = g.bce_with_logits(z, vec![1.0, 0.0, 0.0, 1.0, 1.0])?;
        g.add(mse, bce)
    });
}

#[test]
fn quadratic_and_sine_oracles() {
    let store = random_store(&[("x", vec![1])], 10);
    let mut store3 = store.clone();
    store3.tensor_mut(store3.id("x").unwrap()).data_mut()[0] = 3.0;
    let mut g = Graph::new(&store3);
    let x = p(&mut g, "x");
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(store3.id("x").unwrap()).unwrap()[0], 6.0);
    check(&store3, 1e-9, |g| {
        let x = p(g, "x");
        g.mul(x, x)
    });

    let mut store1 = store;
    store1.tensor_mut(store1.id("x").unwrap()).data_mut()[0] = 1.0;
    let mut g = Graph::new(&store1);
    let x = p(&mut g, "x");
    let y = g.sin(x).unwrap();
    let grads = g.backward(y).unwrap();
    assert!((grads.get(store1.id("x").unwrap()).unwrap()[0] - 1f64.cos()).abs() < 1e-15);
}

#[test]
fn nondeterministic_loss_invalidates_oracle() {
    use std::sync::atomic::{AtomicU64, Ordering};
    let store = random_store(&[("x", vec![2])], 11);
    let calls = AtomicU64::new(0);
    let err = grad_check(&store, 1e-6, |g| {
        let x = p(g, "x");
        let k = calls.fetch_add(1, Ordering::SeqCst) as f64;
        let y = g.scale(x, 1.0 + k)?;
        g.sum(y)
    })
    .unwrap_err();
    assert!(matches!(err, sptx_core::Error::OracleInvalid(_)));
}

#[test]
fn frozen_params_get_no_gradient() {
    let mut store = random_store(&[("a", vec![3]), ("b", vec![3])], 12);
    let b_id = store.id("b").unwrap();
    store.set_trainable(b_id, false);
    let mut g = Graph::new(&store);
    let a = p(&mut g, "a");
    let b = p(&mut g, "b");
    let y = g.mul(a, b).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(store.id("a").unwrap()).is_some());
    assert!(grads.get(b_id).is_none());
}

#[test]
fn dropout_is_identity_outside_training() {
    let store = random_store(&[("a", vec![50])], 13);
    let mut g = Graph::new(&store);
    let a = p(&mut g, "a");
    assert_eq!(g.dropout(a, 0.5).unwrap(), a);

    let mut g = Graph::training(&store, 1);
    let a = p(&mut g, "a");
    let d = g.dropout(a, 0.5).unwrap();
    let vals = g.value(d).to_vec();
    let zeros = vals.iter().filter(|v| **v == 0.0).count();
    assert!(zeros > 10 && zeros < 40);
    for (x, y) in vals.iter().zip(store.tensor(store.id("a").unwrap()).data()) {
        assert!(*x == 0.0 || (*x - 2.0 * y).abs() < 1e-12);
    }
}
