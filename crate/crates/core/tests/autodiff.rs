use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dpt_core::tensor::{Graph, Tensor, Var};

/// Central differences of `f` at `x`, one coordinate at a time.
fn numeric_grad(x: &Tensor, f: &dyn Fn(&mut Graph, Var) -> Var) -> Vec<f64> {
    let h = 1e-6;
    (0..x.len())
        .map(|i| {
            let eval = |delta: f64| {
                let mut t = x.clone();
                t.data_mut()[i] += delta;
                let mut g = Graph::new();
                let v = g.constant(t);
                let out = f(&mut g, v);
                g.scalar(out)
            };
            (eval(h) - eval(-h)) / (2.0 * h)
        })
        .collect()
}

fn tape_grad(x: &Tensor, f: &dyn Fn(&mut Graph, Var) -> Var) -> Vec<f64> {
    let mut g = Graph::new();
    let v = g.leaf(x.clone(), true);
    let out = f(&mut g, v);
    g.backward(out).unwrap();
    g.grad(v).unwrap().data().to_vec()
}

fn assert_grads_match(x: &Tensor, f: &dyn Fn(&mut Graph, Var) -> Var) {
    let (a, n) = (tape_grad(x, f), numeric_grad(x, f));
    for (i, (a, n)) in a.iter().zip(&n).enumerate() {
        let tol = 1e-5 * (1.0 + a.abs().max(n.abs()));
        assert!((a - n).abs() <= tol, "coord {i}: tape {a} vs numeric {n}");
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_and_transpose(seed in any::<u64>(), m in 1usize..4, k in 1usize..4) {
        let w = randn(&[k, m], seed ^ 1);
        assert_grads_match(&randn(&[m, k], seed), &|g, x| {
            let wv = g.constant(w.clone());
            let y = g.matmul(x, wv).unwrap();
            let yt = g.transpose(y).unwrap();
            let z = g.matmul(y, yt).unwrap();
            g.sum(z)
        });
    }

    #[test]
    fn softmax_log_chain(seed in any::<u64>(), n in 1usize..5) {
        let target = randn(&[2, n], seed ^ 2);
        assert_grads_match(&randn(&[2, n], seed), &|g, x| {
            let p = g.softmax(x, 1).unwrap();
            let lp = g.log(p, 1e-12);
            let t = g.constant(target.clone());
            let m = g.mul(t, lp).unwrap();
            g.sum(m)
        });
    }

    #[test]
    fn layer_norm_gelu(seed in any::<u64>()) {
        let gain = randn(&[4], seed ^ 3);
        let bias = randn(&[4], seed ^ 4);
        assert_grads_match(&randn(&[3, 4], seed), &|g, x| {
            let (gv, bv) = (g.constant(gain.clone()), g.constant(bias.clone()));
            let y = g.layer_norm(x, gv, bv, 1e-5).unwrap();
            let y = g.gelu(y);
            let y = g.mul(y, y).unwrap();
            g.mean(y)
        });
    }

    #[test]
    fn normalize_exp_concat_slice(seed in any::<u64>()) {
        assert_grads_match(&randn(&[3, 3], seed), &|g, x| {
            let n = g.l2_normalize(x);
            let e = g.exp(n);
            let both = g.concat(&[e, x], 0).unwrap();
            let part = g.slice(both, 0, 2, 5).unwrap();
            let s = g.sum_axis(part, 1).unwrap();
            let s = g.scale(s, 0.5);
            g.sum(s)
        });
    }
}

proptest! {
    #[test]
    fn softmax_rows_lie_on_the_simplex(data in prop::collection::vec(-50.0f64..50.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 4], data).unwrap());
        let p = g.softmax(x, 1).unwrap();
        let p = g.value(p);
        for r in 0..3 {
            let row = p.row(r);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_of_sum_is_ones(data in prop::collection::vec(-10.0f64..10.0, 1..20)) {
        let n = data.len();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![n], data).unwrap(), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        prop_assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }
}
