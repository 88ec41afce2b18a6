use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// Scaled dot-product attention for one head, with `sinks` zero rows appended
/// to the keys and values.
///
/// A zero key scores logit 0 against every query, so it adds exactly 1 to each
/// query's softmax denominator and nothing to its output. With
/// `Z_q = sum_j exp(logit_qj)` over the real keys, each real weight and the
/// whole output row are scaled by `Z_q / (Z_q + sinks)`.
pub fn attention_with_sink(g: &mut Graph, q: Var, k: Var, v: Var, sinks: usize) -> Result<Var> {
    let dh = g.shape(q)[1];
    let (k, v) = if sinks > 0 {
        let zk = g.constant(Tensor::zeros(&[sinks, g.shape(k)[1]]));
        let zv = g.constant(Tensor::zeros(&[sinks, g.shape(v)[1]]));
        (g.concat(&[k, zk], 0)?, g.concat(&[v, zv], 0)?)
    } else {
        (k, v)
    };
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, 1.0 / (dh as f64).sqrt());
    let weights = g.softmax(logits, 1)?;
    g.matmul(weights, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(q: &Tensor, k: &Tensor, v: &Tensor, p: usize) -> Tensor {
        let mut g = Graph::new();
        let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let out = attention_with_sink(&mut g, q, k, v, p).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn zero_sinks_is_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let k = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let v = Tensor::randn(&[4, 8], 1.0, &mut rng);
        // Reference path written out without the sink branch.
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let kt = g.transpose(kv).unwrap();
        let l = g.matmul(qv, kt).unwrap();
        let l = g.scale(l, 1.0 / 8f64.sqrt());
        let w = g.softmax(l, 1).unwrap();
        let o = g.matmul(w, vv).unwrap();
        assert_eq!(g.value(o), &run(&q, &k, &v, 0));
    }

    #[test]
    fn single_token_with_one_sink_halves() {
        // logit 0 against one real key and one sink: weight 1/2.
        let q = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let k = Tensor::matrix(1, 2, vec![3.0, -1.0]).unwrap();
        let v = Tensor::matrix(1, 2, vec![2.0, 4.0]).unwrap();
        let out = run(&q, &k, &v, 1);
        assert_eq!(out.data(), &[1.0, 2.0]);
    }
}
