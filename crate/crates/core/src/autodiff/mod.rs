//! Dense tensors and tape-based reverse-mode differentiation.

mod kernels;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    /// Central differences of `f` around `x`, one coordinate at a time.
    fn central_diff(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let mut probe = x.to_vec();
        (0..x.len())
            .map(|i| {
                probe[i] = x[i] + h;
                let up = f(&probe);
                probe[i] = x[i] - h;
                let down = f(&probe);
                probe[i] = x[i];
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
            .fold(0.0, f64::max)
    }

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Checks the gradient of `build(tape, leaves) -> scalar` w.r.t. every leaf.
    fn check(leaves: &[Tensor], build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
        let eval = |ts: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ts.iter().map(|x| tape.leaf(x)).collect();
            let out = build(&mut tape, &vars);
            (tape, vars, out)
        };
        let grad_leaves: Vec<Tensor> = leaves.iter().map(|x| x.clone().with_requires_grad(true)).collect();
        let (tape, vars, out) = eval(&grad_leaves);
        let grads = tape.backward(out).unwrap();
        let mut worst = 0.0f64;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.wrt(vars[li]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; leaf.numel()]);
            let numeric = central_diff(leaf.data(), 1e-5, |x| {
                let mut ts = leaves.to_vec();
                ts[li] = Tensor::new(leaf.shape().to_vec(), x.to_vec()).unwrap();
                let (tape, _, out) = eval(&ts);
                tape.scalar(out)
            });
            worst = worst.max(max_rel_err(&analytic, &numeric));
        }
        worst
    }

    #[test]
    fn matmul_identity_and_hand_example() {
        let mut tape = Tape::new();
        let eye = tape.constant(&Tensor::identity(2));
        let x = tape.constant(&t(&[2, 1], &[0.3, -7.0]));
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.value(y), &[0.3, -7.0]);

        let a = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let ones = tape.constant(&t(&[2, 1], &[1.0, 1.0]));
        let c = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.dims(c), (2, 1));
        assert_eq!(tape.value(c), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(crate::Error::Dimension { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_gradient_matches_central_differences() {
        let mut rng = Rng::new(11);
        let a: Tensor = rng.gaussian(&[3, 4], 1.0);
        let b: Tensor = rng.gaussian(&[4, 2], 1.0);
        let w: Tensor = rng.gaussian(&[3, 2], 1.0);
        let err = check(&[a, b], |tape, v| {
            let c = tape.matmul(v[0], v[1]).unwrap();
            let wv = tape.constant(&w);
            let p = tape.mul(c, wv).unwrap();
            tape.sum(p)
        });
        assert!(err <= 1e-6, "max relative error {err:e}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[2, 2], &[1.0, 0.0, 3.0, 3.0]));
        let y = tape.softmax_rows(x, 1.0).unwrap();
        let v = tape.value(y);
        assert!((v[0] - 0.7311).abs() < 1e-4 && (v[1] - 0.2689).abs() < 1e-4);
        assert_eq!(&v[2..], &[0.5, 0.5]);
        assert!(matches!(tape.softmax_rows(x, 0.0), Err(crate::Error::Domain(_))));
        assert!(matches!(tape.softmax_rows(x, -1.0), Err(crate::Error::Domain(_))));
    }

    #[test]
    fn elementwise_identities() {
        let xs: Vec<f64> = (0..=100).map(|i| -5.0 + 0.1 * i as f64).collect();
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[xs.len()], &xs));
        let e = tape.exp(x);
        let l = tape.log(e).unwrap();
        for (a, b) in tape.value(l).iter().zip(&xs) {
            assert!((a - b).abs() <= 1e-12);
        }

        let m = tape.constant(&t(&[3], &[1.0, 2.0, 3.0]));
        let mean = tape.mean(m);
        assert_eq!(tape.scalar(mean), 2.0);

        let z = tape.leaf(&Tensor::zeros(&[2, 3]).with_requires_grad(true));
        let s = tape.sum(z);
        assert_eq!(tape.scalar(s), 0.0);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(z).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn log_clamps_at_floor_and_rejects_nan() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[0.0, 1e-20, 0.5]).with_requires_grad(true));
        let l = tape.log(x).unwrap();
        let floor = 1e-12f64.ln();
        assert_eq!(&tape.value(l)[..2], &[floor, floor]);
        let s = tape.sum(l);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[0.0, 0.0, 2.0]);

        let bad = tape.constant(&t(&[3], &[1.0, f64::NAN, 1.0]));
        assert!(matches!(tape.log(bad), Err(crate::Error::Numeric { index: 1, .. })));
    }

    #[test]
    fn normalize_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[2, 2], &[3.0, 4.0, 0.6, 0.8]));
        let y = tape.l2_normalize_rows(x).unwrap();
        let v = tape.value(y);
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert!((v[2] - 0.6).abs() <= 1e-12 && (v[3] - 0.8).abs() <= 1e-12);

        let z = tape.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        assert!(matches!(
            tape.l2_normalize_rows(z),
            Err(crate::Error::DegenerateEmbedding { row: 1, .. })
        ));
    }

    #[test]
    fn normalize_gradient_matches_central_differences() {
        let mut rng = Rng::new(3);
        let x: Tensor = rng.gaussian(&[4, 5], 1.0);
        let w: Tensor = rng.gaussian(&[4, 5], 1.0);
        let err = check(&[x], |tape, v| {
            let y = tape.l2_normalize_rows(v[0]).unwrap();
            let wv = tape.constant(&w);
            let p = tape.mul(y, wv).unwrap();
            tape.sum(p)
        });
        assert!(err <= 1e-6, "max relative error {err:e}");
    }

    #[test]
    fn backward_analytic_cases() {
        let x = t(&[4], &[1.0, -2.0, 0.5, 3.0]).with_requires_grad(true);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let sq = tape.mul(xv, xv).unwrap();
        let s = tape.sum(sq);
        let half = tape.scale(s, 0.5);
        let g = tape.backward(half).unwrap();
        assert_eq!(g.wrt(xv).unwrap(), x.data());

        let not_scalar = tape.exp(xv);
        assert!(matches!(tape.backward(not_scalar), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let b = tape.leaf(&t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let s = tape.sum(a);
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(b).is_none());
    }

    #[test]
    fn repeated_backward_accumulates_twice() {
        let mut rng = Rng::new(8);
        let mut x: Tensor = rng.gaussian(&[3, 3], 1.0);
        x.set_requires_grad(true);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let e = tape.tanh(v);
        let loss = tape.mean(e);
        let once = tape.backward(loss).unwrap().wrt(v).unwrap().to_vec();
        for _ in 0..2 {
            let g = tape.backward(loss).unwrap();
            x.accumulate_grad(g.wrt(v).unwrap()).unwrap();
        }
        for (acc, single) in x.grad().unwrap().iter().zip(&once) {
            assert_eq!(*acc, 2.0 * single);
        }
    }

    #[test]
    fn composite_ops_gradients() {
        let mut rng = Rng::new(21);
        let q: Tensor = rng.gaussian(&[6, 4], 1.0);
        let k: Tensor = rng.gaussian(&[6, 4], 1.0);
        let v: Tensor = rng.gaussian(&[6, 4], 1.0);
        let w: Tensor = rng.gaussian(&[2, 4], 1.0);
        let err = check(&[q, k, v], |tape, x| {
            let a = tape.seq_attention(x[0], x[1], x[2], 3).unwrap();
            let th = tape.tanh(a);
            let pooled = tape.mean_pool(th, 3).unwrap();
            let wv = tape.constant(&w);
            let p = tape.mul(pooled, wv).unwrap();
            tape.sum(p)
        });
        assert!(err <= 1e-6, "attention/pool: {err:e}");

        let a: Tensor = rng.gaussian(&[3, 4], 1.0);
        let b: Tensor = rng.gaussian(&[2, 4], 1.0);
        let err = check(&[a, b], |tape, x| {
            let c = tape.concat_rows(x[0], x[1]).unwrap();
            let g = tape.gather_rows(c, &[4, 0, 0, 2]).unwrap();
            let tr = tape.transpose(g);
            let sm = tape.softmax_rows(tr, 0.7).unwrap();
            let l = tape.log(sm).unwrap();
            let mr = tape.mean_rows(l).unwrap();
            let ex = tape.exp(mr);
            let n = tape.neg(ex);
            tape.sum(n)
        });
        assert!(err <= 1e-6, "gather/softmax: {err:e}");

        let a: Tensor = rng.gaussian(&[3, 4], 1.0);
        let b: Tensor = rng.gaussian(&[5, 4], 1.0);
        let err = check(&[a, b], |tape, x| {
            let c = tape.matmul_nt(x[0], x[1]).unwrap();
            let d = tape.sub(c, c).unwrap();
            let e = tape.add(c, d).unwrap();
            let f = tape.mul(e, e).unwrap();
            tape.mean(f)
        });
        assert!(err <= 1e-6, "matmul_nt: {err:e}");
    }

    #[test]
    fn causal_attention_masks_future_rows() {
        let mut rng = Rng::new(3);
        let q: Tensor = rng.gaussian(&[3, 2], 1.0);
        let k: Tensor = rng.gaussian(&[3, 2], 1.0);
        let v = t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 5.0, 5.0]);
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(&q), tape.constant(&k), tape.constant(&v));
        let a = tape.causal_attention(qv, kv, vv, 3).unwrap();
        // the first row sees only itself
        assert_eq!(&tape.value(a)[..2], &[1.0, 0.0]);
        // no row mixes in the third value except the third row
        assert!(tape.value(a)[2..4].iter().all(|x| *x < 1.0 + 1e-12));

        let err = check(&[q, k, v], |tape, x| {
            let a = tape.causal_attention(x[0], x[1], x[2], 3).unwrap();
            let th = tape.tanh(a);
            tape.sum(th)
        });
        assert!(err <= 1e-6, "causal attention: {err:e}");
    }

    #[test]
    fn prefix_attention_gradients() {
        let mut rng = Rng::new(8);
        let g = |rng: &mut Rng, r: usize| -> Tensor { rng.gaussian(&[r, 3], 1.0) };
        // shared prefix of 2 rows for 4 queries, then one prefix per row
        for groups in [1usize, 4] {
            let leaves = [g(&mut rng, 4), g(&mut rng, 4), g(&mut rng, 4), g(&mut rng, 2 * groups), g(&mut rng, 2 * groups)];
            let err = check(&leaves, |tape, x| {
                let a = tape.prefix_attention(x[0], x[1], x[2], x[3], x[4], 2).unwrap();
                let th = tape.tanh(a);
                let sq = tape.mul(th, a).unwrap();
                tape.sum(sq)
            });
            assert!(err <= 1e-6, "prefix attention, {groups} groups: {err:e}");
        }
    }

    #[test]
    fn prefix_attention_matches_causal_last_row() {
        // a prefix followed by its own row equals the last row of causal attention
        let mut rng = Rng::new(9);
        let (q, k, v): (Tensor, Tensor, Tensor) = (rng.gaussian(&[3, 4], 1.0), rng.gaussian(&[3, 4], 1.0), rng.gaussian(&[3, 4], 1.0));
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(&q), tape.constant(&k), tape.constant(&v));
        let full = tape.causal_attention(qv, kv, vv, 3).unwrap();
        let last = |x: &Tensor| x.select_rows(&[2]);
        let pre = |x: &Tensor| x.select_rows(&[0, 1]);
        let (ql, kl, vl) = (tape.constant(&last(&q)), tape.constant(&last(&k)), tape.constant(&last(&v)));
        let (pk, pv) = (tape.constant(&pre(&k)), tape.constant(&pre(&v)));
        let p = tape.prefix_attention(ql, kl, vl, pk, pv, 2).unwrap();
        for (a, b) in tape.value(p).iter().zip(&tape.value(full)[8..]) {
            assert!((a - b).abs() < 1e-14);
        }
        let bad = tape.constant(&t(&[3, 4], &[0.0; 12]));
        assert!(matches!(tape.prefix_attention(ql, kl, vl, bad, bad, 2), Err(crate::Error::Dimension { .. })));
    }
}
