//! Dense matrices, a reverse-mode tape, AdamW and the JSON checkpoint format.

mod adamw;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;
pub mod train;

pub use adamw::{AdamW, AdamWConfig};
pub use params::{ParamStore, META_KEY};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn matmul_identity_and_selection() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2));
        let m = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[vec![0.0], vec![5.0]]).unwrap());
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut r = rng(7);
        let a = Tensor::randn(&mut r, 3, 4, 1.0);
        let b = Tensor::randn(&mut r, 4, 2, 1.0);
        let mut expected = Tensor::zeros(3, 2);
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for l in 0..4 {
                    acc += a.get(i, l) * b.get(l, j);
                }
                expected.set(i, j, acc);
            }
        }
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a), tape.constant(b));
        let out = tape.matmul(va, vb).unwrap();
        assert!(tape.value(out).max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(
            Tensor::from_rows(&[vec![0.0, 0.0, 0.0], vec![1000.0, 0.0, -1000.0], vec![1.0, 2.0, 3.0]])
                .unwrap(),
        );
        let y = tape.softmax_rows(x).unwrap();
        let y = tape.value(y);
        for c in 0..3 {
            assert!((y.get(0, c) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((y.get(1, 0) - 1.0).abs() < 1e-12);
        assert!(y.get(1, 1).abs() < 1e-12);
        let denom: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for c in 0..3 {
            assert!((y.get(2, c) - ((c + 1) as f64).exp() / denom).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row_vector(vec![0.0, f64::NAN]).unwrap());
        assert!(matches!(tape.softmax_rows(x), Err(Error::NumericDomain { .. })));
        assert!(matches!(tape.sigmoid(x), Err(Error::NumericDomain { .. })));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(3, 3));
        let y = tape.causal_softmax_rows(x).unwrap();
        let y = tape.value(y);
        assert_eq!(y.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(y.row(1), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn sigmoid_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row_vector(vec![0.0, 50.0, -50.0, 1.7, -1.7]).unwrap());
        let y = tape.sigmoid(x).unwrap();
        let y = tape.value(y).data().to_vec();
        assert_eq!(y[0], 0.5);
        assert!((y[1] - 1.0).abs() < 1e-12);
        assert!(y[2].abs() < 1e-12 && y[2] > 0.0);
        assert!((y[3] + y[4] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(3, 7));
        let l = tape.cross_entropy(z, &[0, 3, 6]).unwrap();
        assert!((tape.value(l).item() - 7f64.ln()).abs() < 1e-12);

        let mut peaked = Tensor::zeros(2, 5);
        peaked.set(0, 2, 30.0);
        peaked.set(1, 4, 30.0);
        let p = tape.constant(peaked);
        let l = tape.cross_entropy(p, &[2, 4]).unwrap();
        assert!(tape.value(l).item() < 1e-12);

        let err = tape.cross_entropy(p, &[2, 5]).unwrap_err();
        assert!(matches!(err, Error::Index { position: 1, index: 5, bound: 5 }));
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp_oracle() {
        let mut r = rng(11);
        let logits = Tensor::randn(&mut r, 4, 5, 2.0);
        let targets: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
        let mut expected = 0.0;
        for (t, &y) in targets.iter().enumerate() {
            let row = logits.row(t);
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            expected += lse - row[y];
        }
        expected /= 4.0;
        let mut tape = Tape::new();
        let v = tape.constant(logits);
        let l = tape.cross_entropy(v, &targets).unwrap();
        assert!((tape.value(l).item() - expected).abs() < 1e-10);
    }

    #[test]
    fn uniform_cross_entropy_is_log_vocab() {
        for v in [2usize, 10, 1000, 10_000] {
            let mut tape = Tape::new();
            let z = tape.constant(Tensor::filled(1, v, 0.25));
            let l = tape.cross_entropy(z, &[v - 1]).unwrap();
            assert!((tape.value(l).item() - (v as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]).unwrap());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn frozen_graph_yields_no_gradients() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::filled(2, 2, 1.0));
        let mut tape = Tape::new();
        let w = tape.param(&store, "w", false).unwrap();
        let y = tape.gelu(w);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.is_empty());
        assert!(g.into_named().is_empty());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let mut r = rng(3);
        let mut store = ParamStore::new();
        store.insert("a", Tensor::randn(&mut r, 4, 6, 1.0));
        store.insert("b", Tensor::randn(&mut r, 6, 5, 1.0));
        let run = || {
            let mut tape = Tape::new();
            let a = tape.param(&store, "a", true).unwrap();
            let b = tape.param(&store, "b", true).unwrap();
            let h = tape.matmul(a, b).unwrap();
            let s = tape.softmax_rows(h).unwrap();
            let l = tape.cross_entropy(s, &[0, 1, 2, 3]).unwrap();
            tape.backward(l).unwrap().into_named()
        };
        let (g1, g2) = (run(), run());
        for (k, v) in &g1 {
            let w = &g2[k];
            assert!(v.data().iter().zip(w.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    /// Every differentiable op, composed, checked against central differences.
    #[test]
    fn all_ops_pass_finite_difference_check() {
        let mut r = rng(5);
        let mut store = ParamStore::new();
        store.insert("x", Tensor::randn(&mut r, 3, 4, 1.0));
        store.insert("w", Tensor::randn(&mut r, 4, 4, 0.5));
        store.insert("b", Tensor::randn(&mut r, 1, 4, 0.5));
        store.insert("table", Tensor::randn(&mut r, 5, 4, 1.0));
        let forward = |s: &ParamStore| -> crate::error::Result<(Tape, Var)> {
            let mut t = Tape::new();
            let x = t.param(s, "x", true)?;
            let w = t.param(s, "w", true)?;
            let b = t.param(s, "b", true)?;
            let table = t.param(s, "table", true)?;
            let h = t.linear(x, w, b)?;
            let g = t.gelu(h);
            let e = t.gather_rows(table, &[1, 4, 1])?;
            let m = t.mul(g, e)?;
            let sg = t.sigmoid(m)?;
            let d = t.sub(sg, e)?;
            let att = t.matmul_nt(d, x)?;
            let att = t.scale(att, 0.5);
            let p = t.causal_softmax_rows(att)?;
            let v = t.matmul(p, x)?;
            let c = t.concat_rows(&[v, d])?;
            let a = t.add(c, c)?;
            let logits = t.matmul_nt(a, table)?;
            let l = t.cross_entropy(logits, &[0, 2, 4, 1, 3, 0])?;
            Ok((t, l))
        };
        let (tape, l) = forward(&store).unwrap();
        let analytic = tape.backward(l).unwrap().into_named();
        let names: Vec<String> = store.names().cloned().collect();
        let report = gradcheck::check(&store, &names, &analytic, 1e-5, |s| {
            let (t, l) = forward(s)?;
            Ok(t.value(l).item())
        })
        .unwrap();
        assert!(report.max_relative_error() < 1e-6, "{report:?}");
    }

    #[test]
    fn adamw_descends_quadratic() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(0.0));
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        });
        let mut losses = Vec::new();
        for _ in 0..10 {
            let p = store.get("p").unwrap().item();
            losses.push((p - 3.0).powi(2));
            let grads = std::collections::BTreeMap::from([(
                "p".to_string(),
                Tensor::scalar(2.0 * (p - 3.0)),
            )]);
            opt.step(&mut store, &grads).unwrap();
        }
        // direct simulation of the update rule: from p=0 the loss falls every step
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }
}
