//! Dense tensors, reverse-mode differentiation, adadelta and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{log_softmax_rows, softmax_rows, Graph, NodeId};
pub use optim::{clip_gradients, AdadeltaState};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::{ShapeError, Tensor};

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::gradcheck::{compare, numeric_gradient};
    use super::*;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Builds `sum(op(params) * probe)` and compares its analytic gradient
    /// against central differences.
    fn check(shapes: &[&[usize]], build: impl Fn(&mut Graph<f64>, &[NodeId]) -> NodeId) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        for (i, s) in shapes.iter().enumerate() {
            store.add(format!("p{i}"), rand_tensor(&mut rng, s));
        }
        let probe_seed = rng.random::<u64>();
        let eval = |store: &ParamStore<f64>| -> (f64, Option<Gradients<f64>>) {
            let mut g = Graph::new(store);
            let ids: Vec<NodeId> = store.ids().map(|p| g.param(p)).collect();
            let out = build(&mut g, &ids);
            let shape = g.shape(out).to_vec();
            let mut prng = ChaCha8Rng::seed_from_u64(probe_seed);
            let probe = g.input(rand_tensor(&mut prng, &shape));
            let weighted = g.mul(out, probe).unwrap();
            let loss = g.sum(weighted);
            let value = g.value(loss).data()[0];
            (value, Some(g.backward(loss).unwrap()))
        };
        let analytic = eval(&store).1.unwrap();
        let numeric = numeric_gradient(&mut store, 1e-5, |s| eval(s).0);
        let report = compare(&store, &analytic, &numeric, 1e-8);
        assert!(report.max_relative_error < 1e-6, "{report:?}");
        report.max_relative_error
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::from_f64(&[1, 2], &[0.0, 0.0]).unwrap());
        let y = g.softmax(x, None).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_masks_are_exact_zeros() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.5, 9.0]).unwrap());
        let y = g
            .softmax(x, Some(&[true, true, false, true, false, true]))
            .unwrap();
        let v = g.value(y);
        assert_eq!(v.get2(0, 2), 0.0);
        assert_eq!(v.get2(1, 1), 0.0);
        for r in 0..2 {
            assert!((v.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(g.softmax(x, Some(&[false; 6])).is_err());
    }

    #[test]
    fn maxout_takes_pair_maxima() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::from_f64(&[1, 4], &[1.0, -2.0, 3.0, 0.0]).unwrap());
        let y = g.maxout(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 3.0]);
    }

    #[test]
    fn conv_of_zero_input_is_zero() {
        let mut store = ParamStore::<f64>::new();
        let k = store.add("k", Tensor::from_f64(&[3, 5], &[0.3; 15]).unwrap());
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(&[2, 7]));
        let kn = g.param(k);
        let y = g.conv1d(x, kn).unwrap();
        assert_eq!(g.shape(y), &[14, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let k = store.add("k", rand_tensor(&mut rng, &[2, 5]));
        let xin = rand_tensor(&mut rng, &[1, 6]);
        let mut g = Graph::new(&store);
        let x = g.input(xin.clone());
        let kn = g.param(k);
        let y = g.conv1d(x, kn).unwrap();
        let kv = store.get(k);
        for i in 0..6 {
            for f in 0..2 {
                let mut expect = 0.0;
                for j in 0..5 {
                    let src = i as isize + j as isize - 2;
                    if (0..6).contains(&src) {
                        expect += kv.get2(f, j) * xin.data()[src as usize];
                    }
                }
                assert!((g.value(y).get2(i, f) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn derivative_of_square() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Tensor::scalar(3.0));
        let mut g = Graph::new(&store);
        let xn = g.param(x);
        let sq = g.mul(xn, xn).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.get(x).data(), &[6.0]);
    }

    #[test]
    fn softmax_ce_gradient_is_p_minus_onehot() {
        let mut store = ParamStore::<f64>::new();
        let logits = store.add("l", Tensor::zeros(&[1, 4]));
        let mut g = Graph::new(&store);
        let ln = g.param(logits);
        let loss = g.softmax_ce(ln, &[3], vec![1.0]).unwrap();
        assert!((g.value(loss).data()[0] - 4f64.ln()).abs() < 1e-12);
        let grads = g.backward(loss).unwrap();
        let expect = [0.25, 0.25, 0.25, -0.75];
        for (a, b) in grads.get(logits).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unreachable_parameters_get_zero_gradient() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::scalar(2.0));
        let b = store.add("b", Tensor::from_f64(&[2], &[1.0, 1.0]).unwrap());
        let mut g = Graph::new(&store);
        let an = g.param(a);
        let _bn = g.param(b);
        let loss = g.mul(an, an).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(b).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::zeros(&[2]));
        let mut g = Graph::new(&store);
        let an = g.param(a);
        assert!(g.backward(an).is_err());
    }

    #[test]
    fn shape_errors_name_both_operands() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::zeros(&[2, 3]));
        let b = store.add("b", Tensor::zeros(&[3, 2]));
        let mut g = Graph::new(&store);
        let (an, bn) = (g.param(a), g.param(b));
        match g.add(an, bn).unwrap_err() {
            ShapeError::Mismatch { left, right, .. } => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![3, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gradcheck_matmul_and_bias() {
        check(&[&[3, 4], &[4, 2], &[2]], |g, p| {
            g.affine(p[0], p[1], p[2]).unwrap()
        });
    }

    #[test]
    fn gradcheck_elementwise() {
        check(&[&[2, 3], &[2, 3]], |g, p| {
            let s = g.sub(p[0], p[1]).unwrap();
            let m = g.mul(s, p[0]).unwrap();
            let a = g.add(m, p[1]).unwrap();
            g.scale(a, 0.7)
        });
    }

    #[test]
    fn gradcheck_activations() {
        check(&[&[2, 3]], |g, p| g.sigmoid(p[0]));
        check(&[&[2, 3]], |g, p| g.tanh(p[0]));
        check(&[&[2, 3]], |g, p| g.softmax(p[0], None).unwrap());
        check(&[&[2, 3]], |g, p| {
            g.softmax(p[0], Some(&[true, false, true, true, true, false]))
                .unwrap()
        });
    }

    #[test]
    fn gradcheck_structural() {
        check(&[&[2, 3], &[2, 2]], |g, p| {
            g.concat(&[p[0], p[1]], 1).unwrap()
        });
        check(&[&[2, 3], &[1, 3]], |g, p| {
            g.concat(&[p[0], p[1]], 0).unwrap()
        });
        check(&[&[2, 5]], |g, p| g.slice_cols(p[0], 1, 4).unwrap());
        check(&[&[4, 3]], |g, p| g.embed(p[0], &[2, 0, 2]).unwrap());
        check(&[&[2, 3]], |g, p| g.repeat_rows(p[0], 3));
        check(&[&[2, 3]], |g, p| g.reshape(p[0], &[3, 2]).unwrap());
        check(&[&[2, 3], &[2, 3], &[2, 3]], |g, p| {
            g.interleave(&[p[0], p[1], p[2]]).unwrap()
        });
        check(&[&[2, 3]], |g, p| {
            g.row_scale(p[0], vec![0.5, -2.0]).unwrap()
        });
    }

    #[test]
    fn gradcheck_attention_pieces() {
        check(&[&[2, 3], &[6, 4]], |g, p| {
            g.weighted_sum(p[0], p[1]).unwrap()
        });
        check(&[&[2, 6], &[3, 5]], |g, p| g.conv1d(p[0], p[1]).unwrap());
        check(&[&[3, 6]], |g, p| g.maxout(p[0]).unwrap());
        check(&[&[3, 4]], |g, p| {
            g.softmax_ce(p[0], &[1, 3, 0], vec![0.5, 1.0, 0.0]).unwrap()
        });
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_are_distributions(values in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let x = Tensor::new(&[3, 4], values).unwrap();
            let y = softmax_rows(&x, None).unwrap();
            for r in 0..3 {
                proptest::prop_assert!(y.row(r).iter().all(|&p| p >= 0.0));
                proptest::prop_assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
