//! Dense-tensor reverse-mode automatic differentiation.
//!
//! The operator set is deliberately small: exactly what the encoder,
//! projector and distillation loss need. Shapes are checked eagerly and a
//! mismatch is reported as [`Error::Argument`](crate::Error::Argument)
//! naming the operator.
//!
//! ```
//! use ript::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let w = g.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let x = g.constant(Tensor::new(vec![3], vec![4.0, 5.0, 6.0]).unwrap());
//! let prod = g.mul(w, x).unwrap();
//! let loss = g.sum_all(prod);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap(), &[4.0, 5.0, 6.0]);
//! ```

mod adam;
pub mod archive;
mod graph;
mod params;
mod real;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{BnMode, BnStats, Gradients, Graph, Var, BN_EPS, BN_MOMENTUM};
pub use params::{Param, ParamId, ParamSet};
pub use real::Real;
pub use tensor::{CsrMatrix, Tensor};

#[cfg(test)]
mod tests {
    use std::rc::Rc;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    /// Central-difference check of `build` over every input; the scalar is a
    /// random weighting of the op output so that every output entry matters.
    fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let probe = {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let out = build(&mut g, &vars);
            rand_tensor(&mut rng, g.shape(out).to_vec())
        };
        let eval = |ins: &[Tensor<f64>], grad: bool| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone(), grad)).collect();
            let out = build(&mut g, &vars);
            let w = g.constant(probe.clone());
            let prod = g.mul(out, w).unwrap();
            let loss = g.sum_all(prod);
            let value = g.value(loss).data()[0];
            let grads = if grad { Some(g.backward(loss).unwrap()) } else { None };
            (value, grads, vars)
        };
        let (_, grads, vars) = eval(&inputs, true);
        let grads = grads.unwrap();
        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).unwrap().to_vec();
            let mut numeric = vec![0.0; input.len()];
            for i in 0..input.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                numeric[i] = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * h);
            }
            let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt()).max(1e-12);
            assert!(diff / scale < 1e-4, "input {k}: relative error {}", diff / scale);
        }
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![4]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn relu_and_gelu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let x = g.constant(Tensor::new(vec![2], vec![0.0, 3.0]).unwrap());
        let y = g.gelu(x);
        // x·Φ(x) with Φ(3) = 0.998650101968...
        assert_eq!(g.value(y).data()[0], 0.0);
        assert!((g.value(y).data()[1] - 3.0 * 0.998_650_101_968_369_9).abs() < 1e-12);
        assert!((g.value(y).data()[1] - 2.9960).abs() < 1e-4);
    }

    #[test]
    fn linear_loss_gradient_is_input() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        let x = g.constant(Tensor::new(vec![3], vec![4.0, -5.0, 6.0]).unwrap());
        let p = g.mul(w, x).unwrap();
        let l = g.sum_all(p);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(w).unwrap(), &[4.0, -5.0, 6.0]);
        assert!(gr.get(x).is_none());
    }

    #[test]
    fn softmax_cross_entropy_gradient() {
        let logits = vec![0.3, -1.2, 2.0, 0.5];
        let onehot = vec![0.0, 0.0, 1.0, 0.0];
        let mut g = Graph::<f64>::new();
        let z = g.param(Tensor::new(vec![4], logits.clone()).unwrap());
        let q = g.constant(Tensor::new(vec![4], onehot.clone()).unwrap());
        let p = g.softmax(z, 0).unwrap();
        let lp = g.log(p, -30.0);
        let t = g.mul(lp, q).unwrap();
        let s = g.sum_all(t);
        let loss = g.scale(s, -1.0);
        let sm = g.value(p).data().to_vec();
        let gr = g.backward(loss).unwrap();
        for i in 0..4 {
            assert!((gr.get(z).unwrap()[i] - (sm[i] - onehot[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(vec![2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        let c = g.constant(Tensor::zeros(vec![3, 2]));
        assert!(g.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn softmax_rows_and_l2_rows_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::<f64>::new();
        let x = g.constant(rand_tensor(&mut rng, vec![5, 7]));
        let s = g.softmax(x, 1).unwrap();
        for r in 0..5 {
            assert!((g.value(s).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let n = g.l2_normalize(x).unwrap();
        for r in 0..5 {
            assert!((g.value(n).row(r).iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        }
        let z = g.constant(Tensor::zeros(vec![1, 3]));
        let nz = g.l2_normalize(z).unwrap();
        assert_eq!(g.value(nz).data(), &[0.0; 3]);
        assert_eq!(g.zero_norm_rows(), 1);
    }

    #[test]
    fn batchnorm_eval_is_per_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, vec![6, 3]);
        let (rm, rv) = (vec![0.1, -0.2, 0.3], vec![1.5, 0.5, 2.0]);
        let run = |t: Tensor<f64>| {
            let mut g = Graph::new();
            let x = g.constant(t);
            let gm = g.constant(Tensor::full(vec![3], 1.3));
            let bt = g.constant(Tensor::full(vec![3], -0.4));
            let y = g.batchnorm(x, gm, bt, BnMode::Eval, &rm, &rv).unwrap();
            g.value(y).clone()
        };
        let full = run(x.clone());
        let first = run(Tensor::new(vec![1, 3], x.row(0).to_vec()).unwrap());
        assert_eq!(full.row(0), first.data());
    }

    #[test]
    fn batchnorm_train_records_statistics() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
        let gm = g.constant(Tensor::full(vec![1], 1.0));
        let bt = g.constant(Tensor::zeros(vec![1]));
        let y = g.batchnorm(x, gm, bt, BnMode::Train, &[0.0], &[1.0]).unwrap();
        let st = g.bn_stats(y).unwrap();
        assert_eq!(st.mean, vec![2.0]);
        assert_eq!(st.var_unbiased, vec![2.0]);
        let out = g.value(y).data();
        let expected = 1.0 / (1.0f64 + BN_EPS).sqrt();
        assert!((out[0] + expected).abs() < 1e-12 && (out[1] - expected).abs() < 1e-12);
    }

    #[test]
    fn gradcheck_every_primitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut r = |s: Vec<usize>| rand_tensor(&mut rng, s);

        check(vec![r(vec![3, 4]), r(vec![4, 5])], |g, v| g.matmul(v[0], v[1]).unwrap());
        check(vec![r(vec![2, 3]), r(vec![2, 3])], |g, v| g.add(v[0], v[1]).unwrap());
        check(vec![r(vec![2, 3]), r(vec![2, 3])], |g, v| g.sub(v[0], v[1]).unwrap());
        check(vec![r(vec![2, 3]), r(vec![2, 3])], |g, v| g.mul(v[0], v[1]).unwrap());
        check(vec![r(vec![4]), r(vec![4])], |g, v| {
            let sq = g.mul(v[0], v[0]).unwrap();
            g.mul(sq, v[1]).unwrap()
        });
        check(vec![r(vec![3, 4]), r(vec![4])], |g, v| g.add_row(v[0], v[1]).unwrap());
        check(vec![r(vec![3, 4])], |g, v| g.scale(v[0], -2.5));
        check(vec![r(vec![3, 4])], |g, v| g.relu(v[0]));
        check(vec![r(vec![3, 4])], |g, v| g.gelu(v[0]));
        check(vec![r(vec![3, 4])], |g, v| g.exp(v[0]));
        check(vec![r(vec![3, 4])], |g, v| {
            let e = g.exp(v[0]);
            g.log(e, -30.0)
        });
        check(vec![r(vec![2, 3, 4])], |g, v| g.softmax(v[0], 0).unwrap());
        check(vec![r(vec![2, 3, 4])], |g, v| g.softmax(v[0], 1).unwrap());
        check(vec![r(vec![2, 3, 4])], |g, v| g.softmax(v[0], 2).unwrap());
        check(vec![r(vec![2, 3, 4])], |g, v| g.sum(v[0], 1).unwrap());
        check(vec![r(vec![2, 3, 4])], |g, v| g.mean(v[0], 2).unwrap());
        check(vec![r(vec![2, 3, 4])], |g, v| g.mean(v[0], 0).unwrap());
        check(vec![r(vec![3, 5])], |g, v| {
            let s = g.sum_all(v[0]);
            g.reshape(s, vec![1]).unwrap()
        });
        check(vec![r(vec![4, 5])], |g, v| g.l2_normalize(v[0]).unwrap());
        check(vec![r(vec![6, 3]), r(vec![3]), r(vec![3])], |g, v| {
            g.batchnorm(v[0], v[1], v[2], BnMode::Train, &[0.0; 3], &[1.0; 3]).unwrap()
        });
        check(vec![r(vec![6, 3]), r(vec![3]), r(vec![3])], |g, v| {
            g.batchnorm(v[0], v[1], v[2], BnMode::Eval, &[0.2, -0.1, 0.0], &[0.7, 1.1, 2.0]).unwrap()
        });
        check(vec![r(vec![2, 3]), r(vec![4, 3])], |g, v| g.concat(&[v[0], v[1]]).unwrap());
        check(vec![r(vec![4, 3])], |g, v| g.gather(v[0], Rc::new(vec![3, 0, 3, 1, 3])).unwrap());
        check(vec![r(vec![4, 3])], |g, v| g.reshape(v[0], vec![2, 6]).unwrap());
        let dense = r(vec![3, 4]);
        let mut sparse_src = dense.data().to_vec();
        sparse_src[1] = 0.0;
        sparse_src[6] = 0.0;
        let csr = Rc::new(CsrMatrix::from_dense(3, 4, &sparse_src));
        check(vec![r(vec![4, 2])], move |g, v| g.sp_matmul(csr.clone(), v[0]).unwrap());
    }

    #[test]
    fn sparse_and_dense_matmul_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..12).map(|i| if i % 3 == 0 { 0.0 } else { rng.random_range(-1.0..1.0) }).collect();
        let b = rand_tensor(&mut rng, vec![4, 2]);
        let mut g = Graph::<f64>::new();
        let av = g.constant(Tensor::new(vec![3, 4], a.clone()).unwrap());
        let bv = g.constant(b);
        let dense = g.matmul(av, bv).unwrap();
        let sparse = g.sp_matmul(Rc::new(CsrMatrix::from_dense(3, 4, &a)), bv).unwrap();
        for (x, y) in g.value(dense).data().iter().zip(g.value(sparse).data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}
