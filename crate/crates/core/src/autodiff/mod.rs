//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor).

mod grad_check;
mod graph;
pub mod kernels;

pub use grad_check::{grad_check, Coords, GradCheckReport, REL_ERROR_FLOOR};
pub use graph::{Gradients, Graph, Retain, Var};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::TensorError;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    /// Triple-loop reference product.
    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::<f64>::new();
        let id = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0])).unwrap();
        let ia = g.matmul(id, a).unwrap();
        assert_eq!(g.value(ia).data(), &[1.0, 2.0, 3.0, 4.0]);
        let ab = g.matmul(a, b).unwrap();
        assert_eq!(g.value(ab).data(), &[19.0, 22.0, 43.0, 50.0]);
        assert_eq!(naive_matmul(g.value(a), g.value(b)), vec![19.0, 22.0, 43.0, 50.0]);

        let x = g.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let y = g.constant(Tensor::zeros(vec![4, 2])).unwrap();
        assert!(matches!(g.matmul(x, y), Err(TensorError::Shape { op: "matmul", .. })));
    }

    #[test]
    fn matmul_matches_triple_loop_on_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (m, k, n) = (rng.gen_range(1..7), rng.gen_range(1..7), rng.gen_range(1..7));
            let (a, b) = (random(&[m, k], &mut rng), random(&[k, n], &mut rng));
            let mut g = Graph::new();
            let (av, bv) = (g.constant(a.clone()).unwrap(), g.constant(b.clone()).unwrap());
            let c = g.matmul(av, bv).unwrap();
            for (x, y) in g.value(c).data().iter().zip(naive_matmul(&a, &b)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(t(&[3], &[0.0, 0.0, 0.0])).unwrap();
        let s = g.softmax(z, 0).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = g.constant(t(&[2], &[1000.0, 1000.0])).unwrap();
        let s = g.softmax(big, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
        let x = g.constant(t(&[2], &[0.0, 3f64.ln()])).unwrap();
        let s = g.softmax(x, 0).unwrap();
        assert!((g.value(s).data()[0] - 0.25).abs() < 1e-15);
        assert!((g.value(s).data()[1] - 0.75).abs() < 1e-15);
        assert!(matches!(g.softmax(x, 1), Err(TensorError::InvalidAxis { .. })));
    }

    #[test]
    fn softmax_along_inner_axis() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0])).unwrap();
        let s = g.softmax(x, 0).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn nn_primitive_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 4], &[3.0, 3.0, 3.0, 3.0])).unwrap();
        let gam = g.constant(Tensor::ones(vec![4])).unwrap();
        let bet = g.constant(Tensor::zeros(vec![4])).unwrap();
        let y = g.layer_norm(x, gam, bet, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            g.layer_norm(x, gam, bet, 0.0),
            Err(TensorError::InvalidArgument { .. })
        ));

        let z = g.constant(Tensor::scalar(0.0)).unwrap();
        let gz = g.gelu(z).unwrap();
        assert_eq!(g.value(gz).item(), Some(0.0));

        let img = g.constant(Tensor::ones(vec![1, 1, 4, 4])).unwrap();
        let k = g.constant(Tensor::ones(vec![1, 1, 2, 2])).unwrap();
        let c = g.conv2d(img, k, 2, 0).unwrap();
        assert_eq!(g.shape(c), &[1, 1, 2, 2]);
        assert_eq!(g.value(c).data(), &[4.0; 4]);
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::<f64>::new();
        let x = g.constant(random(&[3, 8], &mut rng)).unwrap();
        let gam = g.constant(Tensor::ones(vec![8])).unwrap();
        let bet = g.constant(Tensor::zeros(vec![8])).unwrap();
        let y = g.layer_norm(x, gam, bet, 1e-12).unwrap();
        for row in g.value(y).data().chunks(8) {
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2, 2], &[1.0, -2.0, 0.5, 4.0])).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);

        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        let y = g.scale(x, 2.0).unwrap();
        assert_eq!(g.backward(y).unwrap_err(), TensorError::NonScalarSeed(vec![2]));
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.backward(s).unwrap_err(), TensorError::GraphFreed);
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        let unused = g.param(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn backward_is_linear_in_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = random(&[4, 3], &mut rng);
        let x = random(&[2, 4], &mut rng);
        let run = |seed: f64| {
            let mut g = Graph::<f64>::new();
            let wv = g.param(w.clone()).unwrap();
            let xv = g.constant(x.clone()).unwrap();
            let y = g.matmul(xv, wv).unwrap();
            let y = g.gelu(y).unwrap();
            let s = g.softmax(y, 1).unwrap();
            let l = g.mean(s).unwrap();
            let l2 = g.mul(l, l).unwrap();
            let grads = g.backward_seeded(l2, seed, Retain::Free).unwrap();
            grads.get(wv).unwrap().clone()
        };
        let (g1, g2) = (run(1.0), run(2.0));
        for (a, b) in g1.data().iter().zip(g2.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn non_finite_values_name_the_primitive() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1], &[f64::MAX])).unwrap();
        let err = g.scale(x, 10.0).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "scale" });
    }

    #[test]
    fn grad_check_examples() {
        let x = t(&[5], &[0.3, -1.2, 2.0, 0.0, 0.7]);
        let half_norm = |g: &mut Graph<f64>, v: Var| {
            let sq = g.mul(v, v)?;
            let s = g.sum(sq)?;
            g.scale(s, 0.5)
        };
        let r = grad_check(half_norm, &x, 1e-5, 1e-8, Coords::All).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.max_abs_error < 1e-9);

        let r0 = grad_check(half_norm, &x, 1e-5, 0.0, Coords::All).unwrap();
        assert!(!r0.passed);

        // CE(softmax(Wx), y) with respect to W.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = random(&[4, 3], &mut rng);
        let xin = random(&[3, 1], &mut rng);
        let ce = move |g: &mut Graph<f64>, wv: Var| {
            let xv = g.constant(xin.clone())?;
            let z = g.matmul(wv, xv)?;
            let z = g.reshape(z, &[1, 4])?;
            let ls = g.log_softmax(z, 1)?;
            let y = g.constant(Tensor::from_f64(vec![1, 4], &[0.0, 0.0, 1.0, 0.0])?)?;
            let p = g.mul(ls, y)?;
            let s = g.sum(p)?;
            g.scale(s, -1.0)
        };
        let r = grad_check(ce, &w, 1e-5, 1e-4, Coords::All).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn grad_check_rejects_bad_step() {
        let x = t(&[1], &[1.0]);
        assert!(grad_check(|g, v| g.sum(v), &x, 0.0, 1e-4, Coords::All).is_err());
    }

    /// Builds one primitive applied to random inputs and reduces it to a
    /// scalar through a fixed random projection.
    fn check_primitive(name: &str, shape: &[usize], seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(shape, &mut rng);
        let rank = shape.len();
        let last = shape[rank - 1];
        let aux = random(shape, &mut rng);
        let w = random(&[last, 3], &mut rng);
        let gamma = random(&[last], &mut rng);
        let beta = random(&[last], &mut rng);
        let name = name.to_string();
        let f = move |g: &mut Graph<f64>, v: Var| -> Result<Var, TensorError> {
            let y = match name.as_str() {
                "add" => {
                    let a = g.constant(aux.clone())?;
                    g.add(v, a)?
                }
                "sub" => {
                    let a = g.constant(aux.clone())?;
                    g.sub(a, v)?
                }
                "mul" => {
                    let a = g.constant(aux.clone())?;
                    g.mul(v, a)?
                }
                "scale" => g.scale(v, -1.7)?,
                "softmax" => g.softmax(v, rank - 1)?,
                "softmax0" => g.softmax(v, 0)?,
                "log_softmax" => g.log_softmax(v, rank - 1)?,
                "gelu" => g.gelu(v)?,
                "layer_norm" => {
                    let ga = g.constant(gamma.clone())?;
                    let be = g.constant(beta.clone())?;
                    g.layer_norm(v, ga, be, 1e-5)?
                }
                "matmul" => {
                    let flat: usize = g.shape(v)[..rank - 1].iter().product();
                    let r = g.reshape(v, &[flat, last])?;
                    let wv = g.constant(w.clone())?;
                    g.matmul(r, wv)?
                }
                "transpose" => g.transpose(v)?,
                "mean_axis" => g.mean_axis(v, 0)?,
                "narrow" => g.narrow(v, rank - 1, 0, last.div_ceil(2))?,
                "concat" => {
                    let a = g.constant(aux.clone())?;
                    g.concat(&[a, v, v], 0)?
                }
                "add_broadcast" => {
                    let b = g.constant(beta.clone())?;
                    let s = g.add_broadcast(v, b)?;
                    g.mul(s, s)?
                }
                other => panic!("unknown primitive {other}"),
            };
            let proj = Tensor::from_fn(g.shape(y).to_vec(), |i| ((i as f64) * 0.7).sin());
            let p = g.constant(proj)?;
            let z = g.mul(y, p)?;
            g.sum(z)
        };
        let report = grad_check(f, &x, 1e-5, 1e-4, Coords::All).unwrap();
        assert!(report.passed, "{report:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn primitives_match_finite_differences(
            which in 0usize..15,
            rows in 1usize..4,
            cols in 2usize..5,
            seed in 0u64..1000,
        ) {
            let names = [
                "add", "sub", "mul", "scale", "softmax", "softmax0", "log_softmax", "gelu",
                "layer_norm", "matmul", "transpose", "mean_axis", "narrow", "concat", "add_broadcast",
            ];
            check_primitive(names[which], &[rows, cols], seed);
        }

        #[test]
        fn softmax_rows_normalized_and_shift_invariant(
            vals in proptest::collection::vec(-30.0f64..30.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let n = vals.len();
            let mut g = Graph::<f64>::new();
            let x = g.constant(Tensor::new(vec![n], vals.clone()).unwrap()).unwrap();
            let xs = g.constant(Tensor::new(vec![n], vals.iter().map(|v| v + shift).collect()).unwrap()).unwrap();
            let (s, ss) = (g.softmax(x, 0).unwrap(), g.softmax(xs, 0).unwrap());
            let total: f64 = g.value(s).data().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            prop_assert!(g.value(s).max_abs_diff(g.value(ss)) < 1e-6);
        }
    }

    #[test]
    fn structured_primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        // conv2d: gradient with respect to input and weights.
        let x = random(&[2, 2, 5, 5], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let (x2, w2) = (x.clone(), w.clone());
        let conv_x = move |g: &mut Graph<f64>, v: Var| {
            let wv = g.constant(w2.clone())?;
            let c = g.conv2d(v, wv, 2, 1)?;
            let c2 = g.mul(c, c)?;
            g.sum(c2)
        };
        assert!(grad_check(conv_x, &x, 1e-5, 1e-4, Coords::All).unwrap().passed);
        let conv_w = move |g: &mut Graph<f64>, v: Var| {
            let xv = g.constant(x2.clone())?;
            let c = g.conv2d(xv, v, 1, 1)?;
            let c = g.gelu(c)?;
            g.sum(c)
        };
        assert!(grad_check(conv_w, &w, 1e-5, 1e-4, Coords::All).unwrap().passed);

        // group norm with a nonlinear readout.
        let gx = random(&[2, 4, 3, 3], &mut rng);
        let gamma = random(&[4], &mut rng);
        let gn = move |g: &mut Graph<f64>, v: Var| {
            let ga = g.constant(gamma.clone())?;
            let be = g.constant(Tensor::full(vec![4], 0.3))?;
            let y = g.group_norm(v, ga, be, 2, 1e-5)?;
            let y = g.relu(y)?;
            let y2 = g.mul(y, y)?;
            g.mean(y2)
        };
        assert!(grad_check(gn, &gx, 1e-5, 1e-4, Coords::All).unwrap().passed);

        // batched matmul, permute and embedding lookups.
        let q2 = random(&[2, 3, 4], &mut rng);
        let k2 = random(&[2, 4, 3], &mut rng);
        let bmm = move |g: &mut Graph<f64>, v: Var| {
            let kv = g.constant(k2.clone())?;
            let s = g.batch_matmul(v, kv)?;
            let s = g.softmax(s, 2)?;
            let p = g.permute(s, &[2, 0, 1])?;
            let proj = g.constant(Tensor::from_fn(vec![3, 2, 3], |i| (i as f64).cos()))?;
            let z = g.mul(p, proj)?;
            g.sum(z)
        };
        assert!(grad_check(bmm, &q2, 1e-5, 1e-4, Coords::All).unwrap().passed);

        let table = random(&[4, 3], &mut rng);
        let emb = |g: &mut Graph<f64>, v: Var| {
            let e = g.embedding(v, &[2, 0, 2])?;
            let e2 = g.mul(e, e)?;
            g.sum(e2)
        };
        assert!(grad_check(emb, &table, 1e-5, 1e-4, Coords::All).unwrap().passed);
    }
}
