//! Dense 64-bit tensors and a dynamic reverse-mode graph.

pub mod gradcheck;
mod graph;
pub mod nn;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
#[allow(unused_imports)]
pub(crate) use graph::{matmul_slices, softmax_in_place};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded generator used for weight init and every other stochastic step.
pub type Rng64 = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::gradcheck::check_inputs;
    use super::*;
    use crate::error::Error;
    use rand::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(rng: &mut Rng64, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn tensor_rejects_bad_construction() {
        assert!(matches!(Tensor::new([2, 2], vec![1.0; 3]), Err(Error::Dimension(_))));
        assert!(matches!(Tensor::new([1], vec![f64::NAN]), Err(Error::Argument(_))));
        assert!(matches!(Tensor::new([1], vec![f64::INFINITY]), Err(Error::Argument(_))));
    }

    #[test]
    fn matmul_identity_and_hand_example() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::eye(2));
        let x = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 1], &[1., 1.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_brute_force_dot_products() {
        let mut rng = rng_from_seed(3);
        for _ in 0..20 {
            let (m, k, n) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6));
            let a = random(&mut rng, &[m, k]);
            let b = random(&mut rng, &[k, n]);
            let mut g = Graph::new();
            let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
            let c = g.matmul(va, vb).unwrap();
            for i in 0..m {
                for j in 0..n {
                    let dot: f64 = (0..k).map(|p| a.get(&[i, p]) * b.get(&[p, j])).sum();
                    assert!((g.value(c).get(&[i, j]) - dot).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("dimension"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(t(&[2], &[1000.0, 0.0]));
        let y = g.softmax(x).unwrap();
        assert!(g.value(y).is_finite());
        assert!((g.value(y).data()[0] - 1.0).abs() < 1e-15);
        assert!(g.value(y).data()[1] < 1e-300);

        let x = g.constant(t(&[2], &[1f64.ln(), 3f64.ln()]));
        let y = g.softmax(x).unwrap();
        assert!((g.value(y).data()[0] - 0.25).abs() < 1e-15);
        assert!((g.value(y).data()[1] - 0.75).abs() < 1e-15);

        let e = g.constant(Tensor::zeros([3, 0]));
        assert!(matches!(g.softmax(e), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_rows_are_probability_vectors() {
        let mut rng = rng_from_seed(11);
        for _ in 0..100 {
            let x = random(&mut rng, &[4, 7]);
            let mut g = Graph::new();
            let v = g.constant(x);
            let y = g.softmax(v).unwrap();
            for r in 0..4 {
                let row = g.value(y).row(r);
                assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let one = g.constant(Tensor::full([3], 1.0));
        let zero = g.constant(Tensor::zeros([3]));
        let x = g.constant(t(&[1, 3], &[4.0, 4.0, 4.0]));
        let y = g.layer_norm(x, one, zero, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

        let one = g.constant(Tensor::full([2], 1.0));
        let zero = g.constant(Tensor::zeros([2]));
        let x = g.constant(t(&[1, 2], &[1.0, -1.0]));
        let y = g.layer_norm(x, one, zero, 1e-12).unwrap();
        assert!((g.value(y).data()[0] - 1.0).abs() < 1e-9);
        assert!((g.value(y).data()[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.var(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
        assert!(g.is_empty(), "graph is cleared after backward");

        let mut g = Graph::new();
        let x = g.var(t(&[4], &[0.3, -1.0, 2.0, 0.5]));
        let s = g.softmax(x).unwrap();
        let l = g.sum(s);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn backward_usage_errors() {
        let mut g = Graph::new();
        let x = g.var(Tensor::zeros([2]));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(1.0));
        assert!(matches!(g.backward(c), Err(Error::Usage(_))));
    }

    #[test]
    fn gradients_accumulate_over_shared_uses() {
        let mut g = Graph::new();
        let x = g.var(t(&[2], &[1.0, 2.0]));
        let a = g.scale(x, 3.0);
        let b = g.add(a, x).unwrap();
        let l = g.sum(b);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn param_binding_is_shared() {
        let mut rng = rng_from_seed(0);
        let mut store = ParamStore::new();
        let id = store.add_uniform("w", [2], 2, ParamGroup::Backbone, &mut rng);
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let p = g.mul(a, b).unwrap();
        let l = g.sum(p);
        let grads = g.backward(l).unwrap();
        let w = store.value(id).data();
        let gw = grads.param(id).unwrap().data();
        assert!((gw[0] - 2.0 * w[0]).abs() < 1e-15);
    }

    #[test]
    fn two_forward_passes_are_bit_identical() {
        let run = || {
            let mut rng = rng_from_seed(42);
            let mut store = ParamStore::new();
            let lin = nn::Linear::new(&mut store, "l", 5, 4, true, ParamGroup::Backbone, &mut rng);
            let x = random(&mut rng, &[3, 5]);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let y = lin.forward(&mut g, &store, xv).unwrap();
            let s = g.softmax(y).unwrap();
            g.value(s).clone()
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn checkpoint_round_trip_and_truncation() {
        let mut rng = rng_from_seed(1);
        let mut store = ParamStore::new();
        store.add_uniform("a.weight", [3, 2], 3, ParamGroup::Backbone, &mut rng);
        store.add_uniform("b", [4], 4, ParamGroup::Decoder, &mut rng);
        let bytes = store.to_bytes();
        assert_eq!(ParamStore::from_bytes(&bytes).unwrap(), store);
        let err = ParamStore::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    // Per-op finite-difference checks: 100 random trials each, inputs in [-2, 2].

    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    fn fd_trials(shapes: &[&[usize]], f: impl Fn(&mut Graph, &[Var]) -> crate::Result<Var> + Copy) {
        let mut rng = rng_from_seed(0xfd);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s)).collect();
            let r = check_inputs(&inputs, H, f).unwrap();
            worst = worst.max(r.max_rel_err);
        }
        assert!(worst < TOL, "max relative error {worst}");
    }

    // Weights the output so the loss is not a symmetric function.
    fn weighted_sum(g: &mut Graph, y: Var) -> crate::Result<Var> {
        let n = g.value(y).numel();
        let w = Tensor::new(
            g.shape(y).to_vec(),
            (0..n).map(|i| 0.3 + (i as f64 * 0.77).sin()).collect(),
        )?;
        let w = g.constant(w);
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    }

    #[test]
    fn fd_matmul() {
        fd_trials(&[&[3, 4], &[4, 2]], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y)
        });
    }

    #[test]
    fn fd_matmul_sum_wrt_lhs() {
        let mut rng = rng_from_seed(5);
        let a = random(&mut rng, &[3, 3]);
        let b = random(&mut rng, &[3, 2]);
        let r = check_inputs(&[a, b], H, |g, v| {
            let y = g.matmul(v[0], v[1])?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn fd_elementwise() {
        fd_trials(&[&[2, 3], &[2, 3]], |g, v| {
            let a = g.add(v[0], v[1])?;
            let b = g.sub(a, v[1])?;
            let c = g.mul(b, v[1])?;
            let d = g.scale(c, -1.5);
            weighted_sum(g, d)
        });
    }

    #[test]
    fn fd_add_row_and_sigmoid() {
        fd_trials(&[&[3, 4], &[4]], |g, v| {
            let a = g.add_row(v[0], v[1])?;
            let s = g.sigmoid(a);
            weighted_sum(g, s)
        });
    }

    #[test]
    fn fd_relu() {
        fd_trials(&[&[4, 3]], |g, v| {
            let r = g.relu(v[0]);
            weighted_sum(g, r)
        });
    }

    #[test]
    fn fd_softmax() {
        fd_trials(&[&[3, 5]], |g, v| {
            let s = g.softmax(v[0])?;
            weighted_sum(g, s)
        });
    }

    #[test]
    fn fd_layer_norm() {
        fd_trials(&[&[3, 5], &[5], &[5]], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(g, y)
        });
    }

    #[test]
    fn fd_transpose_concat_slice_reshape() {
        fd_trials(&[&[2, 3], &[2, 2]], |g, v| {
            let t = g.transpose(v[0])?;
            let t = g.reshape(t, [2, 3])?;
            let c = g.concat(&[t, v[1]])?;
            let s = g.slice_cols(c, 1, 3)?;
            weighted_sum(g, s)
        });
    }

    #[test]
    fn fd_gather_mix_take() {
        fd_trials(&[&[4, 3]], |g, v| {
            let a = g.gather_rows(v[0], &[2, 0, 2, 3])?;
            let b = g.row_mix(v[0], vec![vec![(0, 0.25), (3, 0.75)], vec![(1, 1.0)], vec![], vec![(2, 2.0)]])?;
            let c = g.add(a, b)?;
            let d = g.take(c, &[0, 5, 7, 11, 5], [5])?;
            weighted_sum(g, d)
        });
    }

    #[test]
    fn fd_segment_pools() {
        fd_trials(&[&[6, 3]], |g, v| {
            let segs = vec![vec![0, 1, 2], vec![3], vec![4, 5, 0]];
            let m = g.segment_max(v[0], &segs)?;
            let a = g.segment_mean(v[0], &segs)?;
            let gm = g.group_max(v[0], 2)?;
            let s = g.add(m, a)?;
            let w1 = weighted_sum(g, s)?;
            let w2 = weighted_sum(g, gm)?;
            g.add(w1, w2)
        });
    }

    #[test]
    fn fd_mean() {
        fd_trials(&[&[3, 3]], |g, v| {
            let s = g.sigmoid(v[0]);
            Ok(g.mean(s))
        });
    }

    #[test]
    fn fd_focal_loss() {
        fd_trials(&[&[7]], |g, v| g.focal_loss(v[0], &[1., 0., 0., 1., 1., 0., 1.], 0.25, 2.0));
    }

    #[test]
    fn fd_smooth_l1() {
        fd_trials(&[&[6]], |g, v| g.smooth_l1(v[0], &[0.1, -0.5, 1.0, 2.0, -1.5, 0.0], 1.0));
    }

    #[test]
    fn fd_cross_entropy() {
        fd_trials(&[&[3, 4]], |g, v| g.cross_entropy(v[0], &[1, 3, 0]));
    }
}
