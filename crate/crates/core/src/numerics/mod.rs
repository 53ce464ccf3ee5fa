//! Dense `f64` tensors with reverse-mode automatic differentiation.

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use gradcheck::{central_difference, finite_diff_check};
pub use graph::{Graph, Reduction, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap());
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!(approx(v, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn cross_entropy_uniform_two_classes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let l = g.cross_entropy(x, &[0], Reduction::Mean).unwrap();
        assert!(approx(g.value(l).data()[0], std::f64::consts::LN_2, 1e-15));
    }

    #[test]
    fn matmul_against_hand_product() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
        let b = g.constant(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn shape_error_names_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[12.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![1, 4], vec![0.3, -1.2, 2.0, 0.1]).unwrap());
        let y = g.softmax(x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        for &v in g.grad(x).unwrap().data() {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn layer_norm_rows_are_centered() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 4], vec![1.0, 5.0, -3.0, 2.5, 100.0, 0.1, 7.0, -9.0]).unwrap());
        let gain = g.constant(Tensor::full(&[4], 1.0));
        let bias = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        for r in 0..2 {
            let mean: f64 = g.value(y).row(r).iter().sum::<f64>() / 4.0;
            assert!(mean.abs() <= 1e-10);
        }
    }

    #[test]
    fn overwrite_with_same_value_is_identity() {
        let mut g = Graph::new();
        let base = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let v = g.param(Tensor::scalar(3.0));
        let out = g.overwrite(base, v, &[(1, 0)]).unwrap();
        assert_eq!(g.value(out).data(), g.value(base).data());
    }
}
