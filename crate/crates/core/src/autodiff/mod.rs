//! Dense tensors with eager reverse-mode differentiation.
//!
//! The operator set is deliberately small: `matmul`, `add`, `mul`, `relu`,
//! `segment_sum`, `l2_normalize`, `dot`, `exp`, `log`, `div_scalar` and
//! `concat`, plus the bookkeeping ops `transpose`, `gather_rows`,
//! `segment_mean`, `sum_all` and a fused `cross_entropy`. `segment_sum` is
//! the only aggregation primitive: neighbourhood sums and subgraph read-outs
//! are both expressed with it.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport, DEFAULT_STEP, SUSPECT_RELATIVE_ERROR};
pub use tape::{Gradients, Tape, Var, NORM_EPS};
pub use tensor::{Scalar, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn loss_f(t: &mut Tape<f64>, x: Var) -> Var {
        let y = t.mul(x, x).unwrap();
        t.sum_all(y)
    }

    fn loss_g(t: &mut Tape<f64>, x: Var) -> Var {
        let y = t.exp(x);
        let n = t.l2_normalize(y).unwrap();
        t.sum_all(n)
    }

    proptest! {
        #[test]
        fn backward_is_linear(
            xs in prop::collection::vec(-2.0f64..2.0, 4),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let x0 = Tensor::matrix(1, 4, xs);
            let grad = |f: &dyn Fn(&mut Tape<f64>, Var) -> Var| {
                let mut t = Tape::new();
                let x = t.param(x0.clone());
                let out = f(&mut t, x);
                t.backward(out).unwrap().get(x).clone()
            };
            let gf = grad(&loss_f);
            let gg = grad(&loss_g);
            let combined = grad(&|t: &mut Tape<f64>, x| {
                let f = loss_f(t, x);
                let g = loss_g(t, x);
                let ca = t.constant(Tensor::scalar(a));
                let cb = t.constant(Tensor::scalar(b));
                let fa = t.mul(f, ca).unwrap();
                let gb = t.mul(g, cb).unwrap();
                t.add(fa, gb).unwrap()
            });
            for i in 0..4 {
                let expect = a * gf.data()[i] + b * gg.data()[i];
                prop_assert!((combined.data()[i] - expect).abs() < 1e-6);
            }
        }

        #[test]
        fn forward_is_deterministic(xs in prop::collection::vec(-5.0f32..5.0, 6)) {
            let run = || {
                let mut t = Tape::<f32>::new();
                let x = t.constant(Tensor::matrix(2, 3, xs.clone()));
                let xt = t.transpose(x).unwrap();
                let m = t.matmul(x, xt).unwrap();
                let n = t.l2_normalize(m).unwrap();
                t.value(n).clone()
            };
            let (a, b) = (run(), run());
            prop_assert_eq!(
                a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
