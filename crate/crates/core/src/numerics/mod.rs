//! Differentiable matrix layer: tensors, a reverse-mode tape, and the
//! finite-difference gradient checker.

pub mod gradcheck;
pub mod params;
pub mod primitive_checks;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_difference_grad, relative_error};
pub use params::{Init, ParamBuilder, ParamId, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

/// Single-head attention on standalone tensors (`T × D` each).
pub fn attention<F: Scalar>(q: &Tensor<F>, k: &Tensor<F>, v: &Tensor<F>, causal: bool) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant_tensor(q), tape.constant_tensor(k), tape.constant_tensor(v));
    let out = tape.attention(qv, kv, vv, 1, causal)?;
    Ok(tape.tensor(out))
}

/// Layer normalization of every row of `x` followed by `gain ⊙ · + bias`.
pub fn layer_norm<F: Scalar>(x: &Tensor<F>, gain: &Tensor<F>, bias: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
    let d = x.cols();
    if d == 0 {
        return Err(Error::EmptyDimension { op: "layer_norm" });
    }
    if !(eps > F::zero()) {
        return Err(Error::Validation("layer_norm eps must be positive".into()));
    }
    if gain.len() != d || bias.len() != d {
        return Err(Error::dim("layer_norm", d, format!("gain {} / bias {}", gain.len(), bias.len())));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.rows(), d, x.data().to_vec())?;
    let g = tape.constant(1, d, gain.data().to_vec())?;
    let b = tape.constant(1, d, bias.data().to_vec())?;
    let y = tape.layer_norm(xv, Some(g), Some(b), eps)?;
    Tensor::new(x.shape().to_vec(), tape.tensor(y).into_data())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn attention_single_row_returns_v() {
        let q = t(1, 3, &[0.4, -1.0, 2.0]);
        let k = t(1, 3, &[1.0, 0.5, -0.3]);
        let v = t(1, 3, &[7.0, -2.0, 0.25]);
        let out = attention(&q, &k, &v, false).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn attention_zero_logits_average_v() {
        let z = Tensor::<f64>::zeros(vec![3, 2]);
        let v = t(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 9.0]);
        let out = attention(&z, &z, &v, false).unwrap();
        for row in 0..3 {
            assert!((out.row(row)[0] - 3.0).abs() < 1e-12);
            assert!((out.row(row)[1] - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_scalar_two_by_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut r = || (0..4).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (qd, kd, vd) = (r(), r(), r());
        let out = attention(&t(2, 2, &qd), &t(2, 2, &kd), &t(2, 2, &vd), false).unwrap();
        let s = 1.0 / 2f64.sqrt();
        for i in 0..2 {
            let l0 = s * (qd[i * 2] * kd[0] + qd[i * 2 + 1] * kd[1]);
            let l1 = s * (qd[i * 2] * kd[2] + qd[i * 2 + 1] * kd[3]);
            let w0 = l0.exp() / (l0.exp() + l1.exp());
            let w1 = 1.0 - w0;
            for c in 0..2 {
                let expect = w0 * vd[c] + w1 * vd[2 + c];
                assert!((out.row(i)[c] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_causal_first_row_sees_only_itself() {
        let q = t(2, 1, &[1.0, 1.0]);
        let v = t(2, 1, &[3.0, 5.0]);
        let out = attention(&q, &q, &v, true).unwrap();
        assert_eq!(out.row(0)[0], 3.0);
        assert!((out.row(1)[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn attention_rejects_mismatched_width() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![2, 4]);
        assert!(matches!(attention(&a, &b, &b, false), Err(Error::Dimension { .. })));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = t(1, 4, &[2.5; 4]);
        let y = layer_norm(&x, &t(1, 4, &[1.0; 4]), &t(1, 4, &[0.0; 4]), 1e-5).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn layer_norm_unit_row_is_unchanged() {
        let x = t(1, 2, &[1.0, -1.0]);
        let y = layer_norm(&x, &t(1, 2, &[1.0, 1.0]), &t(1, 2, &[0.0, 0.0]), 1e-12).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-9 && (y.data()[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let g: Vec<f64> = (0..4).map(|_| rng.random_range(0.5..1.5)).collect();
        let b: Vec<f64> = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
        let eps = 1e-5;
        let y = layer_norm(&t(1, 4, &x), &t(1, 4, &g), &t(1, 4, &b), eps).unwrap();
        let mean = x.iter().sum::<f64>() / 4.0;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        for i in 0..4 {
            let expect = (x[i] - mean) / (var + eps).sqrt() * g[i] + b[i];
            assert!((y.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_rejects_empty_dim() {
        let x = Tensor::<f64>::zeros(vec![2, 0]);
        let e = Tensor::<f64>::zeros(vec![0]);
        assert!(matches!(layer_norm(&x, &e, &e, 1e-5), Err(Error::EmptyDimension { .. })));
    }
}
