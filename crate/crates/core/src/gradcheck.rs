//! Central finite differences, the independent oracle for [`crate::Graph::backward`].

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::pipeline::Model;
use crate::tensor::Tensor;

/// Floor for the denominator of [`relative_error`], so that gradients that
/// are zero on both routes compare as equal instead of dividing by zero.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h` of a
/// scalar function at every coordinate of `x`.
pub fn finite_diff_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::contract(format!("step size must be positive, got {h}")));
    }
    let mut probe = x.clone();
    probe.clear_grad();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation(format!(
                "non-finite function value while differencing coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// `|a - b| / max(|a|, |b|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Largest [`relative_error`] over paired coordinates.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    a.iter().zip(b).map(|(&p, &q)| relative_error(p, q)).fold(0.0, f64::max)
}

/// Largest relative error between the backward-pass gradient of the mean
/// batch loss and its finite-difference estimate, over every parameter.
pub fn model_gradient_error(model: &Model, batch: &[(&Sample, usize)], h: f64) -> Result<f64> {
    let (_, grads) = model.loss_and_grads(batch)?;
    let mut worst = 0.0f64;
    for (i, analytic) in grads.iter().enumerate() {
        let numeric = finite_diff_gradient(
            |p| {
                let mut probe = model.clone();
                probe.set_param(i, p.clone())?;
                probe.loss(batch)
            },
            &model.params()[i],
            h,
        )?;
        worst = worst.max(max_relative_error(analytic, numeric.data()));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_is_exact_up_to_round_off() {
        let x = Tensor::vector(vec![3.0]).unwrap();
        let g = finite_diff_gradient(|t| Ok(t.data()[0].powi(2)), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8, "{}", g.data()[0]);
    }

    #[test]
    fn relu_sum_is_locally_linear() {
        let x = Tensor::vector(vec![2.0]).unwrap();
        let g = finite_diff_gradient(|t| Ok(t.data().iter().map(|v| v.max(0.0)).sum()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        let x = Tensor::vector(vec![0.0]).unwrap();
        let err = finite_diff_gradient(|_| Ok(f64::NAN), &x, 1e-5).unwrap_err();
        assert!(matches!(err, Error::Evaluation(_)));
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::vector(vec![0.0]).unwrap();
        assert!(finite_diff_gradient(|_| Ok(0.0), &x, 0.0).is_err());
        assert!(finite_diff_gradient(|_| Ok(0.0), &x, -1.0).is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1e-12, 0.0) < 1e-5);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn model_gradients_match_differences() {
        use crate::aggregation::{Activation, AggregatorKind, FeatureSet};
        use crate::pipeline::ModelSpec;

        let spec = ModelSpec::set_classifier(
            2,
            vec![],
            AggregatorKind::San {
                outputs: 3,
                activation: Activation::Tanh,
            },
            vec![],
            2,
        );
        let model = Model::new(spec, 4).unwrap();
        let sample = Sample::Set(FeatureSet::from_rows(&[vec![0.3, -0.2], vec![1.1, 0.4]]).unwrap());
        let err = model_gradient_error(&model, &[(&sample, 1)], 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
