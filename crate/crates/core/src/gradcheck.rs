//! Central finite-difference check of analytic gradients.

use crate::error::{Error, Result};
use crate::nn::{Gradients, Mlp};

/// Compares the analytic gradient returned by `objective` at `params` with
/// central differences of its loss, and returns the largest relative error
/// `|a - n| / max(|a|, |n|, 1e-12)` over all parameters.
pub fn grad_check<F>(params: &Mlp, objective: F, epsilon: f64) -> Result<f64>
where
    F: Fn(&Mlp) -> Result<(f64, Gradients)>,
{
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let (loss, grads) = objective(params)?;
    if !loss.is_finite() {
        return Err(Error::NumericFailure(format!("loss is {loss}")));
    }
    if !grads.matches(params) {
        return Err(Error::invalid("objective returned gradients of the wrong shape"));
    }
    let analytic = grads.flatten();
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let original = *probe.param_mut(i).expect("index within parameter count");
        *probe.param_mut(i).unwrap() = original + epsilon;
        let (plus, _) = objective(&probe)?;
        *probe.param_mut(i).unwrap() = original - epsilon;
        let (minus, _) = objective(&probe)?;
        *probe.param_mut(i).unwrap() = original;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NumericFailure(format!("loss not finite when perturbing parameter {i}")));
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let denom = a.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::nn::{mse_loss, Activation, DenseLayer, DropoutMask, LayerGradient};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_single_parameter() {
        // loss = (w - 3)^2 + b^2, gradient (2(w - 3), 2b)
        let net = Mlp::new(vec![DenseLayer::new(Matrix::row_vector(&[1.2]), vec![0.4], Activation::Identity).unwrap()]).unwrap();
        let objective = |n: &Mlp| {
            let w = n.layers()[0].weights().get(0, 0);
            let b = n.layers()[0].bias()[0];
            let g = Gradients {
                layers: vec![LayerGradient {
                    weights: Matrix::row_vector(&[2.0 * (w - 3.0)]),
                    bias: vec![2.0 * b],
                }],
            };
            Ok(((w - 3.0).powi(2) + b * b, g))
        };
        assert!(grad_check(&net, objective, 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn zero_network_is_finite() {
        let net = Mlp::zeros(3, &[4, 1], Activation::Relu, Activation::Identity).unwrap();
        let x = Matrix::from_rows(&[[1.0, -1.0, 0.5]]).unwrap();
        let y = Matrix::row_vector(&[2.0]);
        let err = grad_check(
            &net,
            |n| {
                let (out, cache) = n.forward(&x, None)?;
                let (loss, g) = mse_loss(&out, &y)?;
                Ok((loss, n.backward(&cache, &g)?.params))
            },
            1e-5,
        )
        .unwrap();
        assert!(err.is_finite());
    }

    #[test]
    fn masked_two_layer_relu_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = Mlp::xavier(4, &[5, 5, 1], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let x = Matrix::from_rows(&[[0.3, -0.7, 1.1, 0.2], [-1.0, 0.4, 0.9, -0.3], [0.8, 0.8, -0.6, 1.4]]).unwrap();
        let y = Matrix::from_rows(&[[1.0], [-0.5], [0.25]]).unwrap();
        let masks: Vec<_> = (0..3).map(|_| DropoutMask::sample(0.8, &[5, 5], &mut rng).unwrap()).collect();
        let err = grad_check(
            &net,
            |n| {
                let (out, cache) = n.forward(&x, Some(&masks))?;
                let (loss, g) = mse_loss(&out, &y)?;
                Ok((loss, n.backward(&cache, &g)?.params))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let net = Mlp::zeros(1, &[1], Activation::Identity, Activation::Identity).unwrap();
        let r = grad_check(&net, |n| Ok((f64::NAN, Gradients::zeros_like(n))), 1e-5);
        assert!(matches!(r, Err(Error::NumericFailure(_))));
        assert!(grad_check(&net, |n| Ok((0.0, Gradients::zeros_like(n))), 0.0).is_err());
    }
}
