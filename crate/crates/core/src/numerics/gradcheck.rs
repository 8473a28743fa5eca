//! Central finite-difference gradient verification.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Parameter(format!(
            "finite-difference step must lie in [1e-7, 1e-3], got {eps}"
        )));
    }
    Ok(())
}

/// Max over coordinates of `|analytic − numeric| / max(1, |analytic|, |numeric|)`
/// where `numeric` is the central difference of `eval` around `x`.
pub fn compare_with_finite_differences<F>(x: &[f64], analytic: &[f64], eps: f64, mut eval: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    check_eps(eps)?;
    if x.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "{} parameters but {} gradient entries",
            x.len(),
            analytic.len()
        )));
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = eval(&probe)?;
        probe[i] = x[i] - eps;
        let down = eval(&probe)?;
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * eps);
        let denom = 1.0f64.max(analytic[i].abs()).max(numeric.abs());
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Checks the tape gradient of a scalar function of one tensor.
pub fn gradient_check<F>(f: F, params: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_eps(eps)?;
    let mut tape = Tape::new();
    let x = tape.param(params);
    let out = f(&mut tape, x)?;
    tape.backward(out)?;
    let analytic = tape.grad_or_zero(x);
    let shape = params.shape().to_vec();
    compare_with_finite_differences(params.values(), &analytic, eps, |probe| {
        let t = Tensor::new(shape.clone(), probe.to_vec())?;
        let mut tape = Tape::new();
        let x = tape.constant(&t);
        let out = f(&mut tape, x)?;
        Ok(tape.scalar(out))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::distribution::softmax_temp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.5, 4.0]).unwrap();
        let err = gradient_check(|t, v| t.dot(v, v), &x, 1e-4).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let c = Tensor::scalar(7.0);
        let err = gradient_check(|t, _| Ok(t.constant(&c)), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn kl_of_softmax_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let p_scores: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let p = softmax_temp(&p_scores, 1.0).unwrap();
        let x = Tensor::vector(x).unwrap();
        let err = gradient_check(
            |t, v| {
                let q = t.softmax_temp(v, 1.0)?;
                t.kl_divergence(&p, q)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let x = Tensor::vector(vec![1.0]).unwrap();
        assert!(gradient_check(|t, v| Ok(t.sum(v)), &x, 1e-2).is_err());
    }
}
