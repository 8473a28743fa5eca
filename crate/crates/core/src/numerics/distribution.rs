use super::tape::{check_tau, kl_values, softmax_values};
use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking a logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

const SUM_TOLERANCE: f64 = 1e-9;

/// A probability vector over a finite candidate list.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Shape("distribution over an empty support".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::Parameter(format!("invalid probability {p}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Parameter(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![1.0 / n as f64; n])
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn support_size(&self) -> usize {
        self.probs.len()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn entropy(&self) -> f64 {
        -self.probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }

    /// Entrywise mean of several distributions, renormalized.
    pub fn mean(dists: &[Distribution]) -> Result<Self> {
        let first = dists
            .first()
            .ok_or_else(|| Error::Shape("mean of zero distributions".into()))?;
        let n = first.support_size();
        let mut acc = vec![0.0; n];
        for d in dists {
            if d.support_size() != n {
                return Err(Error::Shape(format!("support mismatch: {} vs {}", n, d.support_size())));
            }
            acc.iter_mut().zip(&d.probs).for_each(|(a, p)| *a += p);
        }
        let z: f64 = acc.iter().sum();
        Self::new(acc.into_iter().map(|a| a / z).collect())
    }
}

/// First index of the maximum; NaN-free input assumed.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `softmax(scores / tau)` on plain values.
pub fn softmax_temp(scores: &[f64], tau: f64) -> Result<Distribution> {
    check_tau(tau)?;
    if scores.is_empty() {
        return Err(Error::Shape("softmax of an empty score list".into()));
    }
    Distribution::new(softmax_values(scores, tau))
}

/// `KL(p ‖ q)` with `q` clamped below by [`LOG_CLAMP`].
pub fn kl_divergence(p: &Distribution, q: &Distribution) -> Result<f64> {
    if p.support_size() != q.support_size() {
        return Err(Error::Shape(format!(
            "KL support mismatch: {} vs {}",
            p.support_size(),
            q.support_size()
        )));
    }
    Ok(kl_values(&p.probs, &q.probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_scores_give_uniform_distribution() {
        for tau in [0.5, 1.0, 4.0] {
            let d = softmax_temp(&[2.5; 4], tau).unwrap();
            for p in d.probs() {
                assert!((p - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn analytic_two_point_softmax() {
        let d = softmax_temp(&[3f64.ln(), 0.0], 1.0).unwrap();
        assert!((d.probs()[0] - 0.75).abs() < 1e-15);
        assert!((d.probs()[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn nonpositive_temperature_is_rejected() {
        assert!(matches!(softmax_temp(&[1.0], 0.0), Err(Error::Parameter(_))));
        assert!(matches!(softmax_temp(&[1.0], -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn kl_examples() {
        let half = Distribution::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(kl_divergence(&half, &half).unwrap(), 0.0);
        let onehot = Distribution::new(vec![1.0, 0.0]).unwrap();
        let kl = kl_divergence(&onehot, &half).unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn kl_support_mismatch() {
        let a = Distribution::uniform(2).unwrap();
        let b = Distribution::uniform(3).unwrap();
        assert!(matches!(kl_divergence(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn mean_of_two() {
        let a = Distribution::new(vec![0.2, 0.8]).unwrap();
        let b = Distribution::new(vec![0.6, 0.4]).unwrap();
        let m = Distribution::mean(&[a, b]).unwrap();
        assert!((m.probs()[0] - 0.4).abs() < 1e-15);
        assert!((m.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn scores() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-20.0f64..20.0, 1..16)
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_keeps_argmax(s in scores(), tau in prop::sample::select(vec![0.5, 1.0, 4.0])) {
            let d = softmax_temp(&s, tau).unwrap();
            prop_assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert_eq!(d.argmax(), argmax(&s));
        }

        #[test]
        fn kl_is_nonnegative(a in prop::collection::vec(-5.0f64..5.0, 6), b in prop::collection::vec(-5.0f64..5.0, 6)) {
            let p = softmax_temp(&a, 1.0).unwrap();
            let q = softmax_temp(&b, 1.0).unwrap();
            prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-12);
            prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-10);
        }
    }
}
