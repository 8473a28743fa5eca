//! Adam with decoupled weight decay and a warmup-then-linear-decay schedule.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("optimizer betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "optimizer eps must be positive and weight decay nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Learning rate at 0-based `step` of `total`: linear ramp over the first
/// `ceil(warmup_ratio * total)` steps, then linear decay toward zero.
pub fn scheduled_lr(peak: f64, step: usize, total: usize, warmup_ratio: f64) -> f64 {
    let warm = (warmup_ratio * total as f64).ceil() as usize;
    if step < warm {
        peak * (step + 1) as f64 / warm as f64
    } else {
        peak * (total - step) as f64 / (total - warm).max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    config: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: i32,
}

impl AdamW {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    /// One update of every parameter with its gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        self.steps += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.steps);
        let bc2 = 1.0 - c.beta2.powi(self.steps);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if g.len() != p.len() || self.first[k].len() != p.len() {
                return Err(Error::Shape(format!("gradient {k} does not match its parameter")));
            }
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for (i, x) in p.values_mut().iter_mut().enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                *x -= lr * (update + c.weight_decay * *x);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let lrs: Vec<f64> = (0..10).map(|s| scheduled_lr(1.0, s, 10, 0.2)).collect();
        assert_eq!(lrs[0], 0.5);
        assert_eq!(lrs[1], 1.0);
        assert_eq!(lrs[2], 1.0);
        assert!((lrs[9] - 0.125).abs() < 1e-15);
        assert!(lrs.windows(2).skip(1).all(|w| w[1] <= w[0]));
        assert_eq!(scheduled_lr(2.0, 0, 4, 0.0), 2.0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut t = Tensor::vector(vec![1.0, -2.0]).unwrap();
        let mut opt = AdamW::new(OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        });
        opt.step(&mut [&mut t], &[vec![3.0, -0.5]], 0.1).unwrap();
        assert!((t.values()[0] - 0.9).abs() < 1e-7);
        assert!((t.values()[1] + 1.9).abs() < 1e-7);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut t = Tensor::vector(vec![2.0]).unwrap();
        let mut opt = AdamW::new(OptimizerConfig {
            weight_decay: 0.5,
            ..OptimizerConfig::default()
        });
        opt.step(&mut [&mut t], &[vec![0.0]], 0.1).unwrap();
        assert!((t.values()[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut t = Tensor::vector(vec![5.0, -3.0]).unwrap();
        let mut opt = AdamW::new(OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        });
        for _ in 0..2000 {
            let g: Vec<f64> = t.values().iter().map(|x| 2.0 * x).collect();
            opt.step(&mut [&mut t], &[g], 0.05).unwrap();
        }
        assert!(t.values().iter().all(|x| x.abs() < 1e-2));
    }
}
