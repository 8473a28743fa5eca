use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tokenize::TokenSequence;
use super::tower::{BoundTower, EncoderConfig, Parameterized, Tower};
use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::{Tape, Tensor, Var};

/// Joint encoder over `[q ; SEP ; p]` with a linear projection to a score.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossEncoder {
    config: EncoderConfig,
    joint: Tower,
    projection: Tensor,
}

impl CrossEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let joint = Tower::init(&config, 2);
        let d = config.hidden_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(3);
        let scale = 1.0 / (d as f64).sqrt();
        let w = (0..d).map(|_| rng.gen_range(-scale..scale)).collect();
        Ok(Self {
            config,
            joint,
            projection: Tensor::vector(w)?,
        })
    }

    pub(crate) fn from_parts(config: EncoderConfig, joint: Tower, projection: Tensor) -> Result<Self> {
        if projection.len() != config.hidden_dim {
            return Err(Error::Shape(format!(
                "projection of length {} for hidden size {}",
                projection.len(),
                config.hidden_dim
            )));
        }
        Ok(Self {
            config,
            joint,
            projection,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn joint_tower(&self) -> &Tower {
        &self.joint
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }

    pub fn projection_mut(&mut self) -> &mut Tensor {
        &mut self.projection
    }

    pub fn joint_input(&self, q: &TokenSequence, p: &TokenSequence) -> TokenSequence {
        TokenSequence::joint(q, p, self.config.max_joint_len())
    }

    pub fn score(&self, q: &TokenSequence, p: &TokenSequence) -> Result<f64> {
        let h = self.joint.forward(self.joint_input(q, p).ids())?;
        Ok(kernels::dot(self.projection.values(), &h))
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundCross {
        let joint = self.joint.bind(tape, trainable);
        let projection = if trainable {
            tape.param(&self.projection)
        } else {
            tape.constant(&self.projection)
        };
        BoundCross {
            joint,
            projection,
            max_len: self.config.max_joint_len(),
        }
    }
}

impl Parameterized for CrossEncoder {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.joint.named_params("joint");
        out.push(("projection".to_string(), &self.projection));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.joint.named_params_mut("joint");
        out.push(("projection".to_string(), &mut self.projection));
        out
    }
}

/// A [`CrossEncoder`] recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundCross {
    joint: BoundTower,
    projection: Var,
    max_len: usize,
}

impl BoundCross {
    pub fn score(&self, tape: &mut Tape, q: &TokenSequence, p: &TokenSequence) -> Result<Var> {
        let input = TokenSequence::joint(q, p, self.max_len);
        let h = self.joint.encode(tape, input.ids())?;
        tape.dot(self.projection, h)
    }

    pub fn score_many(&self, tape: &mut Tape, q: &TokenSequence, passages: &[&TokenSequence]) -> Result<Var> {
        let mut scores = Vec::with_capacity(passages.len());
        for p in passages {
            scores.push(self.score(tape, q, p)?);
        }
        tape.stack(&scores)
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.joint.vars();
        out.push(self.projection);
        out
    }
}

/// Differentiable cross-encoder score `w · E_ce([q ; SEP ; p])`.
pub fn score_ce(tape: &mut Tape, model: &BoundCross, q: &TokenSequence, p: &TokenSequence) -> Result<Var> {
    model.score(tape, q, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::tokenize::tokenize;
    use crate::numerics::compare_with_finite_differences;

    fn config() -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            hidden_dim: 5,
            vocab_size: 30,
            max_query_len: 4,
            max_passage_len: 6,
            seed: 3,
            share_towers: false,
        }
    }

    #[test]
    fn zero_projection_scores_zero() {
        let mut m = CrossEncoder::new(config()).unwrap();
        m.projection_mut().values_mut().fill(0.0);
        for (q, p) in [("a b", "c d"), ("x", "y z w"), ("", "")] {
            let s = m.score(&tokenize(q, 4, 30), &tokenize(p, 6, 30)).unwrap();
            assert_eq!(s, 0.0);
        }
    }

    #[test]
    fn deterministic_and_tape_equal() {
        let m = CrossEncoder::new(config()).unwrap();
        let q = tokenize("how many legs", 4, 30);
        let p = tokenize("spiders have eight legs", 6, 30);
        let a = m.score(&q, &p).unwrap();
        assert_eq!(a, m.score(&q, &p).unwrap());
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, false);
        let s = score_ce(&mut tape, &b, &q, &p).unwrap();
        assert_eq!(tape.scalar(s), a);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = CrossEncoder::new(config()).unwrap();
        let q = tokenize("q r", 4, 30);
        let p = tokenize("r s t", 6, 30);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, true);
        let s = score_ce(&mut tape, &b, &q, &p).unwrap();
        tape.backward(s).unwrap();
        let analytic: Vec<f64> = b.vars().into_iter().flat_map(|v| tape.grad_or_zero(v)).collect();
        let err = compare_with_finite_differences(&m.flat(), &analytic, 1e-5, |x| {
            let mut probe = m.clone();
            probe.set_flat(x)?;
            probe.score(&q, &p)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn query_and_passage_interact() {
        // The context term must make the score non-additive in (q, p).
        let m = CrossEncoder::new(config()).unwrap();
        let t = |s: &str| tokenize(s, 6, 30);
        let (q1, q2, p1, p2) = (t("a"), t("b"), t("c"), t("d"));
        let s = |q: &TokenSequence, p: &TokenSequence| m.score(q, p).unwrap();
        let interaction = s(&q1, &p1) - s(&q1, &p2) - s(&q2, &p1) + s(&q2, &p2);
        assert!(interaction.abs() > 1e-9);
    }
}
