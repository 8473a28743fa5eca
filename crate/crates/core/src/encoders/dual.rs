use super::tokenize::TokenSequence;
use super::tower::{BoundTower, EncoderConfig, Parameterized, Tower};
use crate::error::Result;
use crate::numerics::kernels;
use crate::numerics::{Tape, Tensor, Var};

/// Two-tower retriever scoring `E_Q(q) · E_P(p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    config: EncoderConfig,
    query: Tower,
    /// `None` when the config shares one tower for both sides.
    passage: Option<Tower>,
}

impl DualEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let query = Tower::init(&config, 0);
        let passage = (!config.share_towers).then(|| Tower::init(&config, 1));
        Ok(Self { config, query, passage })
    }

    pub fn zeros(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let query = Tower::zeros(&config);
        let passage = (!config.share_towers).then(|| Tower::zeros(&config));
        Ok(Self { config, query, passage })
    }

    pub(crate) fn from_parts(config: EncoderConfig, query: Tower, passage: Option<Tower>) -> Self {
        Self { config, query, passage }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn query_tower(&self) -> &Tower {
        &self.query
    }

    pub fn passage_tower(&self) -> &Tower {
        self.passage.as_ref().unwrap_or(&self.query)
    }

    pub fn passage_tower_mut(&mut self) -> &mut Tower {
        match self.passage.as_mut() {
            Some(p) => p,
            None => &mut self.query,
        }
    }

    pub fn embed_query(&self, q: &TokenSequence) -> Result<Vec<f64>> {
        self.query.forward(q.ids())
    }

    pub fn embed_passage(&self, p: &TokenSequence) -> Result<Vec<f64>> {
        self.passage_tower().forward(p.ids())
    }

    pub fn score(&self, q: &TokenSequence, p: &TokenSequence) -> Result<f64> {
        Ok(kernels::dot(&self.embed_query(q)?, &self.embed_passage(p)?))
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundDual {
        BoundDual {
            query: self.query.bind(tape, trainable),
            passage: self.passage.as_ref().map(|p| p.bind(tape, trainable)),
        }
    }
}

impl Parameterized for DualEncoder {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.query.named_params("query");
        if let Some(p) = &self.passage {
            out.extend(p.named_params("passage"));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.query.named_params_mut("query");
        if let Some(p) = &mut self.passage {
            out.extend(p.named_params_mut("passage"));
        }
        out
    }
}

/// A [`DualEncoder`] recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundDual {
    query: BoundTower,
    passage: Option<BoundTower>,
}

impl BoundDual {
    pub fn encode_query(&self, tape: &mut Tape, q: &TokenSequence) -> Result<Var> {
        self.query.encode(tape, q.ids())
    }

    pub fn encode_passage(&self, tape: &mut Tape, p: &TokenSequence) -> Result<Var> {
        self.passage.as_ref().unwrap_or(&self.query).encode(tape, p.ids())
    }

    /// Scores every passage against one query, encoding the query once.
    pub fn score_many(&self, tape: &mut Tape, q: &TokenSequence, passages: &[&TokenSequence]) -> Result<Var> {
        let qv = self.encode_query(tape, q)?;
        let mut scores = Vec::with_capacity(passages.len());
        for p in passages {
            let pv = self.encode_passage(tape, p)?;
            scores.push(tape.dot(qv, pv)?);
        }
        tape.stack(&scores)
    }

    /// Leaves in the same order as [`Parameterized::params`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.query.vars();
        if let Some(p) = &self.passage {
            out.extend(p.vars());
        }
        out
    }
}

/// Differentiable dual-encoder score: inner product of the two tower outputs.
pub fn score_de(tape: &mut Tape, model: &BoundDual, q: &TokenSequence, p: &TokenSequence) -> Result<Var> {
    let qv = model.encode_query(tape, q)?;
    let pv = model.encode_passage(tape, p)?;
    tape.dot(qv, pv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::tokenize::tokenize;
    use crate::numerics::compare_with_finite_differences;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config(layers: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: layers,
            hidden_dim: 6,
            vocab_size: 40,
            max_query_len: 6,
            max_passage_len: 10,
            seed: 11,
            share_towers: false,
        }
    }

    #[test]
    fn zero_towers_score_zero() {
        let m = DualEncoder::zeros(small_config(2)).unwrap();
        let q = tokenize("what is rust", 6, 40);
        let p = tokenize("rust is a language", 10, 40);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, false);
        let s = score_de(&mut tape, &b, &q, &p).unwrap();
        assert_eq!(tape.scalar(s), 0.0);
    }

    #[test]
    fn score_is_dot_of_embeddings() {
        let m = DualEncoder::new(small_config(2)).unwrap();
        let q = tokenize("alpha beta", 6, 40);
        let p = tokenize("beta gamma delta", 10, 40);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, true);
        let s = score_de(&mut tape, &b, &q, &p).unwrap();
        let qe = m.embed_query(&q).unwrap();
        let pe = m.embed_passage(&p).unwrap();
        let oracle: f64 = qe.iter().zip(&pe).map(|(a, b)| a * b).sum();
        assert!((tape.scalar(s) - oracle).abs() < 1e-12);
        assert_eq!(tape.scalar(s), m.score(&q, &p).unwrap());
    }

    #[test]
    fn scaling_passage_output_scales_score() {
        let mut m = DualEncoder::new(small_config(1)).unwrap();
        let q = tokenize("one two", 6, 40);
        let p = tokenize("three four", 10, 40);
        let before = m.score(&q, &p).unwrap();
        m.passage_tower_mut()
            .output
            .values_mut()
            .iter_mut()
            .for_each(|w| *w *= 2.5);
        let after = m.score(&q, &p).unwrap();
        assert!((after - 2.5 * before).abs() < 1e-12);
    }

    #[test]
    fn shared_towers_halve_parameters() {
        let sep = DualEncoder::new(small_config(1)).unwrap();
        let shared = DualEncoder::new(EncoderConfig {
            share_towers: true,
            ..small_config(1)
        })
        .unwrap();
        assert_eq!(2 * shared.num_params(), sep.num_params());
    }

    #[test]
    fn depth_orders_parameter_count() {
        let counts: Vec<usize> = (1..5)
            .map(|l| DualEncoder::new(small_config(l)).unwrap().num_params())
            .collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn score_gradient_matches_finite_differences() {
        let m = DualEncoder::new(small_config(2)).unwrap();
        let q = tokenize("a b c", 6, 40);
        let p = tokenize("c d e f", 10, 40);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, true);
        let s = score_de(&mut tape, &b, &q, &p).unwrap();
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
    fn fuzzed_outputs_stay_finite() {
        let m = DualEncoder::new(EncoderConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let n = rng.gen_range(1..40);
            let ids: Vec<u32> = (0..n).map(|_| rng.gen_range(0..4096)).collect();
            let e = m.query_tower().forward(&ids).unwrap();
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(norm.is_finite() && norm < 1e6);
        }
    }

    #[test]
    fn out_of_vocabulary_ids_are_rejected() {
        let m = DualEncoder::new(small_config(1)).unwrap();
        assert!(m.query_tower().forward(&[40]).is_err());
    }
}
