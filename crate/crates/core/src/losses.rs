//! Hard, soft, and regularization losses and their stage combinations.
//!
//! Every loss works on a [`CandidateGroup`]: one query, its labeled
//! positive, and a negative pool. Candidates are always scored in the order
//! positive first, then negatives in pool order, so the hard label sits at
//! index 0. Teacher and frozen-copy distributions are computed without a
//! tape and enter the graph as constants.

use std::collections::HashSet;

use crate::encoders::{BoundDual, CrossEncoder, DualEncoder, Scorer, TokenSequence};
use crate::error::{Error, Result};
use crate::numerics::{softmax_temp, Distribution, Tape, Var};
use crate::retrieval::Qrels;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub id: String,
    pub tokens: TokenSequence,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateGroup {
    pub query_id: String,
    pub query: TokenSequence,
    pub positive: Candidate,
    pub negatives: Vec<Candidate>,
    pub in_batch_extension: bool,
}

impl CandidateGroup {
    /// Drops repeated negatives (by id); rejects an empty pool or one that
    /// contains the positive.
    pub fn new(
        query_id: impl Into<String>,
        query: TokenSequence,
        positive: Candidate,
        negatives: Vec<Candidate>,
    ) -> Result<Self> {
        let query_id = query_id.into();
        let mut seen = HashSet::new();
        let negatives: Vec<Candidate> = negatives.into_iter().filter(|c| seen.insert(c.id.clone())).collect();
        if negatives.is_empty() {
            return Err(Error::Contract(format!("query {query_id}: empty negative pool")));
        }
        if seen.contains(&positive.id) {
            return Err(Error::Contract(format!(
                "query {query_id}: positive {} listed among negatives",
                positive.id
            )));
        }
        Ok(Self {
            query_id,
            query,
            positive,
            negatives,
            in_batch_extension: false,
        })
    }

    /// Candidate token sequences, positive first.
    pub fn candidates(&self) -> Vec<&TokenSequence> {
        std::iter::once(&self.positive.tokens)
            .chain(self.negatives.iter().map(|c| &c.tokens))
            .collect()
    }

    pub fn candidate_ids(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.positive.id.as_str()).chain(self.negatives.iter().map(|c| c.id.as_str()))
    }

    pub fn pool_size(&self) -> usize {
        1 + self.negatives.len()
    }

    fn check(&self) -> Result<()> {
        if self.negatives.is_empty() {
            return Err(Error::Contract(format!("query {}: empty negative pool", self.query_id)));
        }
        Ok(())
    }
}

/// Appends the positives of the other groups in the batch to each group's
/// pool, skipping passages already in the pool and, when `qrels` is given,
/// passages judged relevant to the group's own query.
pub fn extend_in_batch(batch: &[CandidateGroup], qrels: Option<&Qrels>) -> Vec<CandidateGroup> {
    batch
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let mut out = g.clone();
            let mut seen: HashSet<String> = g.candidate_ids().map(str::to_string).collect();
            for (j, other) in batch.iter().enumerate() {
                if i == j || seen.contains(&other.positive.id) {
                    continue;
                }
                if qrels.is_some_and(|q| q.is_relevant(&g.query_id, &other.positive.id)) {
                    continue;
                }
                seen.insert(other.positive.id.clone());
                out.negatives.push(other.positive.clone());
            }
            out.in_batch_extension = true;
            out
        })
        .collect()
}

/// Relative weights of the loss terms and the distillation temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.9,
            gamma: 0.0,
            tau: 4.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {w}")));
            }
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            return Err(Error::Config("at least one of alpha and beta must be positive".into()));
        }
        Ok(())
    }
}

/// Student scores of the group's candidates as a vector node.
pub fn student_scores(tape: &mut Tape, student: &BoundDual, group: &CandidateGroup) -> Result<Var> {
    group.check()?;
    student.score_many(tape, &group.query, &group.candidates())
}

/// `−ln softmax(s)[positive]` over the candidate pool; no temperature.
pub fn hard_loss(tape: &mut Tape, student: &BoundDual, group: &CandidateGroup) -> Result<Var> {
    let scores = student_scores(tape, student, group)?;
    tape.cross_entropy(scores, 0)
}

/// Detached distribution of any scorer over the group's candidates.
pub fn soft_distribution<S: Scorer + ?Sized>(scorer: &S, group: &CandidateGroup, tau: f64) -> Result<Distribution> {
    group.check()?;
    let scores = scorer.score_candidates(&group.query, &group.candidates())?;
    softmax_temp(&scores, tau)
}

/// `KL(teacher ‖ student)` with the teacher side constant.
pub fn soft_loss(tape: &mut Tape, teacher: &Distribution, student: Var) -> Result<Var> {
    tape.kl_divergence(teacher, student)
}

/// `KL(d_{S′} ‖ d_S)` against a frozen snapshot of the student.
pub fn regularization_loss(
    tape: &mut Tape,
    frozen: &DualEncoder,
    student: &BoundDual,
    group: &CandidateGroup,
    tau: f64,
) -> Result<Var> {
    let frozen_dist = soft_distribution(frozen, group, tau)?;
    let scores = student_scores(tape, student, group)?;
    let dist = tape.softmax_temp(scores, tau)?;
    soft_loss(tape, &frozen_dist, dist)
}

/// The weighted loss and its components.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub hard: Var,
    pub soft: Var,
    pub regularization: Option<Var>,
}

/// Hard loss plus KL against pre-computed teacher (and frozen-copy)
/// distributions, sharing one scoring pass of the student.
pub fn distillation_loss(
    tape: &mut Tape,
    student: &BoundDual,
    group: &CandidateGroup,
    teacher: &Distribution,
    frozen: Option<&Distribution>,
    weights: &LossWeights,
) -> Result<LossTerms> {
    weights.validate()?;
    let scores = student_scores(tape, student, group)?;
    let hard = tape.cross_entropy(scores, 0)?;
    let dist = tape.softmax_temp(scores, weights.tau)?;
    let soft = soft_loss(tape, teacher, dist)?;
    let mut terms = vec![(hard, weights.alpha), (soft, weights.beta)];
    let regularization = match frozen {
        Some(f) => {
            let r = soft_loss(tape, f, dist)?;
            terms.push((r, weights.gamma));
            Some(r)
        }
        None => None,
    };
    let total = tape.weighted_sum(&terms)?;
    Ok(LossTerms {
        total,
        hard,
        soft,
        regularization,
    })
}

/// `α·L_h + β·KL(d_T ‖ d_S)` with a dual-encoder teacher.
pub fn stage1_loss(
    tape: &mut Tape,
    student: &BoundDual,
    de_teacher: &DualEncoder,
    group: &CandidateGroup,
    weights: &LossWeights,
) -> Result<LossTerms> {
    if weights.gamma != 0.0 {
        return Err(Error::Config(
            "dual-encoder distillation has no regularization term; gamma must be 0".into(),
        ));
    }
    let teacher = soft_distribution(de_teacher, group, weights.tau)?;
    distillation_loss(tape, student, group, &teacher, None, weights)
}

/// `α·L_h + β·KL(d_CE ‖ d_S) + γ·KL(d_{S′} ‖ d_S)` with a cross-encoder
/// teacher and a frozen student copy. Only mined hard negatives are allowed.
pub fn stage2_loss(
    tape: &mut Tape,
    student: &BoundDual,
    ce_teacher: &CrossEncoder,
    frozen: &DualEncoder,
    group: &CandidateGroup,
    weights: &LossWeights,
) -> Result<LossTerms> {
    if group.in_batch_extension {
        return Err(Error::Config(
            "cross-encoder distillation uses mined hard negatives only; in-batch extension is not allowed".into(),
        ));
    }
    let teacher = soft_distribution(ce_teacher, group, weights.tau)?;
    let frozen_dist = soft_distribution(frozen, group, weights.tau)?;
    distillation_loss(tape, student, group, &teacher, Some(&frozen_dist), weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{tokenize, EncoderConfig, Parameterized};
    use crate::numerics::{compare_with_finite_differences, kl_divergence};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const VOCAB: u32 = 64;

    fn config(layers: usize, seed: u64) -> EncoderConfig {
        EncoderConfig {
            num_layers: layers,
            hidden_dim: 6,
            vocab_size: VOCAB,
            max_query_len: 6,
            max_passage_len: 8,
            seed,
            share_towers: false,
        }
    }

    fn random_group(rng: &mut ChaCha8Rng, negatives: usize) -> CandidateGroup {
        let mut seq = |n: usize| {
            let words: Vec<String> = (0..n).map(|_| format!("w{}", rng.gen_range(0..200))).collect();
            tokenize(&words.join(" "), 8, VOCAB)
        };
        let query = seq(3);
        let positive = Candidate {
            id: "pos".into(),
            tokens: seq(5),
        };
        let negs = (0..negatives)
            .map(|i| Candidate {
                id: format!("neg{i}"),
                tokens: seq(4 + i % 3),
            })
            .collect();
        CandidateGroup::new("q", query, positive, negs).unwrap()
    }

    fn ln_softmax_oracle(scores: &[f64], i: usize) -> f64 {
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        scores[i] - z.ln()
    }

    #[test]
    fn uniform_scores_give_ln_pool_size() {
        let student = DualEncoder::zeros(config(1, 0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let group = random_group(&mut rng, 3);
        let mut tape = Tape::new();
        let b = student.bind(&mut tape, true);
        let l = hard_loss(&mut tape, &b, &group).unwrap();
        assert!((tape.scalar(l) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hard_loss_matches_direct_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for seed in 0..10 {
            let student = DualEncoder::new(config(2, seed)).unwrap();
            let group = random_group(&mut rng, 5);
            let scores = student.score_candidates(&group.query, &group.candidates()).unwrap();
            let mut tape = Tape::new();
            let b = student.bind(&mut tape, true);
            let l = hard_loss(&mut tape, &b, &group).unwrap();
            assert!((tape.scalar(l) + ln_softmax_oracle(&scores, 0)).abs() < 1e-12);
        }
    }

    #[test]
    fn group_construction_rules() {
        let t = tokenize("x", 4, VOCAB);
        let c = |id: &str| Candidate {
            id: id.into(),
            tokens: t.clone(),
        };
        assert!(CandidateGroup::new("q", t.clone(), c("p"), vec![]).is_err());
        assert!(CandidateGroup::new("q", t.clone(), c("p"), vec![c("p")]).is_err());
        let g = CandidateGroup::new("q", t.clone(), c("p"), vec![c("a"), c("a"), c("b")]).unwrap();
        assert_eq!(g.negatives.len(), 2);
    }

    #[test]
    fn in_batch_extension_skips_relevant_and_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut groups: Vec<CandidateGroup> = (0..3).map(|_| random_group(&mut rng, 2)).collect();
        for (i, g) in groups.iter_mut().enumerate() {
            g.query_id = format!("q{i}");
            g.positive.id = format!("pos{i}");
        }
        let mut qrels = Qrels::new();
        qrels.insert("q0", "pos1", 1);
        let ext = extend_in_batch(&groups, Some(&qrels));
        let ids0: Vec<&str> = ext[0].candidate_ids().collect();
        assert!(!ids0.contains(&"pos1"));
        assert!(ids0.contains(&"pos2"));
        assert_eq!(ext[1].pool_size(), groups[1].pool_size() + 2);
        assert!(ext.iter().all(|g| g.in_batch_extension));
    }

    #[test]
    fn soft_loss_examples() {
        let p = Distribution::new(vec![0.3, 0.7]).unwrap();
        let mut tape = Tape::new();
        let s = tape.constant(&crate::numerics::Tensor::vector(vec![0.3, 0.7]).unwrap());
        let l = soft_loss(&mut tape, &p, s).unwrap();
        assert!(tape.scalar(l).abs() < 1e-15);
        let onehot = Distribution::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let u = tape.constant(&crate::numerics::Tensor::vector(vec![0.25; 4]).unwrap());
        let l = soft_loss(&mut tape, &onehot, u).unwrap();
        assert!((tape.scalar(l) - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn soft_loss_moves_toward_teacher_mode() {
        let teacher = Distribution::new(vec![0.7, 0.2, 0.1]).unwrap();
        let far = Distribution::new(vec![0.2, 0.4, 0.4]).unwrap();
        let near = Distribution::new(vec![0.5, 0.3, 0.2]).unwrap();
        assert!(kl_divergence(&teacher, &near).unwrap() < kl_divergence(&teacher, &far).unwrap());
    }

    #[test]
    fn entropy_grows_with_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let s: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let cold = softmax_temp(&s, 1.0).unwrap().entropy();
            let warm = softmax_temp(&s, 4.0).unwrap().entropy();
            assert!(warm > cold);
        }
    }

    #[test]
    fn regularization_zero_for_identical_copy_and_detached() {
        let student = DualEncoder::new(config(2, 9)).unwrap();
        let frozen = student.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let group = random_group(&mut rng, 3);
        let mut tape = Tape::new();
        let b = student.bind(&mut tape, true);
        let f = frozen.bind(&mut tape, true);
        let r = regularization_loss(&mut tape, &frozen, &b, &group, 4.0).unwrap();
        assert!(tape.scalar(r).abs() < 1e-10);
        tape.backward(r).unwrap();
        for v in f.vars() {
            assert!(tape.grad_or_zero(v).iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn stage1_rejects_gamma() {
        let m = DualEncoder::new(config(1, 0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let group = random_group(&mut rng, 2);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, true);
        let w = LossWeights {
            gamma: 0.5,
            ..LossWeights::default()
        };
        assert!(matches!(
            stage1_loss(&mut tape, &b, &m, &group, &w),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn stage2_rejects_in_batch_groups() {
        let m = DualEncoder::new(config(1, 0)).unwrap();
        let ce = CrossEncoder::new(config(1, 1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut group = random_group(&mut rng, 2);
        group.in_batch_extension = true;
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, true);
        assert!(matches!(
            stage2_loss(&mut tape, &b, &ce, &m, &group, &LossWeights::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn stage2_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let student = DualEncoder::new(config(2, 21)).unwrap();
        let mut frozen = student.clone();
        frozen.passage_tower_mut().output.values_mut()[0] += 0.3;
        let ce = CrossEncoder::new(config(2, 22)).unwrap();
        let group = random_group(&mut rng, 3);
        let w = LossWeights {
            alpha: 0.1,
            beta: 0.9,
            gamma: 0.5,
            tau: 4.0,
        };
        let mut tape = Tape::new();
        let b = student.bind(&mut tape, true);
        let terms = stage2_loss(&mut tape, &b, &ce, &frozen, &group, &w).unwrap();
        tape.backward(terms.total).unwrap();
        let analytic: Vec<f64> = b.vars().into_iter().flat_map(|v| tape.grad_or_zero(v)).collect();
        let err = compare_with_finite_differences(&student.flat(), &analytic, 1e-5, |x| {
            let mut probe = student.clone();
            probe.set_flat(x)?;
            let mut t = Tape::new();
            let pb = probe.bind(&mut t, false);
            let terms = stage2_loss(&mut t, &pb, &ce, &frozen, &group, &w)?;
            Ok(t.scalar(terms.total))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
