//! Multi-teacher distillation baselines that use all teachers at once
//! instead of one after another.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::optim::OptimizerConfig;
use super::train::{train_loop, TrainLog};
use super::{derive_seed, TrainSettings};
use crate::encoders::{BoundDual, DualEncoder, Encoder};
use crate::error::{Error, Result};
use crate::losses::{soft_distribution, soft_loss, student_scores, CandidateGroup, LossTerms, LossWeights};
use crate::numerics::{Distribution, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeStrategy {
    /// One uniformly chosen teacher supplies the soft loss of each batch.
    RandomBatch,
    /// Teacher distributions are averaged before the KL.
    MergeScore,
    /// Per-teacher KL terms are added, each weighted `1 / #teachers`.
    MergeLoss,
}

impl MergeStrategy {
    pub fn name(self) -> &'static str {
        match self {
            MergeStrategy::RandomBatch => "random_batch",
            MergeStrategy::MergeScore => "merge_score",
            MergeStrategy::MergeLoss => "merge_loss",
        }
    }
}

impl fmt::Display for MergeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MergeStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_batch" => Ok(MergeStrategy::RandomBatch),
            "merge_score" => Ok(MergeStrategy::MergeScore),
            "merge_loss" => Ok(MergeStrategy::MergeLoss),
            other => Err(Error::Config(format!("unknown merge strategy {other:?}"))),
        }
    }
}

/// `α·L_h + β·soft` where the soft term combines `teachers` per `strategy`.
/// `chosen` is the teacher index used by [`MergeStrategy::RandomBatch`].
pub fn multi_teacher_loss(
    tape: &mut Tape,
    student: &BoundDual,
    teachers: &[Distribution],
    group: &CandidateGroup,
    weights: &LossWeights,
    strategy: MergeStrategy,
    chosen: usize,
) -> Result<LossTerms> {
    if teachers.is_empty() {
        return Err(Error::Config(
            "multi-teacher distillation needs at least one teacher".into(),
        ));
    }
    weights.validate()?;
    let scores = student_scores(tape, student, group)?;
    let hard = tape.cross_entropy(scores, 0)?;
    let dist = tape.softmax_temp(scores, weights.tau)?;
    let soft = match strategy {
        MergeStrategy::RandomBatch => {
            let t = teachers
                .get(chosen)
                .ok_or_else(|| Error::Parameter(format!("teacher index {chosen} out of range")))?;
            soft_loss(tape, t, dist)?
        }
        MergeStrategy::MergeScore => soft_loss(tape, &Distribution::mean(teachers)?, dist)?,
        MergeStrategy::MergeLoss => {
            let w = 1.0 / teachers.len() as f64;
            let mut terms = Vec::with_capacity(teachers.len());
            for t in teachers {
                terms.push((soft_loss(tape, t, dist)?, w));
            }
            tape.weighted_sum(&terms)?
        }
    };
    let total = tape.weighted_sum(&[(hard, weights.alpha), (soft, weights.beta)])?;
    Ok(LossTerms {
        total,
        hard,
        soft,
        regularization: None,
    })
}

/// Trains a copy of `student` against all `teachers` at once.
pub fn multi_teacher_baseline(
    strategy: MergeStrategy,
    teachers: &[Encoder],
    student: &DualEncoder,
    groups: &[CandidateGroup],
    weights: &LossWeights,
    settings: &TrainSettings,
    optimizer: &OptimizerConfig,
    seed: u64,
) -> Result<(DualEncoder, TrainLog)> {
    if teachers.len() < 2 {
        return Err(Error::Config(format!(
            "multi-teacher baselines need at least two teachers, got {}",
            teachers.len()
        )));
    }
    let mut pick = ChaCha8Rng::seed_from_u64(derive_seed(seed, "baseline.teacher"));
    let mut out = student.clone();
    let label = format!("baseline {strategy}");
    let log = train_loop(
        &mut out,
        groups.len(),
        settings,
        optimizer,
        seed,
        &label,
        |tape, bound, batch| {
            let chosen = pick.gen_range(0..teachers.len());
            let w = 1.0 / batch.len() as f64;
            let mut terms = Vec::with_capacity(batch.len());
            for &i in batch {
                let g = &groups[i];
                let dists = teachers
                    .iter()
                    .map(|t| soft_distribution(t, g, weights.tau))
                    .collect::<Result<Vec<_>>>()?;
                terms.push((
                    multi_teacher_loss(tape, bound, &dists, g, weights, strategy, chosen)?.total,
                    w,
                ));
            }
            tape.weighted_sum(&terms)
        },
    )?;
    Ok((out, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{tokenize, CrossEncoder, EncoderConfig};
    use crate::losses::Candidate;

    fn group() -> CandidateGroup {
        let t = |s: &str| tokenize(s, 8, 64);
        CandidateGroup::new(
            "q",
            t("a b"),
            Candidate {
                id: "p".into(),
                tokens: t("a c"),
            },
            vec![
                Candidate {
                    id: "n1".into(),
                    tokens: t("d e"),
                },
                Candidate {
                    id: "n2".into(),
                    tokens: t("b f"),
                },
            ],
        )
        .unwrap()
    }

    fn cfg(seed: u64) -> EncoderConfig {
        EncoderConfig {
            hidden_dim: 6,
            vocab_size: 64,
            seed,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in [
            MergeStrategy::RandomBatch,
            MergeStrategy::MergeScore,
            MergeStrategy::MergeLoss,
        ] {
            assert_eq!(s.name().parse::<MergeStrategy>().unwrap(), s);
        }
    }

    #[test]
    fn single_teacher_rejected() {
        let student = DualEncoder::new(cfg(0)).unwrap();
        let t = vec![Encoder::Cross(CrossEncoder::new(cfg(1)).unwrap())];
        let settings = TrainSettings {
            steps: 1,
            learning_rate: 1e-3,
            batch_size: 1,
            warmup_ratio: 0.0,
        };
        let err = multi_teacher_baseline(
            MergeStrategy::MergeScore,
            &t,
            &student,
            &[group()],
            &LossWeights::default(),
            &settings,
            &OptimizerConfig::default(),
            0,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn baseline_training_changes_student_only() {
        let student = DualEncoder::new(cfg(0)).unwrap();
        let teachers = vec![
            Encoder::Cross(CrossEncoder::new(cfg(1)).unwrap()),
            Encoder::Dual(DualEncoder::new(cfg(2)).unwrap()),
        ];
        let sums: Vec<u64> = teachers
            .iter()
            .map(|t| crate::encoders::Parameterized::checksum(t))
            .collect();
        let settings = TrainSettings {
            steps: 5,
            learning_rate: 1e-2,
            batch_size: 1,
            warmup_ratio: 0.0,
        };
        for s in [
            MergeStrategy::RandomBatch,
            MergeStrategy::MergeScore,
            MergeStrategy::MergeLoss,
        ] {
            let (out, log) = multi_teacher_baseline(
                s,
                &teachers,
                &student,
                &[group()],
                &LossWeights::default(),
                &settings,
                &OptimizerConfig::default(),
                9,
            )
            .unwrap();
            assert_ne!(out, student);
            assert_eq!(log.steps(), 5);
        }
        let after: Vec<u64> = teachers
            .iter()
            .map(|t| crate::encoders::Parameterized::checksum(t))
            .collect();
        assert_eq!(sums, after);
    }
}
