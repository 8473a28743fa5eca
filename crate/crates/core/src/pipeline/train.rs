//! Optimization loops shared by warm-up, teacher training and distillation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::{scheduled_lr, AdamW, OptimizerConfig};
use super::{StageSpec, TeacherKind, TrainSettings};
use crate::encoders::{BoundCross, BoundDual, CrossEncoder, DualEncoder, Encoder, Parameterized};
use crate::error::{Error, Result};
use crate::losses::{distillation_loss, extend_in_batch, hard_loss, soft_distribution, CandidateGroup};
use crate::numerics::{Tape, Var};
use crate::retrieval::Qrels;

/// A model that can be recorded on a tape with trainable leaves.
pub trait Trainable: Parameterized {
    type Bound;
    fn bind_trainable(&self, tape: &mut Tape) -> Self::Bound;
    /// Leaves in [`Parameterized::params`] order.
    fn leaves(bound: &Self::Bound) -> Vec<Var>;
}

impl Trainable for DualEncoder {
    type Bound = BoundDual;

    fn bind_trainable(&self, tape: &mut Tape) -> BoundDual {
        self.bind(tape, true)
    }

    fn leaves(bound: &BoundDual) -> Vec<Var> {
        bound.vars()
    }
}

impl Trainable for CrossEncoder {
    type Bound = BoundCross;

    fn bind_trainable(&self, tape: &mut Tape) -> BoundCross {
        self.bind(tape, true)
    }

    fn leaves(bound: &BoundCross) -> Vec<Var> {
        bound.vars()
    }
}

/// Per-step loss values of one optimization run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    pub fn steps(&self) -> usize {
        self.losses.len()
    }

    /// Mean over the last tenth of the run (at least one step).
    pub fn final_loss(&self) -> Option<f64> {
        let n = self.losses.len();
        if n == 0 {
            return None;
        }
        let tail = (n / 10).max(1);
        Some(self.losses[n - tail..].iter().sum::<f64>() / tail as f64)
    }
}

/// Reshuffles the item order every epoch; the last batch of an epoch may be
/// short.
struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    next: usize,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            next: n,
        }
    }

    fn batch(&mut self, size: usize) -> Vec<usize> {
        if self.next >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.next = 0;
        }
        let end = (self.next + size).min(self.order.len());
        let out = self.order[self.next..end].to_vec();
        self.next = end;
        out
    }
}

/// Runs `settings.steps` updates; `batch_loss` builds the mean loss of a
/// batch of item indices on a fresh tape.
pub fn train_loop<M: Trainable>(
    model: &mut M,
    num_items: usize,
    settings: &TrainSettings,
    optimizer: &OptimizerConfig,
    seed: u64,
    label: &str,
    mut batch_loss: impl FnMut(&mut Tape, &M::Bound, &[usize]) -> Result<Var>,
) -> Result<TrainLog> {
    let mut log = TrainLog::default();
    if settings.steps == 0 {
        return Ok(log);
    }
    if num_items == 0 {
        return Err(Error::Input(format!("{label}: no training groups")));
    }
    settings.validate(label)?;
    let mut sampler = BatchSampler::new(num_items, seed);
    let mut opt = AdamW::new(*optimizer);
    for step in 0..settings.steps {
        let batch = sampler.batch(settings.batch_size);
        let mut tape = Tape::new();
        let bound = model.bind_trainable(&mut tape);
        let loss = batch_loss(&mut tape, &bound, &batch)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Divergence(format!("{label}: loss {value} at step {step}")));
        }
        tape.backward(loss)?;
        let grads: Vec<Vec<f64>> = M::leaves(&bound).into_iter().map(|v| tape.grad_or_zero(v)).collect();
        let lr = scheduled_lr(settings.learning_rate, step, settings.steps, settings.warmup_ratio);
        let mut params: Vec<_> = model.params_mut().into_iter().map(|(_, t)| t).collect();
        opt.step(&mut params, &grads, lr)?;
        log.losses.push(value);
        if (step + 1) % 100 == 0 || step + 1 == settings.steps {
            log::debug!("{label}: step {}/{} loss {value:.6}", step + 1, settings.steps);
        }
    }
    Ok(log)
}

fn mean_of(tape: &mut Tape, losses: &[Var]) -> Result<Var> {
    let w = 1.0 / losses.len() as f64;
    let terms: Vec<(Var, f64)> = losses.iter().map(|&l| (l, w)).collect();
    tape.weighted_sum(&terms)
}

fn batch_groups(
    groups: &[CandidateGroup],
    batch: &[usize],
    in_batch: bool,
    qrels: Option<&Qrels>,
) -> Vec<CandidateGroup> {
    let picked: Vec<CandidateGroup> = batch.iter().map(|&i| groups[i].clone()).collect();
    if in_batch {
        extend_in_batch(&picked, qrels)
    } else {
        picked
    }
}

/// Contrastive training of a dual encoder with the hard loss over each
/// group's pool, optionally extended with the other positives of the batch.
pub fn train_dual_contrastive(
    model: &mut DualEncoder,
    groups: &[CandidateGroup],
    settings: &TrainSettings,
    optimizer: &OptimizerConfig,
    in_batch: bool,
    qrels: Option<&Qrels>,
    seed: u64,
    label: &str,
) -> Result<TrainLog> {
    train_loop(
        model,
        groups.len(),
        settings,
        optimizer,
        seed,
        label,
        |tape, bound, batch| {
            let losses = batch_groups(groups, batch, in_batch, qrels)
                .iter()
                .map(|g| hard_loss(tape, bound, g))
                .collect::<Result<Vec<_>>>()?;
            mean_of(tape, &losses)
        },
    )
}

/// Listwise softmax cross-entropy training of a cross encoder: the positive
/// against the group's negatives.
pub fn train_cross_listwise(
    model: &mut CrossEncoder,
    groups: &[CandidateGroup],
    settings: &TrainSettings,
    optimizer: &OptimizerConfig,
    seed: u64,
    label: &str,
) -> Result<TrainLog> {
    train_loop(
        model,
        groups.len(),
        settings,
        optimizer,
        seed,
        label,
        |tape, bound, batch| {
            let losses = batch
                .iter()
                .map(|&i| {
                    let g = &groups[i];
                    let scores = bound.score_many(tape, &g.query, &g.candidates())?;
                    tape.cross_entropy(scores, 0)
                })
                .collect::<Result<Vec<_>>>()?;
            mean_of(tape, &losses)
        },
    )
}

/// An immutable copy of the student taken at a stage or iteration start.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenSnapshot {
    model: DualEncoder,
    taken_at: String,
    checksum: u64,
}

impl FrozenSnapshot {
    pub fn capture(student: &DualEncoder, taken_at: impl Into<String>) -> Self {
        Self {
            checksum: student.checksum(),
            model: student.clone(),
            taken_at: taken_at.into(),
        }
    }

    pub fn model(&self) -> &DualEncoder {
        &self.model
    }

    pub fn taken_at(&self) -> &str {
        &self.taken_at
    }

    pub fn checksum(&self) -> u64 {
        self.checksum
    }

    pub fn is_intact(&self) -> bool {
        self.model.checksum() == self.checksum
    }
}

/// Distills `teacher` into a copy of `student` with the stage loss:
/// hard loss plus KL against the teacher, plus KL against the frozen
/// snapshot when the stage regularizes.
pub fn distill_stage(
    student: &DualEncoder,
    teacher: &Encoder,
    groups: &[CandidateGroup],
    spec: &StageSpec,
    frozen: Option<&FrozenSnapshot>,
    optimizer: &OptimizerConfig,
    qrels: Option<&Qrels>,
    seed: u64,
    label: &str,
) -> Result<(DualEncoder, TrainLog)> {
    match (spec.use_regularization, frozen) {
        (true, None) => {
            return Err(Error::Config(format!(
                "{label}: regularization needs a frozen snapshot"
            )));
        }
        (false, Some(_)) => {
            return Err(Error::Config(format!(
                "{label}: frozen snapshot given to a stage without regularization"
            )));
        }
        _ => {}
    }
    let expected = match teacher {
        Encoder::Dual(_) => TeacherKind::DualEncoder,
        Encoder::Cross(_) => TeacherKind::CrossEncoder,
    };
    if expected != spec.teacher_kind {
        return Err(Error::Config(format!(
            "{label}: stage expects a {} teacher, got {}",
            spec.teacher_kind, expected
        )));
    }
    spec.validate(label)?;
    let mut out = student.clone();
    let weights = spec.weights;
    let log = train_loop(
        &mut out,
        groups.len(),
        &spec.distill_settings(),
        optimizer,
        seed,
        label,
        |tape, bound, batch| {
            let mut losses = Vec::with_capacity(batch.len());
            for g in batch_groups(groups, batch, spec.use_in_batch, qrels) {
                let t = soft_distribution(teacher, &g, weights.tau)?;
                let f = frozen
                    .map(|s| soft_distribution(s.model(), &g, weights.tau))
                    .transpose()?;
                losses.push(distillation_loss(tape, bound, &g, &t, f.as_ref(), &weights)?.total);
            }
            mean_of(tape, &losses)
        },
    )?;
    Ok((out, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{tokenize, EncoderConfig};
    use crate::losses::Candidate;
    use crate::pipeline::default_stage;

    fn toy_groups(n: usize) -> Vec<CandidateGroup> {
        (0..n)
            .map(|i| {
                let t = |s: &str| tokenize(s, 8, 64);
                CandidateGroup::new(
                    format!("q{i}"),
                    t(&format!("a{} b{}", i % 3, i)),
                    Candidate {
                        id: format!("p{i}"),
                        tokens: t(&format!("a{} c{}", i % 3, i)),
                    },
                    vec![Candidate {
                        id: format!("n{i}"),
                        tokens: t(&format!("a{} c{}", (i + 1) % 3, i + 7)),
                    }],
                )
                .unwrap()
            })
            .collect()
    }

    fn cfg(seed: u64) -> EncoderConfig {
        EncoderConfig {
            hidden_dim: 8,
            vocab_size: 64,
            seed,
            ..EncoderConfig::default()
        }
    }

    fn settings(steps: usize) -> TrainSettings {
        TrainSettings {
            steps,
            learning_rate: 1e-2,
            batch_size: 4,
            warmup_ratio: 0.1,
        }
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(10, 3);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.batch(4)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn contrastive_training_reduces_loss_and_is_deterministic() {
        let groups = toy_groups(12);
        let run = || {
            let mut m = DualEncoder::new(cfg(1)).unwrap();
            let log = train_dual_contrastive(
                &mut m,
                &groups,
                &settings(150),
                &OptimizerConfig::default(),
                true,
                None,
                5,
                "t",
            )
            .unwrap();
            (m, log)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert!(la.losses.iter().all(|l| l.is_finite()));
        assert!(la.final_loss().unwrap() < la.losses[0]);
    }

    #[test]
    fn cross_training_reduces_loss() {
        let groups = toy_groups(12);
        let mut m = CrossEncoder::new(cfg(2)).unwrap();
        let log = train_cross_listwise(&mut m, &groups, &settings(150), &OptimizerConfig::default(), 1, "ce").unwrap();
        assert!(log.final_loss().unwrap() < log.losses[0]);
    }

    #[test]
    fn zero_steps_leave_student_unchanged() {
        let groups = toy_groups(4);
        let student = DualEncoder::new(cfg(3)).unwrap();
        let teacher = Encoder::Dual(DualEncoder::new(cfg(4)).unwrap());
        let spec = StageSpec {
            steps: 0,
            ..default_stage(1)
        };
        let (out, log) = distill_stage(
            &student,
            &teacher,
            &groups,
            &spec,
            None,
            &OptimizerConfig::default(),
            None,
            0,
            "s",
        )
        .unwrap();
        assert_eq!(out, student);
        assert_eq!(log.steps(), 0);
    }

    #[test]
    fn teacher_and_snapshot_untouched() {
        let groups = toy_groups(6);
        let student = DualEncoder::new(cfg(5)).unwrap();
        let teacher = Encoder::Cross(CrossEncoder::new(cfg(6)).unwrap());
        let before = teacher.checksum();
        let frozen = FrozenSnapshot::capture(&student, "stage2");
        let spec = StageSpec {
            steps: 20,
            batch_size: 3,
            ..default_stage(2)
        };
        let (out, _) = distill_stage(
            &student,
            &teacher,
            &groups,
            &spec,
            Some(&frozen),
            &OptimizerConfig::default(),
            None,
            0,
            "s",
        )
        .unwrap();
        assert_ne!(out, student);
        assert_eq!(teacher.checksum(), before);
        assert!(frozen.is_intact());
    }

    #[test]
    fn missing_snapshot_is_config_error() {
        let groups = toy_groups(2);
        let student = DualEncoder::new(cfg(7)).unwrap();
        let teacher = Encoder::Cross(CrossEncoder::new(cfg(8)).unwrap());
        let err = distill_stage(
            &student,
            &teacher,
            &groups,
            &default_stage(2),
            None,
            &OptimizerConfig::default(),
            None,
            0,
            "s",
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
