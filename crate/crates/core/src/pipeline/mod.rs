//! Warm-up, teacher training, teacher-progressive stages, data-progressive
//! iterations, and multi-teacher baselines.

mod baseline;
mod optim;
mod report;
mod run;
mod train;

use std::fmt;
use std::str::FromStr;

pub use baseline::{multi_teacher_baseline, multi_teacher_loss, MergeStrategy};
pub use optim::{scheduled_lr, AdamW, OptimizerConfig};
pub use report::{evaluate_student, EvalSummary, PipelineReport, ReportEntry, RECALL_CUTOFFS};
pub use run::{
    run_dpd, run_pipeline, run_tpd, train_teacher, warmup, DpdOutcome, PipelineOutcome, PreparedData, TpdOutcome,
    WarmupOutcome,
};
pub use train::{distill_stage, train_cross_listwise, train_dual_contrastive, FrozenSnapshot, TrainLog, Trainable};

use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::mining::{query_seed, ConfusionFilter, MiningConfig};

/// Independent random stream for a named pipeline component.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    query_seed(seed, label)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherKind {
    DualEncoder,
    CrossEncoder,
}

impl TeacherKind {
    pub fn name(self) -> &'static str {
        match self {
            TeacherKind::DualEncoder => "dual_encoder",
            TeacherKind::CrossEncoder => "cross_encoder",
        }
    }
}

impl fmt::Display for TeacherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TeacherKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual_encoder" | "de" => Ok(TeacherKind::DualEncoder),
            "cross_encoder" | "ce" => Ok(TeacherKind::CrossEncoder),
            other => Err(Error::Config(format!("unknown teacher kind {other:?}"))),
        }
    }
}

/// Shared encoder shape; every model of a run tokenizes identically.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSettings {
    pub hidden_dim: usize,
    pub vocab_size: u32,
    pub max_query_len: usize,
    pub max_passage_len: usize,
    pub student_layers: usize,
    pub share_towers: bool,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            hidden_dim: 16,
            vocab_size: 2048,
            max_query_len: 32,
            max_passage_len: 144,
            student_layers: 1,
            share_towers: true,
        }
    }
}

impl ModelSettings {
    pub fn encoder_config(&self, layers: usize, hidden_dim: usize, seed: u64) -> EncoderConfig {
        EncoderConfig {
            num_layers: layers,
            hidden_dim,
            vocab_size: self.vocab_size,
            max_query_len: self.max_query_len,
            max_passage_len: self.max_passage_len,
            seed,
            share_towers: self.share_towers,
        }
    }

    pub fn student_config(&self, seed: u64) -> EncoderConfig {
        self.encoder_config(self.student_layers, self.hidden_dim, seed)
    }
}

/// Step count, peak learning rate, batch size, and warmup share of one
/// optimization run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub warmup_ratio: f64,
}

impl TrainSettings {
    pub fn validate(&self, what: &str) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("{what}: learning rate must be positive")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{what}: batch size must be positive")));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!("{what}: warmup ratio must lie in [0, 1)")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarmupSpec {
    pub teacher_layers: usize,
    pub teacher_hidden_dim: usize,
    /// Random negatives per query in phase 1.
    pub random_negatives: usize,
    /// Mined negatives per query in phase 2.
    pub hard_negatives: usize,
    pub student: TrainSettings,
    pub teacher: TrainSettings,
    pub retrain: TrainSettings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSpec {
    pub teacher_kind: TeacherKind,
    pub teacher_layers: usize,
    pub teacher_hidden_dim: usize,
    pub negatives_per_query: usize,
    pub weights: LossWeights,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub use_in_batch: bool,
    pub use_regularization: bool,
    /// Training of this stage's teacher on the freshly mined groups.
    pub teacher_training: TrainSettings,
}

impl StageSpec {
    pub fn distill_settings(&self) -> TrainSettings {
        TrainSettings {
            steps: self.steps,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            warmup_ratio: self.warmup_ratio,
        }
    }

    pub fn validate(&self, label: &str) -> Result<()> {
        self.weights.validate()?;
        self.distill_settings().validate(label)?;
        self.teacher_training.validate(&format!("{label} teacher"))?;
        if self.teacher_layers == 0 || self.teacher_hidden_dim == 0 || self.negatives_per_query == 0 {
            return Err(Error::Config(format!(
                "{label}: teacher layers, teacher hidden size and negatives must be positive"
            )));
        }
        match self.teacher_kind {
            TeacherKind::DualEncoder => {
                if self.use_regularization || self.weights.gamma != 0.0 {
                    return Err(Error::Config(format!(
                        "{label}: dual-encoder stages have no regularization term (regularization off, gamma 0)"
                    )));
                }
            }
            TeacherKind::CrossEncoder => {
                if self.use_in_batch {
                    return Err(Error::Config(format!(
                        "{label}: cross-encoder stages use mined hard negatives only (in_batch off)"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpdSpec {
    pub iterations: usize,
    pub filter: ConfusionFilter,
    pub negatives_per_query: usize,
    pub weights: LossWeights,
    pub distill: TrainSettings,
    pub teacher_learning_rate: f64,
    pub teacher_epochs: usize,
    pub teacher_batch_size: usize,
}

impl DpdSpec {
    /// Upper bound of the student window.
    pub fn kprime(&self) -> usize {
        self.filter.student_window.hi
    }

    pub fn validate(&self) -> Result<()> {
        self.filter.validate()?;
        self.weights.validate()?;
        self.distill.validate("dpd")?;
        if !(self.teacher_learning_rate > 0.0) || self.teacher_batch_size == 0 || self.negatives_per_query == 0 {
            return Err(Error::Config(
                "dpd: teacher learning rate, teacher batch size and negatives must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub model: ModelSettings,
    pub optimizer: OptimizerConfig,
    pub warmup: WarmupSpec,
    pub stages: Vec<StageSpec>,
    pub dpd: DpdSpec,
    /// Retrieval depth, mining seed and answer filter; the per-query sample
    /// size comes from each stage.
    pub mining: MiningConfig,
    /// Retrieval depth of the dev evaluation.
    pub eval_depth: usize,
    /// Accepts stage orders that break the weak-to-strong progression.
    pub allow_any_order: bool,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.student_config().validate()?;
        self.optimizer.validate()?;
        self.mining.validate()?;
        self.dpd.validate()?;
        for (name, s) in [
            ("warmup student", self.warmup.student),
            ("warmup teacher", self.warmup.teacher),
            ("warmup retrain", self.warmup.retrain),
        ] {
            s.validate(name)?;
        }
        if self.warmup.teacher_layers == 0
            || self.warmup.teacher_hidden_dim == 0
            || self.warmup.random_negatives == 0
            || self.warmup.hard_negatives == 0
        {
            return Err(Error::Config(
                "warmup: layers, hidden size and negative counts must be positive".into(),
            ));
        }
        if self.warmup.hard_negatives > self.mining.depth_k {
            return Err(Error::Config("warmup: hard negatives exceed the mining depth".into()));
        }
        if self.eval_depth == 0 {
            return Err(Error::Config("eval depth must be positive".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            let label = format!("stage{}", i + 1);
            s.validate(&label)?;
            if s.negatives_per_query > self.mining.depth_k {
                return Err(Error::Config(format!(
                    "{label}: {} negatives exceed the mining depth {}",
                    s.negatives_per_query, self.mining.depth_k
                )));
            }
        }
        if self.dpd.negatives_per_query > self.mining.depth_k {
            return Err(Error::Config("dpd: negatives exceed the mining depth".into()));
        }
        if !self.allow_any_order {
            self.check_order()?;
        }
        if self.dpd.iterations > 0 && self.stages.last().map(|s| s.teacher_kind) != Some(TeacherKind::CrossEncoder) {
            return Err(Error::Config(
                "data-progressive iterations continue the last cross-encoder teacher; the final stage must be cross_encoder"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Dual-encoder stages precede cross-encoder stages, and teacher depth
    /// never decreases within a kind.
    fn check_order(&self) -> Result<()> {
        let mut seen_cross = false;
        let mut last_layers = [0usize; 2];
        for (i, s) in self.stages.iter().enumerate() {
            let k = match s.teacher_kind {
                TeacherKind::DualEncoder => {
                    if seen_cross {
                        return Err(Error::Config(format!(
                            "stage{}: a dual-encoder teacher after a cross-encoder teacher breaks the progressive order (set pipeline.allow_any_order to override)",
                            i + 1
                        )));
                    }
                    0
                }
                TeacherKind::CrossEncoder => {
                    seen_cross = true;
                    1
                }
            };
            if s.teacher_layers < last_layers[k] {
                return Err(Error::Config(format!(
                    "stage{}: {}-layer {} teacher after a {}-layer one breaks the progressive order (set pipeline.allow_any_order to override)",
                    i + 1,
                    s.teacher_layers,
                    s.teacher_kind,
                    last_layers[k]
                )));
            }
            last_layers[k] = s.teacher_layers;
        }
        Ok(())
    }

    pub fn student_config(&self) -> EncoderConfig {
        self.model.student_config(derive_seed(self.seed, "student"))
    }

    pub fn stage_mining(&self, negatives: usize, label: &str) -> MiningConfig {
        MiningConfig {
            sample_m: negatives,
            seed: derive_seed(self.mining.seed, label),
            ..self.mining
        }
    }
}

/// Stage `n` (1-based) of the default three-stage schedule: a dual-encoder
/// teacher, then a cross encoder, then a deeper cross encoder. Stages past
/// the third repeat the last one.
pub fn default_stage(n: usize) -> StageSpec {
    let teacher_training = TrainSettings {
        steps: 600,
        learning_rate: 5e-3,
        batch_size: 16,
        warmup_ratio: 0.1,
    };
    let base = StageSpec {
        teacher_kind: TeacherKind::CrossEncoder,
        teacher_layers: 2,
        teacher_hidden_dim: 32,
        negatives_per_query: 15,
        weights: LossWeights {
            alpha: 0.1,
            beta: 0.9,
            gamma: 0.5,
            tau: 4.0,
        },
        steps: 400,
        learning_rate: 3e-3,
        batch_size: 16,
        warmup_ratio: 0.1,
        use_in_batch: false,
        use_regularization: true,
        teacher_training,
    };
    match n {
        1 => StageSpec {
            teacher_kind: TeacherKind::DualEncoder,
            negatives_per_query: 1,
            weights: LossWeights {
                gamma: 0.0,
                ..base.weights
            },
            use_in_batch: true,
            use_regularization: false,
            ..base
        },
        2 => base,
        _ => StageSpec {
            teacher_layers: 3,
            ..base
        },
    }
}

impl Default for WarmupSpec {
    fn default() -> Self {
        let settings = TrainSettings {
            steps: 300,
            learning_rate: 5e-3,
            batch_size: 16,
            warmup_ratio: 0.1,
        };
        Self {
            teacher_layers: 2,
            teacher_hidden_dim: 32,
            random_negatives: 1,
            hard_negatives: 7,
            student: settings,
            teacher: settings,
            retrain: settings,
        }
    }
}

impl Default for DpdSpec {
    fn default() -> Self {
        Self {
            iterations: 1,
            filter: ConfusionFilter::default(),
            negatives_per_query: 15,
            weights: default_stage(2).weights,
            distill: TrainSettings {
                steps: 200,
                learning_rate: 1e-5,
                batch_size: 64,
                warmup_ratio: 0.1,
            },
            teacher_learning_rate: 1e-5,
            teacher_epochs: 2,
            teacher_batch_size: 64,
        }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            model: ModelSettings::default(),
            optimizer: OptimizerConfig::default(),
            warmup: WarmupSpec::default(),
            stages: (1..=3).map(default_stage).collect(),
            dpd: DpdSpec::default(),
            mining: MiningConfig {
                depth_k: 100,
                sample_m: 15,
                seed: 0,
                answer_filter: false,
            },
            eval_depth: 100,
            allow_any_order: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        PipelineConfig::default().validate().unwrap();
        assert_eq!(PipelineConfig::default().dpd.kprime(), 15);
    }

    #[test]
    fn larger_before_smaller_cross_encoder_rejected() {
        let mut c = PipelineConfig::default();
        c.stages[1].teacher_layers = 4;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.allow_any_order = true;
        c.validate().unwrap();
    }

    #[test]
    fn cross_then_dual_rejected_without_override() {
        let mut c = PipelineConfig::default();
        c.stages.swap(0, 1);
        c.dpd.iterations = 0;
        assert!(c.validate().is_err());
        c.allow_any_order = true;
        c.validate().unwrap();
    }

    #[test]
    fn stage_kind_rules() {
        let mut s = default_stage(1);
        s.weights.gamma = 0.3;
        assert!(s.validate("s").is_err());
        let mut s = default_stage(2);
        s.use_in_batch = true;
        assert!(s.validate("s").is_err());
    }

    #[test]
    fn dpd_needs_final_cross_stage() {
        let mut c = PipelineConfig::default();
        c.stages.truncate(1);
        assert!(c.validate().is_err());
        c.dpd.iterations = 0;
        c.validate().unwrap();
    }
}
