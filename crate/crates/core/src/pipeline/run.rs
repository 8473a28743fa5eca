use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::report::{evaluate_student, PipelineReport, ReportEntry};
use super::train::{distill_stage, train_cross_listwise, train_dual_contrastive, FrozenSnapshot, TrainLog};
use super::{derive_seed, PipelineConfig, StageSpec, TeacherKind, TrainSettings};
use crate::data::{config::format_config, Answers, Dataset};
use crate::encoders::{checkpoint, CrossEncoder, DualEncoder, Encoder, TokenSequence};
use crate::error::{Error, Result};
use crate::losses::CandidateGroup;
use crate::mining::{
    anchor_positive, mine_hard_negatives, positive_ranks, random_negative_groups, select_confusing_queries,
    tokenize_queries, write_groups, ConfusionDataset, MiningConfig, SelectionCounters, TokenizedCorpus,
};
use crate::retrieval::Qrels;

/// A dataset tokenized for the run's encoder shape.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub corpus: TokenizedCorpus,
    pub train: Vec<(String, TokenSequence)>,
    pub dev: Vec<(String, TokenSequence)>,
    pub qrels: Qrels,
    pub answers: Answers,
}

impl PreparedData {
    pub fn new(dataset: &Dataset, config: &PipelineConfig) -> Result<Self> {
        let enc = config.student_config();
        let train = tokenize_queries(&dataset.train, &enc);
        if train.is_empty() {
            return Err(Error::Input("no training queries".into()));
        }
        let ids: Vec<&str> = train.iter().map(|(id, _)| id.as_str()).collect();
        dataset.qrels.check_training(&ids)?;
        Ok(Self {
            corpus: TokenizedCorpus::new(&dataset.corpus, &enc),
            dev: tokenize_queries(&dataset.dev, &enc),
            train,
            qrels: dataset.qrels.clone(),
            answers: dataset.answers.clone(),
        })
    }

    fn mine(&self, student: &DualEncoder, cfg: &MiningConfig) -> Result<crate::mining::MiningOutcome> {
        mine_hard_negatives(student, &self.corpus, &self.train, &self.qrels, &self.answers, cfg)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn save_pair(dir: Option<&Path>, student: &DualEncoder, teacher: &Encoder) -> Result<()> {
    if let Some(dir) = dir {
        create_dir(dir)?;
        checkpoint::save(&Encoder::Dual(student.clone()), &dir.join("student.ckpt"))?;
        checkpoint::save(teacher, &dir.join("teacher.ckpt"))?;
    }
    Ok(())
}

fn loss_field(log: &TrainLog) -> String {
    log.final_loss()
        .map_or_else(|| "none".to_string(), |l| format!("{l:.6}"))
}

/// Trains a fresh teacher of `kind` on mined groups: dual encoders with the
/// contrastive loss and in-batch negatives, cross encoders with listwise
/// softmax cross-entropy.
#[allow(clippy::too_many_arguments)]
pub fn train_teacher(
    kind: TeacherKind,
    layers: usize,
    hidden_dim: usize,
    groups: &[CandidateGroup],
    settings: &TrainSettings,
    config: &PipelineConfig,
    qrels: &Qrels,
    label: &str,
) -> Result<(Encoder, TrainLog)> {
    let enc = config
        .model
        .encoder_config(layers, hidden_dim, derive_seed(config.seed, &format!("{label}.init")));
    let seed = derive_seed(config.seed, &format!("{label}.train"));
    match kind {
        TeacherKind::DualEncoder => {
            let mut m = DualEncoder::new(enc)?;
            let log = train_dual_contrastive(
                &mut m,
                groups,
                settings,
                &config.optimizer,
                true,
                Some(qrels),
                seed,
                label,
            )?;
            Ok((Encoder::Dual(m), log))
        }
        TeacherKind::CrossEncoder => {
            let mut m = CrossEncoder::new(enc)?;
            let log = train_cross_listwise(&mut m, groups, settings, &config.optimizer, seed, label)?;
            Ok((Encoder::Cross(m), log))
        }
    }
}

#[derive(Debug, Clone)]
pub struct WarmupOutcome {
    pub teacher: DualEncoder,
    pub student: DualEncoder,
    pub student_log: TrainLog,
    pub teacher_log: TrainLog,
    pub retrain_log: TrainLog,
}

/// Phase 1 trains a dual-encoder teacher and the student on random
/// negatives with in-batch positives; phase 2 mines hard negatives with
/// the teacher and continues training it on them.
pub fn warmup(data: &PreparedData, config: &PipelineConfig) -> Result<WarmupOutcome> {
    let w = &config.warmup;
    let groups = random_negative_groups(
        &data.corpus,
        &data.train,
        &data.qrels,
        w.random_negatives,
        derive_seed(config.seed, "warmup.random"),
    )?;
    let mut student = DualEncoder::new(config.student_config())?;
    let mut teacher = DualEncoder::new(config.model.encoder_config(
        w.teacher_layers,
        w.teacher_hidden_dim,
        derive_seed(config.seed, "warmup.teacher.init"),
    ))?;
    let opt = &config.optimizer;
    let qrels = Some(&data.qrels);
    let student_log = train_dual_contrastive(
        &mut student,
        &groups,
        &w.student,
        opt,
        true,
        qrels,
        derive_seed(config.seed, "warmup.student.train"),
        "warmup student",
    )?;
    let teacher_log = train_dual_contrastive(
        &mut teacher,
        &groups,
        &w.teacher,
        opt,
        true,
        qrels,
        derive_seed(config.seed, "warmup.teacher.train"),
        "warmup teacher",
    )?;
    let mined = data.mine(&teacher, &config.stage_mining(w.hard_negatives, "warmup.mine"))?;
    let retrain_log = train_dual_contrastive(
        &mut teacher,
        &mined.groups,
        &w.retrain,
        opt,
        true,
        qrels,
        derive_seed(config.seed, "warmup.teacher.retrain"),
        "warmup teacher retrain",
    )?;
    Ok(WarmupOutcome {
        teacher,
        student,
        student_log,
        teacher_log,
        retrain_log,
    })
}

#[derive(Debug, Clone)]
pub struct TpdOutcome {
    pub student: DualEncoder,
    /// The teacher of each stage, in stage order.
    pub teachers: Vec<Encoder>,
    /// Student after each stage.
    pub students: Vec<DualEncoder>,
}

fn stage_teacher(
    i: usize,
    spec: &StageSpec,
    groups: &[CandidateGroup],
    warm_teacher: &DualEncoder,
    config: &PipelineConfig,
    data: &PreparedData,
) -> Result<(Encoder, Option<TrainLog>)> {
    let reuse = spec.teacher_kind == TeacherKind::DualEncoder
        && spec.teacher_layers == config.warmup.teacher_layers
        && spec.teacher_hidden_dim == config.warmup.teacher_hidden_dim;
    if reuse {
        return Ok((Encoder::Dual(warm_teacher.clone()), None));
    }
    let (t, log) = train_teacher(
        spec.teacher_kind,
        spec.teacher_layers,
        spec.teacher_hidden_dim,
        groups,
        &spec.teacher_training,
        config,
        &data.qrels,
        &format!("stage{i}.teacher"),
    )?;
    Ok((t, Some(log)))
}

/// Teacher-progressive distillation: per stage, re-mine negatives with the
/// current student, obtain the stage teacher, snapshot the student when the
/// stage regularizes, distill, and evaluate on dev.
pub fn run_tpd(
    config: &PipelineConfig,
    data: &PreparedData,
    warm: &WarmupOutcome,
    out: Option<&Path>,
    report: &mut PipelineReport,
) -> Result<TpdOutcome> {
    let mut student = warm.student.clone();
    let mut teachers = Vec::new();
    let mut students = Vec::new();
    for (idx, spec) in config.stages.iter().enumerate() {
        let i = idx + 1;
        let label = format!("stage{i}");
        let mined = data.mine(
            &student,
            &config.stage_mining(spec.negatives_per_query, &format!("{label}.mine")),
        )?;
        let (teacher, teacher_log) = stage_teacher(i, spec, &mined.groups, &warm.teacher, config, data)?;
        let teacher_sum = crate::encoders::Parameterized::checksum(&teacher);
        let frozen = spec
            .use_regularization
            .then(|| FrozenSnapshot::capture(&student, format!("{label} step 0")));
        let (next, log) = distill_stage(
            &student,
            &teacher,
            &mined.groups,
            spec,
            frozen.as_ref(),
            &config.optimizer,
            Some(&data.qrels),
            derive_seed(config.seed, &format!("{label}.distill")),
            &label,
        )?;
        debug_assert_eq!(teacher_sum, crate::encoders::Parameterized::checksum(&teacher));
        debug_assert!(frozen.as_ref().is_none_or(FrozenSnapshot::is_intact));
        student = next;
        let metrics = evaluate_student(&student, &data.corpus, &data.dev, &data.qrels, config.eval_depth)?;
        report.push(
            ReportEntry::new(&label)
                .field("teacher", format!("{}/{}", spec.teacher_kind, spec.teacher_layers))
                .field("groups", mined.groups.len())
                .field("dropped", mined.counters.queries - mined.counters.groups)
                .field(
                    "teacher_loss",
                    teacher_log.as_ref().map_or_else(|| "reused".into(), loss_field),
                )
                .field("steps", log.steps())
                .field("final_loss", loss_field(&log))
                .with_metrics(metrics),
        );
        if let Some(dir) = out {
            let dir = dir.join(&label);
            save_pair(Some(&dir), &student, &teacher)?;
            write_groups(&dir.join("groups.tsv"), &mined.groups)?;
        }
        teachers.push(teacher);
        students.push(student.clone());
    }
    Ok(TpdOutcome {
        student,
        teachers,
        students,
    })
}

#[derive(Debug, Clone)]
pub struct DpdOutcome {
    pub student: DualEncoder,
    pub teacher: CrossEncoder,
    pub datasets: Vec<ConfusionDataset>,
    pub counters: Vec<SelectionCounters>,
}

/// Data-progressive distillation: each iteration mines with the current
/// student, selects the queries the teacher ranks right and the student
/// nearly right, continues training the teacher on them, snapshots the
/// student, and distills on the selection. An empty selection ends the loop.
pub fn run_dpd(
    student: &DualEncoder,
    teacher: &CrossEncoder,
    config: &PipelineConfig,
    data: &PreparedData,
    out: Option<&Path>,
    report: &mut PipelineReport,
) -> Result<DpdOutcome> {
    let d = &config.dpd;
    let mut student = student.clone();
    let mut teacher = teacher.clone();
    let mut datasets = Vec::new();
    let mut all_counters = Vec::new();
    let depth = config.mining.depth_k.max(d.filter.student_window.hi);
    for it in 1..=d.iterations {
        let label = format!("dpd{it}");
        let mining = MiningConfig {
            depth_k: depth,
            ..config.stage_mining(d.negatives_per_query, &format!("{label}.mine"))
        };
        let mined = data.mine(&student, &mining)?;
        let records: Vec<(CandidateGroup, crate::mining::PositiveRanks)> = mined
            .groups
            .par_iter()
            .zip(mined.retrievals.par_iter())
            .map(|(g, r)| {
                let g = anchor_positive(g, r, &data.qrels, &data.corpus)?;
                let ranks = positive_ranks(&student, &teacher, &g, r, &data.corpus, &data.qrels)?;
                Ok((g, ranks))
            })
            .collect::<Result<_>>()?;
        let (selected, counters) = select_confusing_queries(records, &d.filter, it)?;
        let mut entry = ReportEntry::new(&label)
            .field("considered", counters.considered)
            .field("selected", counters.selected)
            .field("student_absent", counters.student_absent)
            .field("outside_student_window", counters.outside_student_window)
            .field("outside_teacher_window", counters.outside_teacher_window);
        if let Some(dir) = out {
            let dir = dir.join(&label);
            create_dir(&dir)?;
            write_groups(&dir.join("groups.tsv"), &selected.groups)?;
            let path = dir.join("selection.txt");
            fs::write(&path, counters.report_line(it, &d.filter) + "\n").map_err(|e| Error::io(&path, e))?;
        }
        all_counters.push(counters);
        if selected.groups.is_empty() {
            // The student is unchanged; its metrics keep the report complete.
            let metrics = evaluate_student(&student, &data.corpus, &data.dev, &data.qrels, config.eval_depth)?;
            report.push(entry.field("status", "empty_selection").with_metrics(metrics));
            datasets.push(selected);
            break;
        }
        let teacher_steps = (d.teacher_epochs * selected.groups.len()).div_ceil(d.teacher_batch_size);
        let teacher_settings = TrainSettings {
            steps: teacher_steps,
            learning_rate: d.teacher_learning_rate,
            batch_size: d.teacher_batch_size,
            warmup_ratio: d.distill.warmup_ratio,
        };
        let teacher_log = train_cross_listwise(
            &mut teacher,
            &selected.groups,
            &teacher_settings,
            &config.optimizer,
            derive_seed(config.seed, &format!("{label}.teacher")),
            &format!("{label} teacher"),
        )?;
        let frozen = FrozenSnapshot::capture(&student, format!("{label} step 0"));
        let spec = StageSpec {
            teacher_kind: TeacherKind::CrossEncoder,
            teacher_layers: teacher.config().num_layers,
            teacher_hidden_dim: teacher.config().hidden_dim,
            negatives_per_query: d.negatives_per_query,
            weights: d.weights,
            steps: d.distill.steps,
            learning_rate: d.distill.learning_rate,
            batch_size: d.distill.batch_size,
            warmup_ratio: d.distill.warmup_ratio,
            use_in_batch: false,
            use_regularization: true,
            teacher_training: teacher_settings,
        };
        let teacher_enc = Encoder::Cross(teacher.clone());
        let (next, log) = distill_stage(
            &student,
            &teacher_enc,
            &selected.groups,
            &spec,
            Some(&frozen),
            &config.optimizer,
            Some(&data.qrels),
            derive_seed(config.seed, &format!("{label}.distill")),
            &label,
        )?;
        student = next;
        let metrics = evaluate_student(&student, &data.corpus, &data.dev, &data.qrels, config.eval_depth)?;
        entry = entry
            .field("teacher_steps", teacher_log.steps())
            .field("teacher_loss", loss_field(&teacher_log))
            .field("steps", log.steps())
            .field("final_loss", loss_field(&log))
            .with_metrics(metrics);
        report.push(entry);
        save_pair(out.map(|o| o.join(&label)).as_deref(), &student, &teacher_enc)?;
        datasets.push(selected);
    }
    Ok(DpdOutcome {
        student,
        teacher,
        datasets,
        counters: all_counters,
    })
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub report: PipelineReport,
    pub warmup: WarmupOutcome,
    pub tpd: TpdOutcome,
    pub dpd: Option<DpdOutcome>,
}

impl PipelineOutcome {
    pub fn final_student(&self) -> &DualEncoder {
        self.dpd.as_ref().map_or(&self.tpd.student, |d| &d.student)
    }
}

/// Warm-up, every configured stage, then the data-progressive iterations.
/// With `out`, checkpoints, mined groups, the effective config and
/// `report.txt` are written below it.
pub fn run_pipeline(config: &PipelineConfig, dataset: &Dataset, out: Option<&Path>) -> Result<PipelineOutcome> {
    config.validate()?;
    let data = PreparedData::new(dataset, config)?;
    if let Some(dir) = out {
        create_dir(dir)?;
        let path = dir.join("effective.cfg");
        fs::write(&path, format_config(config)).map_err(|e| Error::io(&path, e))?;
    }
    let mut report = PipelineReport::default();
    let warm = warmup(&data, config)?;
    let teacher_metrics = evaluate_student(&warm.teacher, &data.corpus, &data.dev, &data.qrels, config.eval_depth)?;
    report.push(
        ReportEntry::new("warmup_teacher")
            .field("teacher", format!("dual_encoder/{}", config.warmup.teacher_layers))
            .field("steps", warm.teacher_log.steps() + warm.retrain_log.steps())
            .field("final_loss", loss_field(&warm.retrain_log))
            .with_metrics(teacher_metrics),
    );
    let student_metrics = evaluate_student(&warm.student, &data.corpus, &data.dev, &data.qrels, config.eval_depth)?;
    report.push(
        ReportEntry::new("warmup")
            .field("steps", warm.student_log.steps())
            .field("final_loss", loss_field(&warm.student_log))
            .with_metrics(student_metrics),
    );
    save_pair(
        out.map(|o| o.join("warmup")).as_deref(),
        &warm.student,
        &Encoder::Dual(warm.teacher.clone()),
    )?;
    let tpd = run_tpd(config, &data, &warm, out, &mut report)?;
    let dpd = if config.dpd.iterations > 0 {
        let Some(Encoder::Cross(ce)) = tpd.teachers.last() else {
            return Err(Error::Config(
                "data-progressive iterations need a final cross-encoder stage".into(),
            ));
        };
        Some(run_dpd(&tpd.student, ce, config, &data, out, &mut report)?)
    } else {
        None
    };
    if let Some(dir) = out {
        report.write(&dir.join("report.txt"))?;
    }
    Ok(PipelineOutcome {
        report,
        warmup: warm,
        tpd,
        dpd,
    })
}
