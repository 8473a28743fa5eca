//! Command-line front end. [`dispatch`] returns the process exit code:
//! 0 on success, 1 on usage errors, 2 on data or configuration errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::config::{format_config, load_config};
use crate::data::{generate_synthetic, Dataset, Split, SyntheticSpec};
use crate::encoders::{checkpoint, DualEncoder, Encoder};
use crate::error::{Error, Result};
use crate::mining::{load_groups, retrieve_all, tokenize_queries, write_groups};
use crate::pipeline::{
    derive_seed, distill_stage, evaluate_student, multi_teacher_baseline, run_dpd, run_pipeline, train_teacher, warmup,
    FrozenSnapshot, MergeStrategy, PipelineConfig, PipelineReport, PreparedData, ReportEntry,
};
use crate::retrieval::{evaluate, load_qrels, load_run, write_run, Metric};

#[derive(Debug, Parser)]
#[command(
    name = "prod",
    about = "Progressive distillation for dense retrieval",
    arg_required_else_help = true
)]
struct Cli {
    /// Worker threads for encoding and search (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides every seed in the config or spec
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// error, warn, info, debug or trace
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Pipeline config file; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory with corpus.tsv, queries.*.tsv and qrels.txt
    #[arg(long)]
    data: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a clustered synthetic dataset
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        clusters: usize,
        #[arg(long, default_value_t = 250)]
        passages_per_cluster: usize,
        #[arg(long, default_value_t = 25)]
        queries_per_cluster: usize,
        #[arg(long, default_value_t = 40)]
        vocab_per_cluster: usize,
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        #[arg(long, default_value_t = 12)]
        passage_len: usize,
        #[arg(long, default_value_t = 6)]
        query_len: usize,
    },
    /// Train the warm-up teacher and student
    Warmup {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mine groups with a student and train a fresh teacher on them
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        student: PathBuf,
        /// Stage whose teacher kind, depth and training settings to use
        #[arg(long, default_value_t = 2)]
        stage: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mine hard negatives with a student and write the groups file
    Mine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        student: PathBuf,
        #[arg(long, default_value_t = 15)]
        negatives: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one distillation stage
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stage: usize,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        /// Groups file; mined with the student when omitted
        #[arg(long)]
        groups: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the data-progressive iterations
    Dpd {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run warm-up, every stage and the data-progressive iterations
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a run file, or retrieve with a model and score that
    Evaluate {
        #[arg(long, conflicts_with = "model")]
        run: Option<PathBuf>,
        #[arg(long)]
        qrels: Option<PathBuf>,
        #[arg(long, default_value = "mrr@10")]
        metric: String,
        #[arg(long, requires = "data")]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "dev")]
        split: String,
        #[arg(long, default_value_t = 100)]
        depth: usize,
        /// Also write the retrieved run here (model mode)
        #[arg(long)]
        run_out: Option<PathBuf>,
    },
    /// Print the effective config with every default filled in
    Config {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Distill from several teachers at once
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        strategy: String,
        #[arg(long)]
        student: PathBuf,
        /// Comma-separated teacher checkpoints
        #[arg(long, value_delimiter = ',')]
        teachers: Vec<PathBuf>,
        /// Stage whose weights, negatives and settings to use
        #[arg(long, default_value_t = 2)]
        stage: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (program name first), runs the command, and maps the
/// outcome to an exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .try_init();
    if let Some(n) = cli.threads {
        // A global pool can only be installed once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn config_for(common: &Common, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => load_config(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.mining.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_student(path: &Path) -> Result<DualEncoder> {
    match checkpoint::load(path)? {
        Encoder::Dual(m) => Ok(m),
        Encoder::Cross(_) => Err(Error::Input(format!(
            "{}: expected a dual-encoder checkpoint",
            path.display()
        ))),
    }
}

fn stage_spec(cfg: &PipelineConfig, stage: usize) -> Result<&crate::pipeline::StageSpec> {
    stage
        .checked_sub(1)
        .and_then(|i| cfg.stages.get(i))
        .ok_or_else(|| Error::Config(format!("stage {stage} is not configured ({} stages)", cfg.stages.len())))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenSynthetic {
            out,
            clusters,
            passages_per_cluster,
            queries_per_cluster,
            vocab_per_cluster,
            noise,
            passage_len,
            query_len,
        } => {
            let spec = SyntheticSpec {
                num_clusters: *clusters,
                passages_per_cluster: *passages_per_cluster,
                queries_per_cluster: *queries_per_cluster,
                vocab_tokens_per_cluster: *vocab_per_cluster,
                noise_token_rate: *noise,
                seed: cli.seed.unwrap_or(SyntheticSpec::default().seed),
                passage_len: *passage_len,
                query_len: *query_len,
                ..SyntheticSpec::default()
            };
            let d = generate_synthetic(&spec)?;
            d.write_dir(out)?;
            println!(
                "passages={} train={} dev={} test={}",
                d.corpus.len(),
                d.train.len(),
                d.dev.len(),
                d.test.len()
            );
        }
        Command::Warmup { common, out } => {
            let cfg = config_for(common, cli.seed)?;
            let data = PreparedData::new(&Dataset::load_dir(&common.data)?, &cfg)?;
            let w = warmup(&data, &cfg)?;
            ensure_dir(out)?;
            checkpoint::save(&Encoder::Dual(w.student.clone()), &out.join("student.ckpt"))?;
            checkpoint::save(&Encoder::Dual(w.teacher.clone()), &out.join("teacher.ckpt"))?;
            let m = evaluate_student(&w.student, &data.corpus, &data.dev, &data.qrels, cfg.eval_depth)?;
            let line = ReportEntry::new("warmup")
                .field("steps", w.student_log.steps())
                .with_metrics(m);
            write_text(&out.join("report.txt"), &format!("{line}\n"))?;
            println!("{line}");
        }
        Command::TrainTeacher {
            common,
            student,
            stage,
            out,
        } => {
            let cfg = config_for(common, cli.seed)?;
            let spec = stage_spec(&cfg, *stage)?;
            let data = PreparedData::new(&Dataset::load_dir(&common.data)?, &cfg)?;
            let s = load_student(student)?;
            let label = format!("stage{stage}");
            let mined = crate::mining::mine_hard_negatives(
                &s,
                &data.corpus,
                &data.train,
                &data.qrels,
                &data.answers,
                &cfg.stage_mining(spec.negatives_per_query, &format!("{label}.mine")),
            )?;
            let (teacher, log) = train_teacher(
                spec.teacher_kind,
                spec.teacher_layers,
                spec.teacher_hidden_dim,
                &mined.groups,
                &spec.teacher_training,
                &cfg,
                &data.qrels,
                &format!("{label}.teacher"),
            )?;
            checkpoint::save(&teacher, out)?;
            println!(
                "teacher={}/{} groups={} steps={} final_loss={:.6}",
                spec.teacher_kind,
                spec.teacher_layers,
                mined.groups.len(),
                log.steps(),
                log.final_loss().unwrap_or(f64::NAN)
            );
        }
        Command::Mine {
            common,
            student,
            negatives,
            out,
        } => {
            let cfg = config_for(common, cli.seed)?;
            let data = PreparedData::new(&Dataset::load_dir(&common.data)?, &cfg)?;
            let s = load_student(student)?;
            let m = crate::mining::mine_hard_negatives(
                &s,
                &data.corpus,
                &data.train,
                &data.qrels,
                &data.answers,
                &cfg.stage_mining(*negatives, "mine"),
            )?;
            write_groups(out, &m.groups)?;
            let c = m.counters;
            println!(
                "queries={} groups={} without_positive={} without_negatives={} answer_filtered={}",
                c.queries, c.groups, c.without_positive, c.without_negatives, c.answer_filtered
            );
        }
        Command::Distill {
            common,
            stage,
            student,
            teacher,
            groups,
            out,
        } => {
            let cfg = config_for(common, cli.seed)?;
            let spec = stage_spec(&cfg, *stage)?;
            let data = PreparedData::new(&Dataset::load_dir(&common.data)?, &cfg)?;
            let s = load_student(student)?;
            let t = checkpoint::load(teacher)?;
            let label = format!("stage{stage}");
            let groups = match groups {
                Some(p) => load_groups(p, &data.corpus, &data.train)?,
                None => {
                    crate::mining::mine_hard_negatives(
                        &s,
                        &data.corpus,
                        &data.train,
                        &data.qrels,
                        &data.answers,
                        &cfg.stage_mining(spec.negatives_per_query, &format!("{label}.mine")),
                    )?
                    .groups
                }
            };
            let frozen = spec
                .use_regularization
                .then(|| FrozenSnapshot::capture(&s, format!("{label} step 0")));
            let (next, log) = distill_stage(
                &s,
                &t,
                &groups,
                spec,
                frozen.as_ref(),
                &cfg.optimizer,
                Some(&data.qrels),
                derive_seed(cfg.seed, &format!("{label}.distill")),
                &label,
            )?;
            ensure_dir(out)?;
            checkpoint::save(&Encoder::Dual(next.clone()), &out.join("student.ckpt"))?;
            write_groups(&out.join("groups.tsv"), &groups)?;
            let m = evaluate_student(&next, &data.corpus, &data.dev, &data.qrels, cfg.eval_depth)?;
            let line = ReportEntry::new(&label).field("steps", log.steps()).with_metrics(m);
            write_text(&out.join("report.txt"), &format!("{line}\n"))?;
            println!("{line}");
        }
        Command::Dpd {
            common,
            student,
            teacher,
            out,
        } => {
            let cfg = config_for(common, cli.seed)?;
            let data = PreparedData::new(&Dataset::load_dir(&common.data)?, &cfg)?;
            let s = load_student(student)?;
            let Encoder::Cross(t) = checkpoint::load(teacher)? else {
                return Err(Error::Input(format!(
                    "{}: expected a cross-encoder checkpoint",
                    teacher.display()
                )));
            };
            ensure_dir(out)?;
            let mut report = PipelineReport::default();
            run_dpd(&s, &t, &cfg, &data, Some(out), &mut report)?;
            report.write(&out.join("report.txt"))?;
            print!("{report}");
        }
        Command::Pipeline { common, out } => {
            let cfg = config_for(common, cli.seed)?;
            let dataset = Dataset::load_dir(&common.data)?;
            let outcome = run_pipeline(&cfg, &dataset, Some(out))?;
            print!("{}", outcome.report);
        }
        Command::Evaluate {
            run,
            qrels,
            metric,
            model,
            data,
            split,
            depth,
            run_out,
        } => {
            let metric: Metric = metric.parse()?;
            let (runs, judged) = match (run, model, data) {
                (Some(r), None, _) => {
                    let q = qrels
                        .as_ref()
                        .ok_or_else(|| Error::Input("--run needs --qrels".into()))?;
                    let runs = load_run(r)?;
                    (runs, load_qrels(q)?)
                }
                (None, Some(m), Some(d)) => {
                    let dataset = Dataset::load_dir(d)?;
                    let student = load_student(m)?;
                    let split: Split = split.parse()?;
                    let corpus = crate::mining::TokenizedCorpus::new(&dataset.corpus, student.config());
                    let queries = tokenize_queries(dataset.split(split), student.config());
                    let runs = retrieve_all(&student, &corpus, &queries, *depth)?;
                    if let Some(p) = run_out {
                        write_run(p, &runs, "prod")?;
                    }
                    let judged = match qrels {
                        Some(q) => load_qrels(q)?,
                        None => dataset.qrels,
                    };
                    (runs, judged)
                }
                _ => {
                    return Err(Error::Input(
                        "evaluate needs either --run and --qrels or --model and --data".into(),
                    ))
                }
            };
            let v = evaluate(metric, &runs, &judged)?;
            println!("{}", v.value);
        }
        Command::Config { config } => {
            let mut cfg = match config {
                Some(p) => load_config(p)?,
                None => PipelineConfig::default(),
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
                cfg.mining.seed = s;
            }
            print!("{}", format_config(&cfg));
        }
        Command::Baseline {
            common,
            strategy,
            student,
            teachers,
            stage,
            out,
        } => {
            let cfg = config_for(common, cli.seed)?;
            let strategy: MergeStrategy = strategy.parse()?;
            let spec = stage_spec(&cfg, *stage)?;
            let data = PreparedData::new(&Dataset::load_dir(&common.data)?, &cfg)?;
            let s = load_student(student)?;
            let ts = teachers
                .iter()
                .map(|p| checkpoint::load(p))
                .collect::<Result<Vec<_>>>()?;
            let mined = crate::mining::mine_hard_negatives(
                &s,
                &data.corpus,
                &data.train,
                &data.qrels,
                &data.answers,
                &cfg.stage_mining(spec.negatives_per_query, "baseline.mine"),
            )?;
            let mut weights = spec.weights;
            weights.gamma = 0.0;
            let (next, log) = multi_teacher_baseline(
                strategy,
                &ts,
                &s,
                &mined.groups,
                &weights,
                &spec.distill_settings(),
                &cfg.optimizer,
                derive_seed(cfg.seed, &format!("baseline.{strategy}")),
            )?;
            ensure_dir(out)?;
            checkpoint::save(&Encoder::Dual(next.clone()), &out.join("student.ckpt"))?;
            let m = evaluate_student(&next, &data.corpus, &data.dev, &data.qrels, cfg.eval_depth)?;
            let line = ReportEntry::new(format!("baseline_{strategy}"))
                .field("teachers", ts.len())
                .field("steps", log.steps())
                .with_metrics(m);
            write_text(&out.join("report.txt"), &format!("{line}\n"))?;
            println!("{line}");
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_arguments_is_usage_error() {
        assert_eq!(dispatch(["prod"]), 1);
        assert_eq!(dispatch(["prod", "bogus"]), 1);
        assert_eq!(dispatch(["prod", "evaluate", "--help"]), 0);
    }

    #[test]
    fn missing_data_is_exit_two() {
        assert_eq!(
            dispatch(["prod", "pipeline", "--data", "/no/such/dir", "--out", "/tmp/x"]),
            2
        );
    }
}
