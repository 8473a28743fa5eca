//! Flat `section.key = value` pipeline configuration.
//!
//! `#` starts a comment. Missing keys keep their defaults; unknown keys are
//! errors. `loss.*` keys set the loss weights of every stage and of the
//! data-progressive iterations at once (`loss.reg_weight` only touches
//! cross-encoder stages); per-stage keys override them. The effective dump
//! lists every resolved per-stage value and loads back to the same config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mining::FilterMode;
use crate::pipeline::{default_stage, PipelineConfig, StageSpec, TeacherKind, TrainSettings};

struct Line {
    number: usize,
    value: String,
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("invalid value {value:?} for {key}"))
}

fn set_train(t: &mut TrainSettings, field: &str, key: &str, value: &str) -> std::result::Result<bool, String> {
    match field {
        "steps" => t.steps = parse_value(key, value)?,
        "lr" => t.learning_rate = parse_value(key, value)?,
        "batch_size" => t.batch_size = parse_value(key, value)?,
        "warmup" => t.warmup_ratio = parse_value(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn set_stage(s: &mut StageSpec, field: &str, key: &str, v: &str) -> std::result::Result<bool, String> {
    match field {
        "teacher_kind" => s.teacher_kind = v.parse::<TeacherKind>().map_err(|e| e.to_string())?,
        "teacher_layers" => s.teacher_layers = parse_value(key, v)?,
        "teacher_hidden_dim" => s.teacher_hidden_dim = parse_value(key, v)?,
        "negatives" => s.negatives_per_query = parse_value(key, v)?,
        "alpha" => s.weights.alpha = parse_value(key, v)?,
        "beta" => s.weights.beta = parse_value(key, v)?,
        "gamma" => s.weights.gamma = parse_value(key, v)?,
        "tau" => s.weights.tau = parse_value(key, v)?,
        "steps" => s.steps = parse_value(key, v)?,
        "lr" => s.learning_rate = parse_value(key, v)?,
        "batch_size" => s.batch_size = parse_value(key, v)?,
        "warmup" => s.warmup_ratio = parse_value(key, v)?,
        "in_batch" => s.use_in_batch = parse_value(key, v)?,
        "regularization" => s.use_regularization = parse_value(key, v)?,
        _ => match field.strip_prefix("teacher_") {
            Some(rest) => return set_train(&mut s.teacher_training, rest, key, v),
            None => return Ok(false),
        },
    }
    Ok(true)
}

fn apply(cfg: &mut PipelineConfig, key: &str, v: &str) -> std::result::Result<(), String> {
    let known = match key {
        "seed" => {
            cfg.seed = parse_value(key, v)?;
            true
        }
        "stages.count" => true,
        "eval.depth" => {
            cfg.eval_depth = parse_value(key, v)?;
            true
        }
        "pipeline.allow_any_order" => {
            cfg.allow_any_order = parse_value(key, v)?;
            true
        }
        _ => {
            let (section, field) = key.split_once('.').unwrap_or((key, ""));
            match section {
                "model" => {
                    let m = &mut cfg.model;
                    match field {
                        "hidden_dim" => m.hidden_dim = parse_value(key, v)?,
                        "vocab_size" => m.vocab_size = parse_value(key, v)?,
                        "max_query_len" => m.max_query_len = parse_value(key, v)?,
                        "max_passage_len" => m.max_passage_len = parse_value(key, v)?,
                        "student_layers" => m.student_layers = parse_value(key, v)?,
                        "share_towers" => m.share_towers = parse_value(key, v)?,
                        _ => return Err(format!("unknown key {key:?}")),
                    }
                    true
                }
                "optim" => {
                    let o = &mut cfg.optimizer;
                    match field {
                        "beta1" => o.beta1 = parse_value(key, v)?,
                        "beta2" => o.beta2 = parse_value(key, v)?,
                        "eps" => o.eps = parse_value(key, v)?,
                        "weight_decay" => o.weight_decay = parse_value(key, v)?,
                        _ => return Err(format!("unknown key {key:?}")),
                    }
                    true
                }
                "loss" => {
                    let x: f64 = parse_value(key, v)?;
                    for s in cfg.stages.iter_mut() {
                        match field {
                            "tau" => s.weights.tau = x,
                            "hard_weight" => s.weights.alpha = x,
                            "soft_weight" => s.weights.beta = x,
                            "reg_weight" if s.teacher_kind == TeacherKind::CrossEncoder => s.weights.gamma = x,
                            "reg_weight" => {}
                            "warmup" => s.warmup_ratio = x,
                            _ => return Err(format!("unknown key {key:?}")),
                        }
                    }
                    let d = &mut cfg.dpd;
                    match field {
                        "tau" => d.weights.tau = x,
                        "hard_weight" => d.weights.alpha = x,
                        "soft_weight" => d.weights.beta = x,
                        "reg_weight" => d.weights.gamma = x,
                        "warmup" => d.distill.warmup_ratio = x,
                        _ => return Err(format!("unknown key {key:?}")),
                    }
                    true
                }
                "warmup" => {
                    let w = &mut cfg.warmup;
                    match field {
                        "teacher_layers" => w.teacher_layers = parse_value(key, v)?,
                        "teacher_hidden_dim" => w.teacher_hidden_dim = parse_value(key, v)?,
                        "random_negatives" => w.random_negatives = parse_value(key, v)?,
                        "hard_negatives" => w.hard_negatives = parse_value(key, v)?,
                        _ => {
                            let (which, f) = field.split_once('.').unwrap_or((field, ""));
                            let t = match which {
                                "student" => &mut w.student,
                                "teacher" => &mut w.teacher,
                                "retrain" => &mut w.retrain,
                                _ => return Err(format!("unknown key {key:?}")),
                            };
                            if !set_train(t, f, key, v)? {
                                return Err(format!("unknown key {key:?}"));
                            }
                        }
                    }
                    true
                }
                "mining" => {
                    match field {
                        "depth" => cfg.mining.depth_k = parse_value(key, v)?,
                        "seed" => cfg.mining.seed = parse_value(key, v)?,
                        "answer_filter" => cfg.mining.answer_filter = parse_value(key, v)?,
                        _ => return Err(format!("unknown key {key:?}")),
                    }
                    true
                }
                "dpd" => {
                    let d = &mut cfg.dpd;
                    let f = &mut d.filter;
                    match field {
                        "iterations" => d.iterations = parse_value(key, v)?,
                        "kprime" => f.student_window.hi = parse_value(key, v)?,
                        "student_lo" => f.student_window.lo = parse_value(key, v)?,
                        "teacher_lo" => f.teacher_window.lo = parse_value(key, v)?,
                        "teacher_hi" => f.teacher_window.hi = parse_value(key, v)?,
                        "mode" => f.mode = v.parse::<FilterMode>().map_err(|e| e.to_string())?,
                        "negatives" => d.negatives_per_query = parse_value(key, v)?,
                        "alpha" => d.weights.alpha = parse_value(key, v)?,
                        "beta" => d.weights.beta = parse_value(key, v)?,
                        "gamma" => d.weights.gamma = parse_value(key, v)?,
                        "tau" => d.weights.tau = parse_value(key, v)?,
                        "teacher_lr" => d.teacher_learning_rate = parse_value(key, v)?,
                        "teacher_epochs" => d.teacher_epochs = parse_value(key, v)?,
                        "teacher_batch_size" => d.teacher_batch_size = parse_value(key, v)?,
                        _ => {
                            if !set_train(&mut d.distill, field, key, v)? {
                                return Err(format!("unknown key {key:?}"));
                            }
                        }
                    }
                    true
                }
                s => match s.strip_prefix("stage").and_then(|n| n.parse::<usize>().ok()) {
                    Some(n) if n >= 1 && n <= cfg.stages.len() => set_stage(&mut cfg.stages[n - 1], field, key, v)?,
                    Some(n) => {
                        return Err(format!(
                            "{key:?} refers to stage {n}, but stages.count is {}",
                            cfg.stages.len()
                        ))
                    }
                    None => false,
                },
            }
        }
    };
    if known {
        Ok(())
    } else {
        Err(format!("unknown key {key:?}"))
    }
}

fn key_order(key: &str) -> u8 {
    match key.split_once('.').map_or(key, |(s, _)| s) {
        "loss" => 1,
        s if s.starts_with("stage") && s != "stages" => 2,
        _ => 0,
    }
}

/// Parses config text; `path` only labels diagnostics.
pub fn parse_config(path: &Path, content: &str) -> Result<PipelineConfig> {
    let mut entries: BTreeMap<String, Line> = BTreeMap::new();
    for (i, raw) in content.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err("expected `key = value`".into()))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(err("empty key".into()));
        }
        if entries
            .insert(
                k.to_string(),
                Line {
                    number: i + 1,
                    value: v.to_string(),
                },
            )
            .is_some()
        {
            return Err(err(format!("duplicate key {k:?}")));
        }
    }
    let mut cfg = PipelineConfig::default();
    if let Some(l) = entries.get("stages.count") {
        let n: usize = parse_value("stages.count", &l.value).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line: l.number,
            message,
        })?;
        cfg.stages = (1..=n).map(default_stage).collect();
    }
    // Globals first so per-stage keys override them.
    let mut ordered: Vec<(&String, &Line)> = entries.iter().collect();
    ordered.sort_by_key(|(k, l)| (key_order(k), l.number));
    for (k, l) in ordered {
        apply(&mut cfg, k, &l.value).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line: l.number,
            message,
        })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(path, &content)
}

fn push_train(out: &mut String, prefix: &str, t: &TrainSettings) {
    let _ = writeln!(out, "{prefix}steps = {}", t.steps);
    let _ = writeln!(out, "{prefix}lr = {}", t.learning_rate);
    let _ = writeln!(out, "{prefix}batch_size = {}", t.batch_size);
    let _ = writeln!(out, "{prefix}warmup = {}", t.warmup_ratio);
}

/// Every resolved value, in a form [`parse_config`] reads back unchanged.
pub fn format_config(cfg: &PipelineConfig) -> String {
    let mut o = String::new();
    let m = &cfg.model;
    let _ = writeln!(o, "seed = {}", cfg.seed);
    let _ = writeln!(o, "eval.depth = {}", cfg.eval_depth);
    let _ = writeln!(o, "pipeline.allow_any_order = {}", cfg.allow_any_order);
    let _ = writeln!(o, "\nmodel.hidden_dim = {}", m.hidden_dim);
    let _ = writeln!(o, "model.vocab_size = {}", m.vocab_size);
    let _ = writeln!(o, "model.max_query_len = {}", m.max_query_len);
    let _ = writeln!(o, "model.max_passage_len = {}", m.max_passage_len);
    let _ = writeln!(o, "model.student_layers = {}", m.student_layers);
    let _ = writeln!(o, "model.share_towers = {}", m.share_towers);
    let p = &cfg.optimizer;
    let _ = writeln!(o, "\noptim.beta1 = {}", p.beta1);
    let _ = writeln!(o, "optim.beta2 = {}", p.beta2);
    let _ = writeln!(o, "optim.eps = {}", p.eps);
    let _ = writeln!(o, "optim.weight_decay = {}", p.weight_decay);
    let w = &cfg.warmup;
    let _ = writeln!(o, "\nwarmup.teacher_layers = {}", w.teacher_layers);
    let _ = writeln!(o, "warmup.teacher_hidden_dim = {}", w.teacher_hidden_dim);
    let _ = writeln!(o, "warmup.random_negatives = {}", w.random_negatives);
    let _ = writeln!(o, "warmup.hard_negatives = {}", w.hard_negatives);
    push_train(&mut o, "warmup.student.", &w.student);
    push_train(&mut o, "warmup.teacher.", &w.teacher);
    push_train(&mut o, "warmup.retrain.", &w.retrain);
    let _ = writeln!(o, "\nmining.depth = {}", cfg.mining.depth_k);
    let _ = writeln!(o, "mining.seed = {}", cfg.mining.seed);
    let _ = writeln!(o, "mining.answer_filter = {}", cfg.mining.answer_filter);
    let _ = writeln!(o, "\nstages.count = {}", cfg.stages.len());
    for (i, s) in cfg.stages.iter().enumerate() {
        let p = format!("stage{}.", i + 1);
        let _ = writeln!(o, "\n{p}teacher_kind = {}", s.teacher_kind);
        let _ = writeln!(o, "{p}teacher_layers = {}", s.teacher_layers);
        let _ = writeln!(o, "{p}teacher_hidden_dim = {}", s.teacher_hidden_dim);
        let _ = writeln!(o, "{p}negatives = {}", s.negatives_per_query);
        let _ = writeln!(o, "{p}alpha = {}", s.weights.alpha);
        let _ = writeln!(o, "{p}beta = {}", s.weights.beta);
        let _ = writeln!(o, "{p}gamma = {}", s.weights.gamma);
        let _ = writeln!(o, "{p}tau = {}", s.weights.tau);
        push_train(&mut o, &p, &s.distill_settings());
        let _ = writeln!(o, "{p}in_batch = {}", s.use_in_batch);
        let _ = writeln!(o, "{p}regularization = {}", s.use_regularization);
        push_train(&mut o, &format!("{p}teacher_"), &s.teacher_training);
    }
    let d = &cfg.dpd;
    let f = &d.filter;
    let _ = writeln!(o, "\ndpd.iterations = {}", d.iterations);
    let _ = writeln!(o, "dpd.kprime = {}", f.student_window.hi);
    let _ = writeln!(o, "dpd.student_lo = {}", f.student_window.lo);
    let _ = writeln!(o, "dpd.teacher_lo = {}", f.teacher_window.lo);
    let _ = writeln!(o, "dpd.teacher_hi = {}", f.teacher_window.hi);
    let _ = writeln!(o, "dpd.mode = {}", f.mode.name());
    let _ = writeln!(o, "dpd.negatives = {}", d.negatives_per_query);
    let _ = writeln!(o, "dpd.alpha = {}", d.weights.alpha);
    let _ = writeln!(o, "dpd.beta = {}", d.weights.beta);
    let _ = writeln!(o, "dpd.gamma = {}", d.weights.gamma);
    let _ = writeln!(o, "dpd.tau = {}", d.weights.tau);
    push_train(&mut o, "dpd.", &d.distill);
    let _ = writeln!(o, "dpd.teacher_lr = {}", d.teacher_learning_rate);
    let _ = writeln!(o, "dpd.teacher_epochs = {}", d.teacher_epochs);
    let _ = writeln!(o, "dpd.teacher_batch_size = {}", d.teacher_batch_size);
    o
}
