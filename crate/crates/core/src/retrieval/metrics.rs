//! Rank-cutoff retrieval metrics.
//!
//! MRR, Recall and MAP use binary relevance (grade > 0); nDCG uses graded
//! gains `2^grade − 1` with discount `1 / log₂(rank + 1)`. Dataset values
//! are macro averages over queries present in the qrels.

use std::fmt;
use std::str::FromStr;

use super::qrels::Qrels;
use super::run::RankedList;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    Mrr(usize),
    Recall(usize),
    Ndcg(usize),
    Map(usize),
}

impl Metric {
    pub fn cutoff(self) -> usize {
        match self {
            Metric::Mrr(k) | Metric::Recall(k) | Metric::Ndcg(k) | Metric::Map(k) => k,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Mrr(k) => write!(f, "mrr@{k}"),
            Metric::Recall(k) => write!(f, "recall@{k}"),
            Metric::Ndcg(k) => write!(f, "ndcg@{k}"),
            Metric::Map(k) => write!(f, "map@{k}"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, k) = s
            .split_once('@')
            .ok_or_else(|| Error::Input(format!("metric {s:?} must look like name@k")))?;
        let k: usize = k
            .parse()
            .ok()
            .filter(|&k| k >= 1)
            .ok_or_else(|| Error::Input(format!("metric cutoff in {s:?} must be a positive integer")))?;
        match name.to_ascii_lowercase().as_str() {
            "mrr" => Ok(Metric::Mrr(k)),
            "recall" => Ok(Metric::Recall(k)),
            "ndcg" => Ok(Metric::Ndcg(k)),
            "map" => Ok(Metric::Map(k)),
            other => Err(Error::Input(format!("unknown metric {other:?}"))),
        }
    }
}

/// A dataset-level metric value with bookkeeping counters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricValue {
    pub value: f64,
    /// Queries that contributed to the mean.
    pub evaluated: usize,
    /// Runs whose query has no judgments at all; excluded from the mean.
    pub missing_from_qrels: usize,
    /// Judged queries with no positive grade; they contribute 0.
    pub without_relevant: usize,
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Parameter("metric cutoff k must be at least 1".into()));
    }
    Ok(())
}

pub fn reciprocal_rank(run: &RankedList, qrels: &Qrels, k: usize) -> f64 {
    let q = run.query_id();
    run.entries()
        .iter()
        .take(k)
        .find(|e| qrels.is_relevant(q, &e.passage_id))
        .map_or(0.0, |e| 1.0 / e.rank as f64)
}

pub fn recall(run: &RankedList, qrels: &Qrels, k: usize) -> f64 {
    let q = run.query_id();
    let total = qrels.relevant(q).len();
    if total == 0 {
        return 0.0;
    }
    let hits = run
        .entries()
        .iter()
        .take(k)
        .filter(|e| qrels.is_relevant(q, &e.passage_id))
        .count();
    hits as f64 / total as f64
}

fn gain(grade: u32) -> f64 {
    2f64.powi(grade as i32) - 1.0
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

pub fn ndcg(run: &RankedList, qrels: &Qrels, k: usize) -> f64 {
    let q = run.query_id();
    let dcg: f64 = run
        .entries()
        .iter()
        .take(k)
        .map(|e| gain(qrels.grade(q, &e.passage_id)) * discount(e.rank))
        .sum();
    let mut grades: Vec<u32> = qrels
        .judged(q)
        .map(|m| m.values().copied().filter(|&g| g > 0).collect())
        .unwrap_or_default();
    grades.sort_unstable_by(|a, b| b.cmp(a));
    let ideal: f64 = grades
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain(g) * discount(i + 1))
        .sum();
    if ideal == 0.0 {
        0.0
    } else {
        dcg / ideal
    }
}

pub fn average_precision(run: &RankedList, qrels: &Qrels, k: usize) -> f64 {
    let q = run.query_id();
    let total = qrels.relevant(q).len();
    if total == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for e in run.entries().iter().take(k) {
        if qrels.is_relevant(q, &e.passage_id) {
            hits += 1;
            sum += hits as f64 / e.rank as f64;
        }
    }
    sum / total as f64
}

/// Per-query value of `metric`.
pub fn per_query(metric: Metric, run: &RankedList, qrels: &Qrels) -> f64 {
    match metric {
        Metric::Mrr(k) => reciprocal_rank(run, qrels, k),
        Metric::Recall(k) => recall(run, qrels, k),
        Metric::Ndcg(k) => ndcg(run, qrels, k),
        Metric::Map(k) => average_precision(run, qrels, k),
    }
}

/// Mean of `metric` over all runs whose query appears in `qrels`.
pub fn evaluate(metric: Metric, runs: &[RankedList], qrels: &Qrels) -> Result<MetricValue> {
    check_k(metric.cutoff())?;
    let mut out = MetricValue {
        value: 0.0,
        evaluated: 0,
        missing_from_qrels: 0,
        without_relevant: 0,
    };
    let mut sum = 0.0;
    for run in runs {
        if !qrels.contains_query(run.query_id()) {
            out.missing_from_qrels += 1;
            continue;
        }
        if qrels.relevant(run.query_id()).is_empty() {
            out.without_relevant += 1;
        }
        sum += per_query(metric, run, qrels);
        out.evaluated += 1;
    }
    if out.evaluated > 0 {
        out.value = sum / out.evaluated as f64;
    }
    Ok(out)
}

pub fn mrr_at_k(runs: &[RankedList], qrels: &Qrels, k: usize) -> Result<MetricValue> {
    evaluate(Metric::Mrr(k), runs, qrels)
}

pub fn recall_at_k(runs: &[RankedList], qrels: &Qrels, k: usize) -> Result<MetricValue> {
    evaluate(Metric::Recall(k), runs, qrels)
}

pub fn ndcg_at_k(runs: &[RankedList], qrels: &Qrels, k: usize) -> Result<MetricValue> {
    evaluate(Metric::Ndcg(k), runs, qrels)
}

pub fn map_at_k(runs: &[RankedList], qrels: &Qrels, k: usize) -> Result<MetricValue> {
    evaluate(Metric::Map(k), runs, qrels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_with_relevant_at(ranks: &[usize], len: usize) -> (RankedList, Qrels) {
        let scored = (1..=len).map(|r| (format!("d{r:03}"), (len - r) as f64)).collect();
        let run = RankedList::from_scored("q", scored).unwrap();
        let mut qrels = Qrels::new();
        for &r in ranks {
            qrels.insert("q", format!("d{r:03}"), 1);
        }
        (run, qrels)
    }

    #[test]
    fn mrr_examples() {
        let (run, q) = run_with_relevant_at(&[1], 20);
        assert_eq!(reciprocal_rank(&run, &q, 10), 1.0);
        let (run, q) = run_with_relevant_at(&[3], 20);
        assert!((reciprocal_rank(&run, &q, 10) - 1.0 / 3.0).abs() < 1e-15);
        let (run, q) = run_with_relevant_at(&[11], 20);
        assert_eq!(reciprocal_rank(&run, &q, 10), 0.0);
    }

    #[test]
    fn recall_examples() {
        let (run, q) = run_with_relevant_at(&[1, 4], 20);
        assert_eq!(recall(&run, &q, 5), 1.0);
        let (run, q) = run_with_relevant_at(&[2, 9], 20);
        assert_eq!(recall(&run, &q, 5), 0.5);
    }

    #[test]
    fn ndcg_examples() {
        let (run, q) = run_with_relevant_at(&[1], 10);
        assert_eq!(ndcg(&run, &q, 10), 1.0);
        let (run, q) = run_with_relevant_at(&[2], 10);
        assert!((ndcg(&run, &q, 10) - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert!((ndcg(&run, &q, 10) - 0.630930).abs() < 1e-6);
    }

    #[test]
    fn map_examples() {
        let (run, q) = run_with_relevant_at(&[1], 10);
        assert_eq!(average_precision(&run, &q, 10), 1.0);
        let (run, q) = run_with_relevant_at(&[1, 3], 10);
        assert!((average_precision(&run, &q, 10) - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn missing_and_empty_queries_are_counted() {
        let (run, mut q) = run_with_relevant_at(&[1], 5);
        let other = RankedList::from_scored("unjudged", vec![("x".into(), 1.0)]).unwrap();
        q.insert("zero", "d001", 0);
        let zero = RankedList::from_scored("zero", vec![("d001".into(), 1.0)]).unwrap();
        let v = ndcg_at_k(&[run, other, zero], &q, 10).unwrap();
        assert_eq!(v.evaluated, 2);
        assert_eq!(v.missing_from_qrels, 1);
        assert_eq!(v.without_relevant, 1);
        assert_eq!(v.value, 0.5);
    }

    #[test]
    fn metric_parsing() {
        assert_eq!("mrr@10".parse::<Metric>().unwrap(), Metric::Mrr(10));
        assert_eq!("nDCG@5".parse::<Metric>().unwrap(), Metric::Ndcg(5));
        assert!("mrr@0".parse::<Metric>().is_err());
        assert!("foo@3".parse::<Metric>().is_err());
        assert_eq!(Metric::Map(1000).to_string(), "map@1000");
    }

    #[test]
    fn zero_cutoff_is_rejected() {
        let (run, q) = run_with_relevant_at(&[1], 5);
        assert!(evaluate(Metric::Recall(0), &[run], &q).is_err());
    }
}
