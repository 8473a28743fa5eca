use std::fmt;
use std::fs;
use std::path::Path;

use crate::encoders::{DualEncoder, TokenSequence};
use crate::error::{Error, Result};
use crate::mining::{retrieve_all, TokenizedCorpus};
use crate::retrieval::{mrr_at_k, recall_at_k, Qrels, RankedList};

pub const RECALL_CUTOFFS: [usize; 4] = [5, 20, 50, 100];

/// Dev-set effectiveness of one student checkpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub mrr_at_10: f64,
    pub recall: [f64; 4],
    pub queries: usize,
}

impl fmt::Display for EvalSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "mrr@10={:.6}", self.mrr_at_10)?;
        for (k, r) in RECALL_CUTOFFS.iter().zip(self.recall) {
            write!(f, " recall@{k}={r:.6}")?;
        }
        write!(f, " queries={}", self.queries)
    }
}

pub fn summarize(runs: &[RankedList], qrels: &Qrels) -> Result<EvalSummary> {
    let mrr = mrr_at_k(runs, qrels, 10)?;
    let mut recall = [0.0; 4];
    for (slot, k) in recall.iter_mut().zip(RECALL_CUTOFFS) {
        *slot = recall_at_k(runs, qrels, k)?.value;
    }
    Ok(EvalSummary {
        mrr_at_10: mrr.value,
        recall,
        queries: mrr.evaluated,
    })
}

/// Retrieves every query at `depth` with `student` and scores the runs.
pub fn evaluate_student(
    student: &DualEncoder,
    corpus: &TokenizedCorpus,
    queries: &[(String, TokenSequence)],
    qrels: &Qrels,
    depth: usize,
) -> Result<EvalSummary> {
    let runs = retrieve_all(student, corpus, queries, depth)?;
    summarize(&runs, qrels)
}

/// One line of the pipeline report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportEntry {
    pub name: String,
    pub fields: Vec<(String, String)>,
    pub metrics: Option<EvalSummary>,
}

impl ReportEntry {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            fields: Vec::new(),
            metrics: None,
        }
    }

    pub fn field(mut self, key: &str, value: impl fmt::Display) -> Self {
        self.fields.push((key.to_string(), value.to_string()));
        self
    }

    pub fn with_metrics(mut self, m: EvalSummary) -> Self {
        self.metrics = Some(m);
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

impl fmt::Display for ReportEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage={}", self.name)?;
        for (k, v) in &self.fields {
            write!(f, " {k}={v}")?;
        }
        if let Some(m) = &self.metrics {
            write!(f, " {m}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineReport {
    pub entries: Vec<ReportEntry>,
}

impl PipelineReport {
    pub fn push(&mut self, entry: ReportEntry) {
        log::info!("{entry}");
        self.entries.push(entry);
    }

    pub fn entry(&self, name: &str) -> Option<&ReportEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn mrr(&self, name: &str) -> Option<f64> {
        self.entry(name).and_then(|e| e.metrics).map(|m| m.mrr_at_10)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for PipelineReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(f, "{e}")?;
        }
        Ok(())
    }
}
