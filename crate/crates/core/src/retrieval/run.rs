use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RankedEntry {
    pub passage_id: String,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

/// Ranking order: higher score first, ties by ascending passage id.
pub fn rank_order(a: (&str, f64), b: (&str, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

/// Retrieval output for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    query_id: String,
    entries: Vec<RankedEntry>,
}

impl RankedList {
    /// Validates ordering, rank numbering, and id uniqueness.
    pub fn new(query_id: impl Into<String>, entries: Vec<RankedEntry>) -> Result<Self> {
        let query_id = query_id.into();
        let mut seen = HashSet::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.rank != i + 1 {
                return Err(Error::Input(format!(
                    "query {query_id}: rank {} at position {}",
                    e.rank,
                    i + 1
                )));
            }
            if i > 0 && e.score > entries[i - 1].score {
                return Err(Error::Input(format!(
                    "query {query_id}: scores increase at rank {}",
                    e.rank
                )));
            }
            if !seen.insert(e.passage_id.as_str()) {
                return Err(Error::Input(format!(
                    "query {query_id}: passage {} listed twice",
                    e.passage_id
                )));
            }
        }
        Ok(Self { query_id, entries })
    }

    /// Sorts scored passages with [`rank_order`] and numbers them.
    pub fn from_scored(query_id: impl Into<String>, mut scored: Vec<(String, f64)>) -> Result<Self> {
        scored.sort_by(|a, b| rank_order((&a.0, a.1), (&b.0, b.1)));
        let entries = scored
            .into_iter()
            .enumerate()
            .map(|(i, (passage_id, score))| RankedEntry {
                passage_id,
                score,
                rank: i + 1,
            })
            .collect();
        Self::new(query_id, entries)
    }

    pub fn query_id(&self) -> &str {
        &self.query_id
    }

    pub fn entries(&self) -> &[RankedEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn passage_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.passage_id.as_str())
    }

    /// 1-based rank of a passage, if listed.
    pub fn rank_of(&self, passage_id: &str) -> Option<usize> {
        self.entries.iter().find(|e| e.passage_id == passage_id).map(|e| e.rank)
    }

    /// Drops entries for which `keep` is false and renumbers ranks.
    pub fn retain(&self, mut keep: impl FnMut(&RankedEntry) -> bool) -> RankedList {
        let entries = self
            .entries
            .iter()
            .filter(|e| keep(e))
            .enumerate()
            .map(|(i, e)| RankedEntry {
                rank: i + 1,
                ..e.clone()
            })
            .collect();
        RankedList {
            query_id: self.query_id.clone(),
            entries,
        }
    }

    pub fn truncate(&self, k: usize) -> RankedList {
        RankedList {
            query_id: self.query_id.clone(),
            entries: self.entries.iter().take(k).cloned().collect(),
        }
    }
}

/// Writes `query_id Q0 passage_id rank score tag` lines, scores to six decimals.
pub fn format_run(runs: &[RankedList], tag: &str) -> String {
    let mut out = String::new();
    for run in runs {
        for e in &run.entries {
            out.push_str(&format!(
                "{} Q0 {} {} {:.6} {}\n",
                run.query_id, e.passage_id, e.rank, e.score, tag
            ));
        }
    }
    out
}

pub fn write_run(path: &Path, runs: &[RankedList], tag: &str) -> Result<()> {
    fs::write(path, format_run(runs, tag)).map_err(|e| Error::io(path, e))
}

pub fn parse_run(path: &Path, content: &str) -> Result<Vec<RankedList>> {
    let mut by_query: BTreeMap<String, Vec<RankedEntry>> = BTreeMap::new();
    for (i, line) in content.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        if fields.len() != 6 {
            return Err(err(format!("expected 6 fields, found {}", fields.len())));
        }
        let rank: usize = fields[3]
            .parse()
            .map_err(|_| err(format!("bad rank {:?}", fields[3])))?;
        let score: f64 = fields[4]
            .parse()
            .map_err(|_| err(format!("bad score {:?}", fields[4])))?;
        if !score.is_finite() {
            return Err(err("non-finite score".into()));
        }
        by_query.entry(fields[0].to_string()).or_default().push(RankedEntry {
            passage_id: fields[2].to_string(),
            score,
            rank,
        });
    }
    by_query
        .into_iter()
        .map(|(qid, mut entries)| {
            entries.sort_by_key(|e| e.rank);
            RankedList::new(qid, entries)
        })
        .collect()
}

pub fn load_run(path: &Path) -> Result<Vec<RankedList>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_run(path, &content)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_break_by_ascending_id() {
        let r = RankedList::from_scored("q", vec![("b".into(), 1.0), ("a".into(), 1.0), ("c".into(), 2.0)]).unwrap();
        let ids: Vec<&str> = r.passage_ids().collect();
        assert_eq!(ids, ["c", "a", "b"]);
    }

    #[test]
    fn invariants_are_checked() {
        let e = |id: &str, score, rank| RankedEntry {
            passage_id: id.into(),
            score,
            rank,
        };
        assert!(RankedList::new("q", vec![e("a", 1.0, 1), e("b", 2.0, 2)]).is_err());
        assert!(RankedList::new("q", vec![e("a", 1.0, 1), e("b", 0.5, 3)]).is_err());
        assert!(RankedList::new("q", vec![e("a", 1.0, 1), e("a", 0.5, 2)]).is_err());
    }

    #[test]
    fn run_file_format() {
        let r = RankedList::from_scored("q1", vec![("p1".into(), 0.5), ("p2".into(), 0.25)]).unwrap();
        let text = format_run(&[r.clone()], "prod");
        assert_eq!(text, "q1 Q0 p1 1 0.500000 prod\nq1 Q0 p2 2 0.250000 prod\n");
        let back = parse_run(Path::new("mem"), &text).unwrap();
        assert_eq!(back, vec![r]);
    }

    #[test]
    fn retain_renumbers() {
        let r = RankedList::from_scored("q", vec![("a".into(), 3.0), ("b".into(), 2.0), ("c".into(), 1.0)]).unwrap();
        let kept = r.retain(|e| e.passage_id != "b");
        assert_eq!(kept.rank_of("c"), Some(2));
    }
}
