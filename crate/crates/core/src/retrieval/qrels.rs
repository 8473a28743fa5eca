use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Relevance judgments: query id → passage id → grade.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: impl Into<String>, passage_id: impl Into<String>, grade: u32) {
        self.judgments
            .entry(query_id.into())
            .or_default()
            .insert(passage_id.into(), grade);
    }

    pub fn contains_query(&self, query_id: &str) -> bool {
        self.judgments.contains_key(query_id)
    }

    pub fn judged(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query_id)
    }

    pub fn grade(&self, query_id: &str, passage_id: &str) -> u32 {
        self.judgments
            .get(query_id)
            .and_then(|m| m.get(passage_id))
            .copied()
            .unwrap_or(0)
    }

    pub fn is_relevant(&self, query_id: &str, passage_id: &str) -> bool {
        self.grade(query_id, passage_id) > 0
    }

    /// Passages with grade > 0, in ascending id order.
    pub fn relevant(&self, query_id: &str) -> Vec<&str> {
        self.judgments
            .get(query_id)
            .map(|m| m.iter().filter(|(_, &g)| g > 0).map(|(p, _)| p.as_str()).collect())
            .unwrap_or_default()
    }

    pub fn num_queries(&self) -> usize {
        self.judgments.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, u32)> {
        self.judgments
            .iter()
            .flat_map(|(q, m)| m.iter().map(move |(p, &g)| (q.as_str(), p.as_str(), g)))
    }

    /// Every listed query must have at least one positive grade.
    pub fn check_training(&self, query_ids: &[&str]) -> Result<()> {
        for q in query_ids {
            if self.relevant(q).is_empty() {
                return Err(Error::Input(format!("training query {q} has no relevant passage")));
            }
        }
        Ok(())
    }
}

/// Formats TREC qrels lines `query_id 0 passage_id grade`.
pub fn format_qrels(qrels: &Qrels) -> String {
    let mut out = String::new();
    for (q, p, g) in qrels.iter() {
        out.push_str(&format!("{q} 0 {p} {g}\n"));
    }
    out
}

pub fn write_qrels(path: &Path, qrels: &Qrels) -> Result<()> {
    fs::write(path, format_qrels(qrels)).map_err(|e| Error::io(path, e))
}

pub fn parse_qrels(path: &Path, content: &str) -> Result<Qrels> {
    let mut qrels = Qrels::new();
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
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", fields.len())));
        }
        let grade: u32 = fields[3]
            .parse()
            .map_err(|_| err(format!("grade must be a nonnegative integer, got {:?}", fields[3])))?;
        if qrels.judged(fields[0]).is_some_and(|m| m.contains_key(fields[2])) {
            return Err(err(format!("duplicate judgment for {} {}", fields[0], fields[2])));
        }
        qrels.insert(fields[0], fields[2], grade);
    }
    Ok(qrels)
}

pub fn load_qrels(path: &Path) -> Result<Qrels> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_qrels(path, &content)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_format() {
        let text = "q1 0 d1 1\nq1 0 d2 0\nq2 0 d3 2\n";
        let q = parse_qrels(Path::new("mem"), text).unwrap();
        assert_eq!(q.relevant("q1"), vec!["d1"]);
        assert_eq!(q.grade("q2", "d3"), 2);
        assert_eq!(format_qrels(&q), text);
    }

    #[test]
    fn empty_qrels_is_valid() {
        assert_eq!(parse_qrels(Path::new("mem"), "").unwrap().num_queries(), 0);
    }

    #[test]
    fn negative_grade_is_rejected() {
        let err = parse_qrels(Path::new("mem"), "q 0 d -1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }
}
