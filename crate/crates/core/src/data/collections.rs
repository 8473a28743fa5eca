use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered `(id, text)` records with unique, non-empty ids.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Records {
    entries: Vec<(String, String)>,
    index: HashMap<String, usize>,
}

impl Records {
    fn new(entries: Vec<(String, String)>, what: &str) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (id, _)) in entries.iter().enumerate() {
            if id.is_empty() {
                return Err(Error::Input(format!("{what} record {} has an empty id", i + 1)));
            }
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate {what} id {id:?}")));
            }
        }
        Ok(Self { entries, index })
    }
}

/// The passage collection, in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus(Records);

impl Corpus {
    pub fn new(passages: Vec<(String, String)>) -> Result<Self> {
        Records::new(passages, "passage").map(Corpus)
    }

    pub fn len(&self) -> usize {
        self.0.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.0.entries.iter().map(|(id, _)| id.as_str())
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.0.entries.iter().map(|(_, t)| t.as_str())
    }

    pub fn get(&self, i: usize) -> (&str, &str) {
        let (id, t) = &self.0.entries[i];
        (id, t)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.0.index.get(id).copied()
    }

    pub fn text(&self, id: &str) -> Option<&str> {
        self.position(id).map(|i| self.0.entries[i].1.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.0.entries
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Input(format!("unknown split {other:?}"))),
        }
    }
}

/// Queries of one split, in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySet {
    records: Records,
    split: Split,
}

impl QuerySet {
    pub fn new(queries: Vec<(String, String)>, split: Split) -> Result<Self> {
        Ok(Self {
            records: Records::new(queries, "query")?,
            split,
        })
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.records.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.records.entries
    }

    pub fn text(&self, id: &str) -> Option<&str> {
        self.records.index.get(id).map(|&i| self.records.entries[i].1.as_str())
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_tsv(path: &Path, content: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let Some((id, text)) = line.split_once('\t') else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "expected `id<TAB>text`".into(),
            });
        };
        if id.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "empty id".into(),
            });
        }
        out.push((id.to_string(), text.to_string()));
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let records = parse_tsv(path, &read_to_string(path)?)?;
    if records.is_empty() {
        return Err(Error::Input(format!("{}: corpus is empty", path.display())));
    }
    Corpus::new(records).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

pub fn load_queries(path: &Path, split: Split) -> Result<QuerySet> {
    let records = parse_tsv(path, &read_to_string(path)?)?;
    QuerySet::new(records, split).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

fn sanitize(text: &str) -> String {
    text.replace(['\t', '\n', '\r'], " ")
}

pub fn write_tsv(path: &Path, records: &[(String, String)]) -> Result<()> {
    let mut out = String::new();
    for (id, text) in records {
        out.push_str(id);
        out.push('\t');
        out.push_str(&sanitize(text));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Answer strings per query, used by false-negative filtering.
/// File format: `query_id<TAB>answer`, one answer per line.
pub type Answers = BTreeMap<String, Vec<String>>;

pub fn load_answers(path: &Path) -> Result<Answers> {
    let mut out = Answers::new();
    for (id, answer) in parse_tsv(path, &read_to_string(path)?)? {
        out.entry(id).or_default().push(answer);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.tsv");
        let records = vec![
            ("p1".to_string(), "first passage".to_string()),
            ("p2".to_string(), "".to_string()),
        ];
        write_tsv(&path, &records).unwrap();
        let c = load_corpus(&path).unwrap();
        assert_eq!(c.entries(), records.as_slice());
        assert_eq!(c.position("p2"), Some(1));
    }

    #[test]
    fn empty_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.tsv");
        fs::write(&path, "").unwrap();
        assert!(load_corpus(&path).is_err());
        assert!(load_queries(&path, Split::Dev).unwrap().is_empty());
    }

    #[test]
    fn duplicate_id_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.tsv");
        fs::write(&path, "a\tx\nb\ty\na\tz\n").unwrap();
        let err = load_corpus(&path).unwrap_err().to_string();
        assert!(err.contains("\"a\""), "{err}");
    }

    #[test]
    fn malformed_line_is_located() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        fs::write(&path, "a\tx\nno tab here\n").unwrap();
        match load_queries(&path, Split::Train) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_corpus(Path::new("/definitely/not/here.tsv")),
            Err(Error::Io { .. })
        ));
    }
}
