//! Dataset files, the synthetic generator, and pipeline configuration.

mod collections;
pub mod config;
mod synthetic;

use std::fs;
use std::path::Path;

pub use collections::{load_answers, load_corpus, load_queries, write_tsv, Answers, Corpus, QuerySet, Split};
pub use synthetic::{cluster_word, generate_synthetic, SyntheticSpec};

use crate::error::{Error, Result};
use crate::retrieval::{load_qrels, write_qrels, Qrels};

pub const CORPUS_FILE: &str = "corpus.tsv";
pub const QRELS_FILE: &str = "qrels.txt";
pub const ANSWERS_FILE: &str = "answers.tsv";

pub fn queries_file(split: Split) -> String {
    format!("queries.{split}.tsv")
}

/// A corpus with its three query splits and judgments.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub corpus: Corpus,
    pub train: QuerySet,
    pub dev: QuerySet,
    pub test: QuerySet,
    pub qrels: Qrels,
    /// Optional answer strings for false-negative filtering.
    pub answers: Answers,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &QuerySet {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Loads `corpus.tsv`, `queries.{train,dev,test}.tsv`, `qrels.txt` and,
    /// when present, `answers.tsv` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let corpus = load_corpus(&dir.join(CORPUS_FILE))?;
        let train = load_queries(&dir.join(queries_file(Split::Train)), Split::Train)?;
        let dev = load_queries(&dir.join(queries_file(Split::Dev)), Split::Dev)?;
        let test = load_queries(&dir.join(queries_file(Split::Test)), Split::Test)?;
        let qrels = load_qrels(&dir.join(QRELS_FILE))?;
        let answers_path = dir.join(ANSWERS_FILE);
        let answers = if answers_path.exists() {
            load_answers(&answers_path)?
        } else {
            Answers::new()
        };
        Ok(Self {
            corpus,
            train,
            dev,
            test,
            qrels,
            answers,
        })
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_tsv(&dir.join(CORPUS_FILE), self.corpus.entries())?;
        for split in Split::ALL {
            write_tsv(&dir.join(queries_file(split)), self.split(split).entries())?;
        }
        write_qrels(&dir.join(QRELS_FILE), &self.qrels)?;
        if !self.answers.is_empty() {
            let rows: Vec<(String, String)> = self
                .answers
                .iter()
                .flat_map(|(q, list)| list.iter().map(move |a| (q.clone(), a.clone())))
                .collect();
            write_tsv(&dir.join(ANSWERS_FILE), &rows)?;
        }
        Ok(())
    }
}
