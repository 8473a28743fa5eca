//! Clustered synthetic retrieval data.
//!
//! Every cluster owns a disjoint pool of word types. Passages and queries
//! draw their words from their cluster's pool, except that each word is
//! replaced, with probability `noise_token_rate`, by a word from a uniformly
//! chosen other cluster. A query is relevant (grade 1) to every passage of
//! its own cluster.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::collections::{Corpus, QuerySet, Split};
use super::Dataset;
use crate::error::{Error, Result};
use crate::retrieval::Qrels;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_clusters: usize,
    pub passages_per_cluster: usize,
    pub queries_per_cluster: usize,
    pub vocab_tokens_per_cluster: usize,
    pub noise_token_rate: f64,
    pub seed: u64,
    pub passage_len: usize,
    pub query_len: usize,
    /// Share of each cluster's queries assigned to train; the next
    /// `dev_fraction` go to dev and the remainder to test.
    pub train_fraction: f64,
    pub dev_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_clusters: 8,
            passages_per_cluster: 250,
            queries_per_cluster: 25,
            vocab_tokens_per_cluster: 40,
            noise_token_rate: 0.5,
            seed: 7,
            passage_len: 12,
            query_len: 6,
            train_fraction: 0.6,
            dev_fraction: 0.2,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_clusters", self.num_clusters),
            ("passages_per_cluster", self.passages_per_cluster),
            ("queries_per_cluster", self.queries_per_cluster),
            ("vocab_tokens_per_cluster", self.vocab_tokens_per_cluster),
            ("passage_len", self.passage_len),
            ("query_len", self.query_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.noise_token_rate) {
            return Err(Error::Config("noise_token_rate must lie in [0, 1)".into()));
        }
        if self.noise_token_rate > 0.0 && self.num_clusters < 2 {
            return Err(Error::Config("noise needs at least two clusters".into()));
        }
        if !(self.train_fraction >= 0.0 && self.dev_fraction >= 0.0 && self.train_fraction + self.dev_fraction <= 1.0) {
            return Err(Error::Config(
                "split fractions must be nonnegative and sum to at most 1".into(),
            ));
        }
        Ok(())
    }

    pub fn total_passages(&self) -> usize {
        self.num_clusters * self.passages_per_cluster
    }

    pub fn total_queries(&self) -> usize {
        self.num_clusters * self.queries_per_cluster
    }
}

/// The word type `j` of cluster `c`.
pub fn cluster_word(c: usize, j: usize) -> String {
    format!("k{c}w{j}")
}

fn sample_text(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, cluster: usize, len: usize) -> String {
    let mut words = Vec::with_capacity(len);
    for _ in 0..len {
        let c = if spec.noise_token_rate > 0.0 && rng.gen::<f64>() < spec.noise_token_rate {
            let other = rng.gen_range(0..spec.num_clusters - 1);
            if other >= cluster {
                other + 1
            } else {
                other
            }
        } else {
            cluster
        };
        words.push(cluster_word(c, rng.gen_range(0..spec.vocab_tokens_per_cluster)));
    }
    words.join(" ")
}

/// Deterministic in `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut passages: Vec<(usize, String)> = Vec::with_capacity(spec.total_passages());
    for c in 0..spec.num_clusters {
        for _ in 0..spec.passages_per_cluster {
            passages.push((c, sample_text(&mut rng, spec, c, spec.passage_len)));
        }
    }
    // Shuffle before numbering so ids carry no cluster information.
    passages.shuffle(&mut rng);
    let width = spec.total_passages().to_string().len();
    let passage_ids: Vec<String> = (0..passages.len()).map(|i| format!("p{i:0width$}")).collect();

    let q_width = spec.total_queries().to_string().len();
    let n_train = (spec.train_fraction * spec.queries_per_cluster as f64).round() as usize;
    let n_dev = ((spec.dev_fraction * spec.queries_per_cluster as f64).round() as usize)
        .min(spec.queries_per_cluster - n_train.min(spec.queries_per_cluster));
    let mut splits: [Vec<(String, String)>; 3] = Default::default();
    let mut qrels = Qrels::new();
    let mut next_query = 0;
    for c in 0..spec.num_clusters {
        for j in 0..spec.queries_per_cluster {
            let id = format!("q{next_query:0q_width$}");
            next_query += 1;
            let text = sample_text(&mut rng, spec, c, spec.query_len);
            let split = if j < n_train {
                0
            } else if j < n_train + n_dev {
                1
            } else {
                2
            };
            for (pid, (pc, _)) in passage_ids.iter().zip(&passages) {
                if *pc == c {
                    qrels.insert(id.clone(), pid.clone(), 1);
                }
            }
            splits[split].push((id, text));
        }
    }

    let corpus = Corpus::new(
        passage_ids
            .into_iter()
            .zip(passages.into_iter().map(|(_, t)| t))
            .collect(),
    )?;
    let [train, dev, test] = splits;
    Ok(Dataset {
        corpus,
        train: QuerySet::new(train, Split::Train)?,
        dev: QuerySet::new(dev, Split::Dev)?,
        test: QuerySet::new(test, Split::Test)?,
        qrels,
        answers: Default::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn default_spec_sizes() {
        let d = generate_synthetic(&SyntheticSpec::default()).unwrap();
        assert_eq!(d.corpus.len(), 2000);
        assert_eq!(d.train.len() + d.dev.len() + d.test.len(), 200);
        assert_eq!((d.train.len(), d.dev.len(), d.test.len()), (120, 40, 40));
        for (q, _) in d.dev.entries() {
            assert_eq!(d.qrels.relevant(q).len(), 250);
        }
    }

    #[test]
    fn equal_seeds_equal_output() {
        let spec = SyntheticSpec {
            passages_per_cluster: 20,
            ..SyntheticSpec::default()
        };
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = SyntheticSpec {
            seed: 8,
            ..spec.clone()
        };
        assert_ne!(
            generate_synthetic(&spec).unwrap().corpus,
            generate_synthetic(&other).unwrap().corpus
        );
    }

    #[test]
    fn noiseless_bag_of_words_is_perfect() {
        let spec = SyntheticSpec {
            noise_token_rate: 0.0,
            passages_per_cluster: 30,
            ..SyntheticSpec::default()
        };
        let d = generate_synthetic(&spec).unwrap();
        let bags: Vec<HashSet<&str>> = d.corpus.texts().map(|t| t.split(' ').collect()).collect();
        for (qid, text) in d.dev.entries() {
            let words: HashSet<&str> = text.split(' ').collect();
            let best = bags
                .iter()
                .enumerate()
                .max_by_key(|(i, b)| (b.intersection(&words).count(), std::cmp::Reverse(*i)))
                .unwrap()
                .0;
            assert!(d.qrels.is_relevant(qid, d.corpus.get(best).0));
        }
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let spec = SyntheticSpec {
            noise_token_rate: 1.0,
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic(&spec).is_err());
    }
}
