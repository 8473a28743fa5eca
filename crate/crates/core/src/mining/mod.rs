//! Hard-negative mining, answer-based false-negative filtering, and the
//! selection of confusing queries for data-progressive distillation.

mod groups_file;
mod select;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use groups_file::{format_groups, load_groups, parse_groups, write_groups};
pub use select::{
    positive_ranks, select_confusing_queries, ConfusionDataset, ConfusionFilter, FilterMode, PositiveRanks, RankWindow,
    SelectionCounters,
};

use crate::data::{Answers, Corpus, QuerySet};
use crate::encoders::{encode_corpus, fnv1a64, tokenize, DualEncoder, EncoderConfig, TokenSequence};
use crate::error::{Error, Result};
use crate::losses::{Candidate, CandidateGroup};
use crate::retrieval::{EmbeddingIndex, Qrels, RankedList};

/// Passages tokenized once for a given encoder shape.
#[derive(Debug, Clone)]
pub struct TokenizedCorpus {
    ids: Vec<String>,
    texts: Vec<String>,
    tokens: Vec<TokenSequence>,
    position: HashMap<String, usize>,
}

impl TokenizedCorpus {
    pub fn new(corpus: &Corpus, config: &EncoderConfig) -> Self {
        let ids: Vec<String> = corpus.ids().map(str::to_string).collect();
        let position = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        Self {
            texts: corpus.texts().map(str::to_string).collect(),
            tokens: corpus
                .texts()
                .map(|t| tokenize(t, config.max_passage_len, config.vocab_size))
                .collect(),
            ids,
            position,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn tokens(&self) -> &[TokenSequence] {
        &self.tokens
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.position.get(id).copied()
    }

    pub fn text(&self, id: &str) -> Option<&str> {
        self.position(id).map(|i| self.texts[i].as_str())
    }

    pub fn candidate(&self, id: &str) -> Result<Candidate> {
        let i = self
            .position(id)
            .ok_or_else(|| Error::Input(format!("passage {id:?} is not in the corpus")))?;
        Ok(Candidate {
            id: id.to_string(),
            tokens: self.tokens[i].clone(),
        })
    }
}

/// A query split tokenized for a given encoder shape.
pub fn tokenize_queries(queries: &QuerySet, config: &EncoderConfig) -> Vec<(String, TokenSequence)> {
    queries
        .entries()
        .iter()
        .map(|(id, text)| (id.clone(), tokenize(text, config.max_query_len, config.vocab_size)))
        .collect()
}

/// Exact top-`depth` retrieval of every query with `model`; one list per
/// query in input order.
pub fn retrieve_all(
    model: &DualEncoder,
    corpus: &TokenizedCorpus,
    queries: &[(String, TokenSequence)],
    depth: usize,
) -> Result<Vec<RankedList>> {
    if corpus.is_empty() {
        return Err(Error::Input("cannot retrieve from an empty corpus".into()));
    }
    let matrix = encode_corpus(model, corpus.tokens())?;
    let index = EmbeddingIndex::new(corpus.ids().to_vec(), matrix)?;
    let embedded: Vec<(String, Vec<f64>)> = queries
        .par_iter()
        .map(|(id, q)| Ok((id.clone(), model.embed_query(q)?)))
        .collect::<Result<_>>()?;
    index.search_batch(&embedded, depth)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MiningConfig {
    pub depth_k: usize,
    pub sample_m: usize,
    pub seed: u64,
    pub answer_filter: bool,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            depth_k: 100,
            sample_m: 15,
            seed: 0,
            answer_filter: false,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth_k == 0 || self.sample_m == 0 {
            return Err(Error::Config("mining depth and sample size must be positive".into()));
        }
        if self.sample_m > self.depth_k {
            return Err(Error::Config(format!(
                "mining sample size {} exceeds retrieval depth {}",
                self.sample_m, self.depth_k
            )));
        }
        Ok(())
    }
}

/// Seed of the per-query random stream: FNV-1a over the little-endian seed
/// bytes followed by the query id bytes.
pub fn query_seed(seed: u64, query_id: &str) -> u64 {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(query_id.as_bytes());
    fnv1a64(&bytes)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MiningCounters {
    pub queries: usize,
    pub without_positive: usize,
    pub without_negatives: usize,
    pub answer_filtered: usize,
    pub groups: usize,
}

/// Groups in query-id order, the student's retrieval for each group, and
/// counters for the queries that were dropped.
#[derive(Debug, Clone)]
pub struct MiningOutcome {
    pub groups: Vec<CandidateGroup>,
    pub retrievals: Vec<RankedList>,
    pub counters: MiningCounters,
}

/// Picks the labeled positive of a query: uniformly among its
/// highest-grade judged passages that exist in the corpus.
pub fn choose_positive(
    qrels: &Qrels,
    corpus: &TokenizedCorpus,
    query_id: &str,
    rng: &mut ChaCha8Rng,
) -> Option<String> {
    let judged = qrels.judged(query_id)?;
    let present = || judged.iter().filter(|(p, &g)| g > 0 && corpus.position(p).is_some());
    let best = present().map(|(_, &g)| g).max()?;
    let top: Vec<&String> = present().filter(|(_, &g)| g == best).map(|(p, _)| p).collect();
    top.choose(rng).map(|p| p.to_string())
}

fn normalize_for_match(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Removes candidates whose text contains any answer string, compared
/// case-insensitively after collapsing whitespace.
pub fn filter_false_negatives<'a>(
    candidates: &RankedList,
    answers: &[String],
    text_of: impl Fn(&str) -> Option<&'a str>,
) -> Result<RankedList> {
    let needles: Vec<String> = answers
        .iter()
        .map(|a| normalize_for_match(a))
        .filter(|a| !a.is_empty())
        .collect();
    Ok(candidates.retain(|e| {
        let text = text_of(&e.passage_id).map(normalize_for_match).unwrap_or_default();
        !needles.iter().any(|n| text.contains(n.as_str()))
    }))
}

fn mine_one(
    retrieval: &RankedList,
    corpus: &TokenizedCorpus,
    query: &TokenSequence,
    qrels: &Qrels,
    answers: Option<&Vec<String>>,
    cfg: &MiningConfig,
) -> Result<(Option<CandidateGroup>, MiningCounters)> {
    let qid = retrieval.query_id();
    let mut counters = MiningCounters {
        queries: 1,
        ..MiningCounters::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(query_seed(cfg.seed, qid));
    let Some(positive) = choose_positive(qrels, corpus, qid, &mut rng) else {
        counters.without_positive = 1;
        return Ok((None, counters));
    };
    let mut pool = retrieval.retain(|e| !qrels.is_relevant(qid, &e.passage_id));
    if cfg.answer_filter {
        if let Some(a) = answers.filter(|a| !a.is_empty()) {
            let before = pool.len();
            pool = filter_false_negatives(&pool, a, |id| corpus.text(id))?;
            counters.answer_filtered = before - pool.len();
        }
    }
    let ids: Vec<&str> = pool.passage_ids().collect();
    if ids.is_empty() {
        counters.without_negatives = 1;
        return Ok((None, counters));
    }
    let sampled: Vec<&str> = ids
        .choose_multiple(&mut rng, cfg.sample_m.min(ids.len()))
        .copied()
        .collect();
    let negatives = sampled.iter().map(|id| corpus.candidate(id)).collect::<Result<_>>()?;
    let group = CandidateGroup::new(qid, query.clone(), corpus.candidate(&positive)?, negatives)?;
    counters.groups = 1;
    Ok((Some(group), counters))
}

/// Retrieves the top `depth_k` passages of every query with the student,
/// drops judged-relevant (and optionally answer-matching) passages, and
/// samples `sample_m` negatives per query without replacement.
pub fn mine_hard_negatives(
    student: &DualEncoder,
    corpus: &TokenizedCorpus,
    queries: &[(String, TokenSequence)],
    qrels: &Qrels,
    answers: &Answers,
    cfg: &MiningConfig,
) -> Result<MiningOutcome> {
    cfg.validate()?;
    let retrievals = retrieve_all(student, corpus, queries, cfg.depth_k)?;
    let mined: Vec<(Option<CandidateGroup>, MiningCounters)> = retrievals
        .par_iter()
        .zip(queries.par_iter())
        .map(|(r, (qid, q))| mine_one(r, corpus, q, qrels, answers.get(qid), cfg))
        .collect::<Result<_>>()?;
    let mut counters = MiningCounters::default();
    let mut paired = Vec::new();
    for ((group, c), retrieval) in mined.into_iter().zip(retrievals) {
        counters.queries += c.queries;
        counters.without_positive += c.without_positive;
        counters.without_negatives += c.without_negatives;
        counters.answer_filtered += c.answer_filtered;
        counters.groups += c.groups;
        if let Some(g) = group {
            paired.push((g, retrieval));
        }
    }
    paired.sort_by(|a, b| a.0.query_id.cmp(&b.0.query_id));
    let (groups, retrievals) = paired.into_iter().unzip();
    Ok(MiningOutcome {
        groups,
        retrievals,
        counters,
    })
}

/// Uniformly random negatives: `count` non-relevant passages per query,
/// used before any model exists to mine with.
pub fn random_negative_groups(
    corpus: &TokenizedCorpus,
    queries: &[(String, TokenSequence)],
    qrels: &Qrels,
    count: usize,
    seed: u64,
) -> Result<Vec<CandidateGroup>> {
    let mut groups = Vec::new();
    for (qid, q) in queries {
        let mut rng = ChaCha8Rng::seed_from_u64(query_seed(seed, qid));
        let Some(positive) = choose_positive(qrels, corpus, qid, &mut rng) else {
            continue;
        };
        let pool: Vec<&String> = corpus.ids().iter().filter(|p| !qrels.is_relevant(qid, p)).collect();
        if pool.is_empty() {
            continue;
        }
        let negatives = pool
            .choose_multiple(&mut rng, count.min(pool.len()))
            .map(|id| corpus.candidate(id))
            .collect::<Result<_>>()?;
        groups.push(CandidateGroup::new(
            qid.clone(),
            q.clone(),
            corpus.candidate(&positive)?,
            negatives,
        )?);
    }
    groups.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    Ok(groups)
}

/// Re-anchors a group on the highest-ranked judged-relevant passage of the
/// student's retrieval. Groups without a retrieved relevant passage keep
/// their positive.
pub fn anchor_positive(
    group: &CandidateGroup,
    retrieval: &RankedList,
    qrels: &Qrels,
    corpus: &TokenizedCorpus,
) -> Result<CandidateGroup> {
    let mut out = group.clone();
    if let Some(e) = retrieval
        .entries()
        .iter()
        .find(|e| qrels.is_relevant(&group.query_id, &e.passage_id))
    {
        out.positive = corpus.candidate(&e.passage_id)?;
    }
    Ok(out)
}
