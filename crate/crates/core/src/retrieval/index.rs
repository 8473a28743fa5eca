use std::collections::HashSet;

use rayon::prelude::*;

use super::run::{rank_order, RankedList};
use crate::encoders::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::numerics::kernels;

/// Exact inner-product index over encoded passages.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    passage_ids: Vec<String>,
    matrix: EmbeddingMatrix,
}

impl EmbeddingIndex {
    pub fn new(passage_ids: Vec<String>, matrix: EmbeddingMatrix) -> Result<Self> {
        if passage_ids.len() != matrix.rows() {
            return Err(Error::Shape(format!(
                "{} ids for {} embedding rows",
                passage_ids.len(),
                matrix.rows()
            )));
        }
        let mut seen = HashSet::with_capacity(passage_ids.len());
        if let Some(dup) = passage_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Input(format!("duplicate passage id {dup:?} in index")));
        }
        Ok(Self { passage_ids, matrix })
    }

    pub fn len(&self) -> usize {
        self.passage_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passage_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn passage_ids(&self) -> &[String] {
        &self.passage_ids
    }

    fn check(&self, query: &[f64], k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::Parameter("k must be at least 1".into()));
        }
        if query.len() != self.dim() {
            return Err(Error::Shape(format!(
                "query of dimension {} against index of dimension {}",
                query.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Top-k of rows `range` as `(row, score)`, best first.
    fn topk_rows(&self, query: &[f64], k: usize, range: std::ops::Range<usize>) -> Vec<(usize, f64)> {
        let mut scored: Vec<(usize, f64)> = range.map(|i| (i, kernels::dot(query, self.matrix.row(i)))).collect();
        let cmp = |a: &(usize, f64), b: &(usize, f64)| {
            rank_order((&self.passage_ids[a.0], a.1), (&self.passage_ids[b.0], b.1))
        };
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        scored
    }

    fn to_list(&self, query_id: &str, rows: Vec<(usize, f64)>) -> Result<RankedList> {
        RankedList::from_scored(
            query_id,
            rows.into_iter()
                .map(|(i, s)| (self.passage_ids[i].clone(), s))
                .collect(),
        )
    }

    /// The `k` highest inner-product passages (all of them when the index is
    /// smaller), ties broken by ascending passage id.
    pub fn search_topk(&self, query_id: &str, query: &[f64], k: usize) -> Result<RankedList> {
        self.check(query, k)?;
        let rows = self.topk_rows(query, k, 0..self.len());
        self.to_list(query_id, rows)
    }

    /// Same result as [`search_topk`](Self::search_topk), computed over
    /// `shards` contiguous slices in parallel and merged.
    pub fn search_topk_sharded(&self, query_id: &str, query: &[f64], k: usize, shards: usize) -> Result<RankedList> {
        self.check(query, k)?;
        let shards = shards.clamp(1, self.len().max(1));
        let size = self.len().div_ceil(shards);
        let partial: Vec<Vec<(usize, f64)>> = (0..shards)
            .into_par_iter()
            .map(|s| self.topk_rows(query, k, s * size..((s + 1) * size).min(self.len())))
            .collect();
        let mut merged: Vec<(usize, f64)> = partial.into_iter().flatten().collect();
        merged.sort_by(|a, b| rank_order((&self.passage_ids[a.0], a.1), (&self.passage_ids[b.0], b.1)));
        merged.truncate(k);
        self.to_list(query_id, merged)
    }

    /// Searches many queries in parallel; output follows input order.
    pub fn search_batch(&self, queries: &[(String, Vec<f64>)], k: usize) -> Result<Vec<RankedList>> {
        queries.par_iter().map(|(id, v)| self.search_topk(id, v, k)).collect()
    }
}
