//! Exact top-k search, TREC run and qrels files, and ranking metrics.

mod index;
pub mod metrics;
mod qrels;
mod run;

pub use index::EmbeddingIndex;
pub use metrics::{evaluate, map_at_k, mrr_at_k, ndcg_at_k, recall_at_k, Metric, MetricValue};
pub use qrels::{format_qrels, load_qrels, parse_qrels, write_qrels, Qrels};
pub use run::{format_run, load_run, parse_run, rank_order, write_run, RankedEntry, RankedList};
