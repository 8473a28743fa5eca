use std::cmp::Ordering;
use std::fmt;

use super::TokenizedCorpus;
use crate::encoders::{CrossEncoder, DualEncoder, Scorer};
use crate::error::{Error, Result};
use crate::losses::CandidateGroup;
use crate::retrieval::{rank_order, Qrels, RankedList};

/// Half-open rank interval `(lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankWindow {
    pub lo: usize,
    pub hi: usize,
}

impl RankWindow {
    pub fn new(lo: usize, hi: usize) -> Result<Self> {
        let w = Self { lo, hi };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lo >= self.hi {
            return Err(Error::Config(format!(
                "rank window ({}, {}] is empty",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    /// `None` stands for a rank beyond the retrieval depth and is never
    /// inside a window.
    pub fn contains(&self, rank: Option<usize>) -> bool {
        rank.is_some_and(|r| self.lo < r && r <= self.hi)
    }
}

impl fmt::Display for RankWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{}]", self.lo, self.hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterMode {
    WindowIntersection,
    /// Keep a query when the teacher's min-max normalized score of the
    /// positive beats the student's and both ranks are within `(0, hi]`.
    ScoreDominance,
}

impl FilterMode {
    pub fn name(self) -> &'static str {
        match self {
            FilterMode::WindowIntersection => "window_intersection",
            FilterMode::ScoreDominance => "score_dominance",
        }
    }
}

impl std::str::FromStr for FilterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "window_intersection" => Ok(FilterMode::WindowIntersection),
            "score_dominance" => Ok(FilterMode::ScoreDominance),
            other => Err(Error::Config(format!("unknown filter mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionFilter {
    pub student_window: RankWindow,
    pub teacher_window: RankWindow,
    pub mode: FilterMode,
}

impl Default for ConfusionFilter {
    fn default() -> Self {
        Self {
            student_window: RankWindow { lo: 1, hi: 15 },
            teacher_window: RankWindow { lo: 0, hi: 1 },
            mode: FilterMode::WindowIntersection,
        }
    }
}

impl ConfusionFilter {
    pub fn validate(&self) -> Result<()> {
        self.student_window.validate()?;
        self.teacher_window.validate()
    }

    pub fn accepts(&self, ranks: &PositiveRanks) -> bool {
        match self.mode {
            FilterMode::WindowIntersection => {
                self.student_window.contains(ranks.student_rank) && self.teacher_window.contains(ranks.teacher_rank)
            }
            FilterMode::ScoreDominance => {
                RankWindow {
                    lo: 0,
                    ..self.student_window
                }
                .contains(ranks.student_rank)
                    && RankWindow {
                        lo: 0,
                        ..self.teacher_window
                    }
                    .contains(ranks.teacher_rank)
                    && ranks.teacher_score > ranks.student_score
            }
        }
    }
}

impl fmt::Display for ConfusionFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "ST-{} & TT-{} {}",
            self.student_window,
            self.teacher_window,
            self.mode.name()
        )
    }
}

/// Where the positive lands for the student and the teacher.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositiveRanks {
    /// 1-based rank in the student's retrieval; `None` when not retrieved.
    pub student_rank: Option<usize>,
    /// 1-based rank of the positive in the teacher's rescored pool.
    pub teacher_rank: Option<usize>,
    /// Min-max normalized scores of the positive over the pool.
    pub student_score: f64,
    pub teacher_score: f64,
}

fn rank_in(ids: &[&str], scores: &[f64], target: usize) -> usize {
    1 + (0..ids.len())
        .filter(|&j| rank_order((ids[j], scores[j]), (ids[target], scores[target])) == Ordering::Less)
        .count()
}

fn min_max(scores: &[f64], i: usize) -> f64 {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        (scores[i] - lo) / (hi - lo)
    } else {
        0.0
    }
}

/// Ranks the group's positive in the student's retrieval and in the
/// teacher's rescoring of `{positive} ∪ retrieved non-relevant passages`.
pub fn positive_ranks(
    student: &DualEncoder,
    teacher: &CrossEncoder,
    group: &CandidateGroup,
    retrieval: &RankedList,
    corpus: &TokenizedCorpus,
    qrels: &Qrels,
) -> Result<PositiveRanks> {
    let pos = group.positive.id.as_str();
    let mut ids = vec![pos];
    ids.extend(
        retrieval
            .passage_ids()
            .filter(|&p| p != pos && !qrels.is_relevant(&group.query_id, p)),
    );
    let mut tokens = vec![&group.positive.tokens];
    for id in &ids[1..] {
        let i = corpus
            .position(id)
            .ok_or_else(|| Error::Input(format!("retrieved passage {id:?} is not in the corpus")))?;
        tokens.push(&corpus.tokens()[i]);
    }
    let teacher_scores = teacher.score_candidates(&group.query, &tokens)?;
    let student_scores = student.score_candidates(&group.query, &tokens)?;
    Ok(PositiveRanks {
        student_rank: retrieval.rank_of(pos),
        teacher_rank: Some(rank_in(&ids, &teacher_scores, 0)),
        student_score: min_max(&student_scores, 0),
        teacher_score: min_max(&teacher_scores, 0),
    })
}

/// The queries selected for one data-progressive iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionDataset {
    pub iteration: usize,
    pub groups: Vec<CandidateGroup>,
    /// Ranks at selection time, aligned with `groups`.
    pub ranks: Vec<PositiveRanks>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SelectionCounters {
    pub considered: usize,
    pub selected: usize,
    pub student_absent: usize,
    pub outside_student_window: usize,
    pub outside_teacher_window: usize,
    pub not_dominant: usize,
}

/// Keeps the groups whose positive passes `filter`, preserving order.
pub fn select_confusing_queries(
    records: Vec<(CandidateGroup, PositiveRanks)>,
    filter: &ConfusionFilter,
    iteration: usize,
) -> Result<(ConfusionDataset, SelectionCounters)> {
    filter.validate()?;
    let mut counters = SelectionCounters::default();
    let mut out = ConfusionDataset {
        iteration,
        groups: Vec::new(),
        ranks: Vec::new(),
    };
    for (group, ranks) in records {
        counters.considered += 1;
        if filter.accepts(&ranks) {
            counters.selected += 1;
            out.groups.push(group);
            out.ranks.push(ranks);
            continue;
        }
        let (sw, tw) = match filter.mode {
            FilterMode::WindowIntersection => (filter.student_window, filter.teacher_window),
            FilterMode::ScoreDominance => (
                RankWindow {
                    lo: 0,
                    ..filter.student_window
                },
                RankWindow {
                    lo: 0,
                    ..filter.teacher_window
                },
            ),
        };
        if ranks.student_rank.is_none() {
            counters.student_absent += 1;
        } else if !sw.contains(ranks.student_rank) {
            counters.outside_student_window += 1;
        } else if !tw.contains(ranks.teacher_rank) {
            counters.outside_teacher_window += 1;
        } else {
            counters.not_dominant += 1;
        }
    }
    Ok((out, counters))
}

impl SelectionCounters {
    pub fn report_line(&self, iteration: usize, filter: &ConfusionFilter) -> String {
        format!(
            "iteration={iteration} filter=\"{filter}\" considered={} selected={} student_absent={} outside_student_window={} outside_teacher_window={} not_dominant={}",
            self.considered,
            self.selected,
            self.student_absent,
            self.outside_student_window,
            self.outside_teacher_window,
            self.not_dominant
        )
    }
}
