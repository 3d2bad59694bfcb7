//! Seriousness scores, the cache-dominance rule, fix-strategy selection and
//! suggested thread assignments.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::Thresholds;
use crate::page::PageSpan;
use crate::registry::ObjectCounters;
use crate::trace::{RoutineId, ThreadId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueKind {
    RemoteAccess,
    FalseSharing,
    TrueSharing,
    ThreadMigration,
    ThreadImbalance,
}

impl IssueKind {
    pub fn label(self) -> &'static str {
        match self {
            IssueKind::RemoteAccess => "remote access",
            IssueKind::FalseSharing => "false sharing",
            IssueKind::TrueSharing => "true sharing",
            IssueKind::ThreadMigration => "thread migration",
            IssueKind::ThreadImbalance => "load imbalance",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixStrategy {
    BlockInterleave,
    PageInterleave,
    Padding,
    Duplicate,
    ThreadBinding,
    AdjustThreads,
}

impl FixStrategy {
    pub fn label(self) -> &'static str {
        match self {
            FixStrategy::BlockInterleave => "block interleave",
            FixStrategy::PageInterleave => "page interleave",
            FixStrategy::Padding => "padding",
            FixStrategy::Duplicate => "duplicate",
            FixStrategy::ThreadBinding => "bind threads round-robin across nodes",
            FixStrategy::AdjustThreads => "adjust thread assignment",
        }
    }
}

/// How the false/true split of an object's invalidations was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingSplit {
    /// Every invalidation was classified at word level.
    Exact,
    /// Some were unclassified; the classified ratio was applied to the total.
    Estimated,
    /// None were classified.
    Unclassified,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub remote_score: f64,
    pub false_sharing_score: f64,
    pub true_sharing_score: f64,
    pub reads_after_last_write: u64,
    pub split: SharingSplit,
    pub dominant_issue: Option<IssueKind>,
}

impl Scores {
    pub fn score_of(&self, kind: IssueKind) -> f64 {
        match kind {
            IssueKind::RemoteAccess => self.remote_score,
            IssueKind::FalseSharing => self.false_sharing_score,
            IssueKind::TrueSharing => self.true_sharing_score,
            _ => 0.0,
        }
    }
}

/// Remote accesses per millisecond, and invalidations per millisecond per
/// thread split into false and true sharing.
///
/// Unclassified invalidations take the classified false/true ratio; when
/// nothing was classified they are scored as true sharing.
pub fn compute_object_scores(c: &ObjectCounters, duration_ms: f64, thread_count: usize) -> Scores {
    let total = c.invalidations();
    let classified = c.false_invalidations + c.true_invalidations;
    let (est_false, est_true, split) = if total == 0 {
        (0.0, 0.0, SharingSplit::Exact)
    } else if classified == 0 {
        (0.0, total as f64, SharingSplit::Unclassified)
    } else {
        let f = total as f64 * c.false_invalidations as f64 / classified as f64;
        let split = if c.unclassified_invalidations == 0 {
            SharingSplit::Exact
        } else {
            SharingSplit::Estimated
        };
        (f, total as f64 - f, split)
    };
    let denom = duration_ms * thread_count.max(1) as f64;
    let dominant_issue = if total > 0 && total as f64 > 0.5 * c.remote_accesses as f64 {
        Some(if est_false >= est_true {
            IssueKind::FalseSharing
        } else {
            IssueKind::TrueSharing
        })
    } else if c.remote_accesses > 0 {
        Some(IssueKind::RemoteAccess)
    } else {
        None
    };
    Scores {
        remote_score: c.remote_accesses as f64 / duration_ms,
        false_sharing_score: est_false / denom,
        true_sharing_score: est_true / denom,
        reads_after_last_write: c.reads_after_last_write,
        split,
        dominant_issue,
    }
}

/// True when at least 80% of the detailed pages have a dominant span that
/// covers fewer than a quarter of the threads.
pub fn is_block_partitioned(spans: &[PageSpan], all_threads: &[ThreadId]) -> bool {
    let detailed: Vec<(ThreadId, ThreadId)> = spans.iter().filter_map(|s| s.span).collect();
    if detailed.is_empty() || all_threads.is_empty() {
        return false;
    }
    let narrow = detailed
        .iter()
        .filter(|(lo, hi)| {
            let covered = all_threads.iter().filter(|t| *t >= lo && *t <= hi).count();
            (covered as f64) < 0.25 * all_threads.len() as f64
        })
        .count();
    narrow as f64 >= 0.8 * detailed.len() as f64
}

pub fn suggest_fix(
    scores: &Scores,
    counters: &ObjectCounters,
    spans: &[PageSpan],
    all_threads: &[ThreadId],
    thresholds: &Thresholds,
) -> FixStrategy {
    match scores.dominant_issue {
        Some(IssueKind::FalseSharing) => return FixStrategy::Padding,
        Some(IssueKind::TrueSharing) => return FixStrategy::PageInterleave,
        _ => {}
    }
    let accesses = counters.accesses();
    if accesses > 0
        && counters.reads_after_last_write as f64
            >= thresholds.duplicate_read_fraction * accesses as f64
    {
        return FixStrategy::Duplicate;
    }
    if is_block_partitioned(spans, all_threads) {
        return FixStrategy::BlockInterleave;
    }
    FixStrategy::PageInterleave
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AssignmentError {
    #[error("need at least two thread types, got {0}")]
    TooFewRoutines(usize),
    #[error("thread budget {budget} is smaller than the {types} thread types")]
    BudgetTooSmall { budget: u64, types: usize },
}

/// Splits `budget` threads across routine types so that the heaviest
/// per-thread load (accesses / threads) is as small as possible, with at
/// least one thread per type.
///
/// Threads are handed out one at a time to the type whose current
/// per-thread load is highest; ties go to the lower routine id.
pub fn suggest_assignment(
    totals: &BTreeMap<RoutineId, u64>,
    budget: u64,
) -> Result<BTreeMap<RoutineId, u64>, AssignmentError> {
    let types = totals.len();
    if types < 2 {
        return Err(AssignmentError::TooFewRoutines(types));
    }
    if budget < types as u64 {
        return Err(AssignmentError::BudgetTooSmall { budget, types });
    }
    let weights: Vec<(RoutineId, u64)> = totals.iter().map(|(r, w)| (*r, *w)).collect();
    let mut counts = vec![1u64; types];
    // Compare w_i / n_i exactly via cross multiplication.
    let load_cmp = |i: usize, j: usize, counts: &[u64]| -> Ordering {
        let a = weights[i].1 as u128 * counts[j] as u128;
        let b = weights[j].1 as u128 * counts[i] as u128;
        a.cmp(&b)
    };
    for _ in types as u64..budget {
        let mut best = 0;
        for i in 1..types {
            if load_cmp(i, best, &counts) == Ordering::Greater {
                best = i;
            }
        }
        counts[best] += 1;
    }
    Ok(weights.iter().map(|w| w.0).zip(counts).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counters(remote: u64, fs: u64, ts: u64, un: u64) -> ObjectCounters {
        ObjectCounters {
            remote_accesses: remote,
            false_invalidations: fs,
            true_invalidations: ts,
            unclassified_invalidations: un,
            ..Default::default()
        }
    }

    #[test]
    fn remote_score_per_millisecond() {
        let s = compute_object_scores(&counters(7_390_000, 0, 0, 0), 1000.0, 16);
        assert_eq!(s.remote_score, 7390.0);
        assert_eq!(s.dominant_issue, Some(IssueKind::RemoteAccess));
    }

    #[test]
    fn empty_counters_score_zero() {
        let s = compute_object_scores(&ObjectCounters::default(), 10.0, 4);
        assert_eq!(s.remote_score, 0.0);
        assert_eq!(s.false_sharing_score, 0.0);
        assert_eq!(s.true_sharing_score, 0.0);
        assert_eq!(s.dominant_issue, None);
    }

    #[test]
    fn sharing_dominates_above_half_of_remote() {
        let s = compute_object_scores(&counters(1000, 600, 0, 0), 100.0, 8);
        assert_eq!(s.remote_score, 1000.0 / 100.0);
        assert_eq!(s.false_sharing_score, 600.0 / (100.0 * 8.0));
        assert_eq!(s.dominant_issue, Some(IssueKind::FalseSharing));
        let s = compute_object_scores(&counters(1000, 500, 0, 0), 100.0, 8);
        assert_eq!(s.dominant_issue, Some(IssueKind::RemoteAccess));
    }

    #[test]
    fn estimated_split_scales_classified_ratio() {
        let s = compute_object_scores(&counters(0, 30, 10, 60), 1.0, 1);
        assert_eq!(s.split, SharingSplit::Estimated);
        assert!((s.false_sharing_score - 75.0).abs() < 1e-9);
        assert!((s.true_sharing_score - 25.0).abs() < 1e-9);
        let s = compute_object_scores(&counters(0, 0, 0, 60), 1.0, 1);
        assert_eq!(s.split, SharingSplit::Unclassified);
        assert_eq!(s.dominant_issue, Some(IssueKind::TrueSharing));
    }

    fn span(page: u64, lo: u32, hi: u32) -> PageSpan {
        PageSpan {
            page_number: page,
            span: Some((ThreadId(lo), ThreadId(hi))),
        }
    }

    fn remote_only() -> Scores {
        compute_object_scores(&counters(100, 0, 0, 0), 1.0, 1)
    }

    #[test]
    fn partitioned_spans_pick_block_interleave() {
        let threads: Vec<ThreadId> = (0..=40).map(ThreadId).collect();
        let spans = [span(0, 0, 8), span(1, 8, 16), span(2, 16, 23), span(3, 23, 31)];
        let c = ObjectCounters {
            reads: 10,
            writes: 10,
            ..counters(100, 0, 0, 0)
        };
        assert_eq!(
            suggest_fix(&remote_only(), &c, &spans, &threads, &Thresholds::default()),
            FixStrategy::BlockInterleave
        );
        let wide = [span(0, 0, 40), span(1, 0, 40)];
        assert_eq!(
            suggest_fix(&remote_only(), &c, &wide, &threads, &Thresholds::default()),
            FixStrategy::PageInterleave
        );
    }

    #[test]
    fn read_mostly_picks_duplicate() {
        let c = ObjectCounters {
            reads: 2_443_582_804,
            writes: 1_000_000,
            reads_after_last_write: 2_443_582_804,
            ..counters(100, 0, 0, 0)
        };
        assert_eq!(
            suggest_fix(&remote_only(), &c, &[], &[ThreadId(0)], &Thresholds::default()),
            FixStrategy::Duplicate
        );
    }

    #[test]
    fn sharing_fixes() {
        let fs = compute_object_scores(&counters(0, 10, 0, 0), 1.0, 1);
        let ts = compute_object_scores(&counters(0, 0, 10, 0), 1.0, 1);
        let c = ObjectCounters::default();
        let t = Thresholds::default();
        assert_eq!(suggest_fix(&fs, &c, &[], &[], &t), FixStrategy::Padding);
        assert_eq!(suggest_fix(&ts, &c, &[], &[], &t), FixStrategy::PageInterleave);
    }

    fn assign(w: &[u64], budget: u64) -> Vec<u64> {
        let totals = w
            .iter()
            .enumerate()
            .map(|(i, w)| (RoutineId(i as u32 + 1), *w))
            .collect();
        suggest_assignment(&totals, budget).unwrap().into_values().collect()
    }

    #[test]
    fn assignment_examples() {
        assert_eq!(assign(&[1000, 2000], 3), vec![1, 2]);
        assert_eq!(assign(&[33, 19, 474, 753], 128), vec![4, 2, 47, 75]);
        assert_eq!(assign(&[5, 5, 5], 10), vec![4, 3, 3]);
    }

    #[test]
    fn assignment_errors() {
        let one: BTreeMap<_, _> = [(RoutineId(1), 10)].into();
        assert_eq!(
            suggest_assignment(&one, 4),
            Err(AssignmentError::TooFewRoutines(1))
        );
        let three: BTreeMap<_, _> = [(RoutineId(1), 1), (RoutineId(2), 1), (RoutineId(3), 1)].into();
        assert_eq!(
            suggest_assignment(&three, 2),
            Err(AssignmentError::BudgetTooSmall { budget: 2, types: 3 })
        );
    }
}
