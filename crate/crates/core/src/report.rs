//! Issue selection and the text / structured report formats.
//!
//! Structured reports are a single JSON object, stable under
//! [`SCHEMA_VERSION`]:
//!
//! ```text
//! { schema_version, config, duration, threads, routines, subjects,
//!   issues: [{ tier, kind, score, subject, fix, evidence }], unattributed,
//!   memory_accesses }
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::analyzer::{Analysis, Diagnostics};
use crate::config::{AnalyzerConfig, Thresholds};
use crate::page::PageSpan;
use crate::registry::{ObjectCounters, ObjectId, Origin};
use crate::score::{
    compute_object_scores, suggest_assignment, suggest_fix, FixStrategy, IssueKind, Scores,
    SharingSplit,
};
use crate::sync::{migration_score, routine_access_totals, ThreadStats};
use crate::trace::{callsite_name, CallsiteId, DurationStats, RoutineId, ThreadId};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Reported,
    /// Below threshold but within a factor of ten of it.
    Informational,
}

/// Tier for `score` against `threshold`, or `None` when it is not worth listing.
pub fn tier_for(score: f64, threshold: f64) -> Option<Tier> {
    if score >= threshold {
        Some(Tier::Reported)
    } else if score > 0.0 && score >= threshold / 10.0 {
        Some(Tier::Informational)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Subject {
    AllocationSite { callsite: CallsiteId, site: String },
    Global { name: String },
    WholeProgram,
}

impl Subject {
    pub fn label(&self) -> String {
        match self {
            Subject::AllocationSite { site, .. } => site.clone(),
            Subject::Global { name } => format!("global {name}"),
            Subject::WholeProgram => "whole program".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanEntry {
    pub page: u64,
    /// `[first tid, last tid]`, or `None` below the page detail threshold.
    pub threads: Option<(ThreadId, ThreadId)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutineEntry {
    pub routine: RoutineId,
    pub threads: u64,
    pub total_accesses: u64,
    pub per_thread_mean: f64,
    /// Percentage of all attributed accesses.
    pub proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Evidence {
    Object {
        counters: ObjectCounters,
        block_estimated_remote: u64,
        remote_score: f64,
        false_sharing_score: f64,
        true_sharing_score: f64,
        sharing_split: SharingSplit,
        page_spans: Vec<SpanEntry>,
    },
    Migration {
        parallel_fraction: f64,
        total_migrations: u64,
        threads: usize,
        duration_s: f64,
    },
    Imbalance {
        routines: Vec<RoutineEntry>,
        max_min_ratio: f64,
        thread_budget: u64,
        /// Threads per routine, in the order of `routines`.
        suggested_assignment: Option<Vec<u64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Issue {
    pub tier: Tier,
    pub kind: IssueKind,
    pub score: f64,
    pub subject: Subject,
    pub fix: FixStrategy,
    pub evidence: Evidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSummary {
    pub subject: Subject,
    pub objects: u64,
    pub counters: ObjectCounters,
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreadSummary {
    pub count: usize,
    pub parallel_ns: u64,
    pub parallel_fraction: f64,
    pub migration_score: f64,
    pub per_thread: Vec<ThreadStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub analyzer: AnalyzerConfig,
    /// Which threads divide the sharing scores.
    pub sharing_thread_denominator: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IssueReport {
    pub schema_version: u32,
    pub config: ReportConfig,
    pub duration: Option<DurationStats>,
    pub threads: ThreadSummary,
    pub routines: Vec<RoutineEntry>,
    pub subjects: Vec<SubjectSummary>,
    pub issues: Vec<Issue>,
    pub unattributed: Diagnostics,
    pub memory_accesses: u64,
}

impl IssueReport {
    pub fn reported(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.tier == Tier::Reported)
    }

    pub fn informational(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.tier == Tier::Informational)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

fn collapse_spans(spans: Vec<PageSpan>) -> Vec<SpanEntry> {
    let mut by_page: BTreeMap<u64, Option<(ThreadId, ThreadId)>> = BTreeMap::new();
    for s in spans {
        by_page.entry(s.page_number).or_insert(s.span);
    }
    by_page
        .into_iter()
        .map(|(page, threads)| SpanEntry { page, threads })
        .collect()
}

struct SubjectData {
    subject: Subject,
    objects: Vec<ObjectId>,
    counters: ObjectCounters,
}

fn subjects(analysis: &Analysis) -> Vec<SubjectData> {
    let mut heap: BTreeMap<CallsiteId, SubjectData> = BTreeMap::new();
    let mut globals: Vec<SubjectData> = Vec::new();
    for o in analysis.registry.objects() {
        match &o.origin {
            Origin::Heap { callsite } => {
                let e = heap.entry(*callsite).or_insert_with(|| SubjectData {
                    subject: Subject::AllocationSite {
                        callsite: *callsite,
                        site: callsite_name(&analysis.callsites, *callsite),
                    },
                    objects: Vec::new(),
                    counters: ObjectCounters::default(),
                });
                e.objects.push(o.id);
                e.counters.absorb(&o.counters);
            }
            Origin::Global { name } => globals.push(SubjectData {
                subject: Subject::Global { name: name.clone() },
                objects: vec![o.id],
                counters: o.counters,
            }),
        }
    }
    heap.into_values().chain(globals).collect()
}

fn routine_entries(threads: &[ThreadStats]) -> Vec<RoutineEntry> {
    let grand: u64 = threads.iter().map(|t| t.access_count).sum();
    routine_access_totals(threads)
        .into_iter()
        .map(|(routine, t)| RoutineEntry {
            routine,
            threads: t.thread_count,
            total_accesses: t.total_accesses,
            per_thread_mean: t.per_thread_mean(),
            proportion: if grand == 0 {
                0.0
            } else {
                100.0 * t.total_accesses as f64 / grand as f64
            },
        })
        .collect()
}

pub fn build_report(analysis: &Analysis) -> IssueReport {
    let cfg = analysis.config;
    let th: Thresholds = cfg.thresholds;
    let threads: Vec<ThreadStats> = analysis.sync.threads().values().cloned().collect();
    let tids: Vec<ThreadId> = threads.iter().map(|t| t.tid).collect();
    let thread_count = analysis.thread_count();
    let phase = analysis.sync.phase();
    let routines = routine_entries(&threads);

    let mut issues = Vec::new();
    let mut summaries = Vec::new();
    let mut migration = 0.0;

    if let Some(duration) = analysis.duration {
        for s in subjects(analysis) {
            let scores = compute_object_scores(&s.counters, duration.duration_ms, thread_count);
            if let Some(kind) = scores.dominant_issue {
                let score = scores.score_of(kind);
                let min = match kind {
                    IssueKind::RemoteAccess => th.remote_min,
                    _ => th.sharing_min,
                };
                if let Some(tier) = tier_for(score, min) {
                    let mut spans = Vec::new();
                    let mut block_estimated_remote = 0;
                    for id in &s.objects {
                        spans.extend(analysis.page_thread_spans(*id).unwrap_or_default());
                        block_estimated_remote += analysis.object_remote_count(*id).unwrap_or(0);
                    }
                    let fix = suggest_fix(&scores, &s.counters, &spans, &tids, &th);
                    issues.push(Issue {
                        tier,
                        kind,
                        score,
                        subject: s.subject.clone(),
                        fix,
                        evidence: Evidence::Object {
                            counters: s.counters,
                            block_estimated_remote,
                            remote_score: scores.remote_score,
                            false_sharing_score: scores.false_sharing_score,
                            true_sharing_score: scores.true_sharing_score,
                            sharing_split: scores.split,
                            page_spans: collapse_spans(spans),
                        },
                    });
                }
            }
            summaries.push(SubjectSummary {
                subject: s.subject,
                objects: s.objects.len() as u64,
                counters: s.counters,
                scores,
            });
        }

        migration = migration_score(&threads, &phase, duration.duration_s);
        if let Some(tier) = tier_for(migration, th.migration_min) {
            issues.push(Issue {
                tier,
                kind: IssueKind::ThreadMigration,
                score: migration,
                subject: Subject::WholeProgram,
                fix: FixStrategy::ThreadBinding,
                evidence: Evidence::Migration {
                    parallel_fraction: phase.p,
                    total_migrations: threads.iter().map(ThreadStats::migrations).sum(),
                    threads: threads.len(),
                    duration_s: duration.duration_s,
                },
            });
        }

        let workers: Vec<&RoutineEntry> = routines
            .iter()
            .filter(|r| r.routine != RoutineId::MAIN)
            .collect();
        if workers.len() >= 2 {
            let max = workers.iter().map(|r| r.per_thread_mean).fold(0.0, f64::max);
            let min = workers
                .iter()
                .map(|r| r.per_thread_mean)
                .fold(f64::INFINITY, f64::min);
            let ratio = max / min.max(1.0);
            let budget = tids.iter().filter(|t| **t != ThreadId::MAIN).count() as u64;
            let totals: BTreeMap<RoutineId, u64> =
                workers.iter().map(|r| (r.routine, r.total_accesses)).collect();
            let suggested = suggest_assignment(&totals, budget)
                .ok()
                .map(|m| workers.iter().map(|r| m[&r.routine]).collect());
            if let Some(tier) = tier_for(ratio, th.imbalance_ratio) {
                issues.push(Issue {
                    tier,
                    kind: IssueKind::ThreadImbalance,
                    score: ratio,
                    subject: Subject::WholeProgram,
                    fix: FixStrategy::AdjustThreads,
                    evidence: Evidence::Imbalance {
                        routines: workers.into_iter().cloned().collect(),
                        max_min_ratio: ratio,
                        thread_budget: budget,
                        suggested_assignment: suggested,
                    },
                });
            }
        }
    }

    issues.sort_by(|a, b| {
        a.tier
            .cmp(&b.tier)
            .then(a.kind.cmp(&b.kind))
            .then(b.score.total_cmp(&a.score))
            .then_with(|| a.subject.cmp(&b.subject))
    });

    IssueReport {
        schema_version: SCHEMA_VERSION,
        config: ReportConfig {
            analyzer: cfg,
            sharing_thread_denominator: "all_threads".into(),
        },
        duration: analysis.duration,
        threads: ThreadSummary {
            count: thread_count,
            parallel_ns: phase.parallel_ns,
            parallel_fraction: phase.p,
            migration_score: migration,
            per_thread: threads,
        },
        routines,
        subjects: summaries,
        issues,
        unattributed: analysis.diagnostics,
        memory_accesses: analysis.memory_accesses,
    }
}

const MAX_SPANS_SHOWN: usize = 16;

fn render_spans(out: &mut String, spans: &[SpanEntry]) {
    let mut shown: Vec<String> = Vec::new();
    for s in spans {
        let text = match s.threads {
            Some((a, b)) if a == b => format!("{a}"),
            Some((a, b)) => format!("{a}--{b}"),
            None => "?".into(),
        };
        if shown.last() != Some(&text) {
            shown.push(text);
        }
    }
    let more = shown.len() > MAX_SPANS_SHOWN;
    shown.truncate(MAX_SPANS_SHOWN);
    let _ = write!(out, "    {}", shown.join(", "));
    if more {
        out.push_str(" ......");
    }
    out.push('\n');
}

fn render_issue(out: &mut String, n: usize, issue: &Issue) {
    let _ = writeln!(out, "[{n}] {} (score {:.2})", issue.kind.label(), issue.score);
    match &issue.evidence {
        Evidence::Object {
            counters,
            remote_score,
            false_sharing_score,
            true_sharing_score,
            sharing_split,
            page_spans,
            ..
        } => {
            let _ = writeln!(out, "Allocation Site: {}", issue.subject.label());
            let _ = writeln!(out, "Remote score: {remote_score:.0}");
            let _ = writeln!(out, "False sharing score: {false_sharing_score:.2}");
            let _ = writeln!(out, "True Sharing score: {true_sharing_score:.2}");
            match sharing_split {
                SharingSplit::Exact => {}
                SharingSplit::Estimated => {
                    out.push_str("    (false/true split estimated from classified invalidations)\n")
                }
                SharingSplit::Unclassified => {
                    out.push_str("    (no invalidations classified; counted as true sharing)\n")
                }
            }
            if page_spans.iter().any(|s| s.threads.is_some()) {
                out.push_str("Pages accessed by threads:\n");
                render_spans(out, page_spans);
            }
            let _ = writeln!(
                out,
                "Continuous reads after the last write: {}",
                counters.reads_after_last_write
            );
        }
        Evidence::Migration {
            parallel_fraction,
            total_migrations,
            threads,
            duration_s,
        } => {
            let _ = writeln!(
                out,
                "Possible migrations: {total_migrations} over {threads} threads, {duration_s:.3} s, parallel phase {:.1}%",
                parallel_fraction * 100.0
            );
        }
        Evidence::Imbalance {
            routines,
            suggested_assignment,
            ..
        } => {
            let props: Vec<String> = routines.iter().map(|r| format!("{:.2}", r.proportion)).collect();
            let ids: Vec<String> = routines.iter().map(|r| r.routine.to_string()).collect();
            let _ = writeln!(out, "Thread types: {}", ids.join(" : "));
            let _ = writeln!(out, "Memory access proportion: {}", props.join(" : "));
            if let Some(s) = suggested_assignment {
                let v: Vec<String> = s.iter().map(u64::to_string).collect();
                let _ = writeln!(out, "Suggested thread assignment: {}", v.join(" : "));
            }
        }
    }
    let _ = writeln!(out, "Fix strategy: {}\n", issue.fix.label());
}

pub fn render_text(report: &IssueReport) -> String {
    let mut out = String::new();
    match report.duration {
        Some(d) => {
            let _ = writeln!(
                out,
                "Trace: {:.3} ms, {} threads, parallel phase {:.1}%, {} memory accesses",
                d.duration_ms,
                report.threads.count,
                report.threads.parallel_fraction * 100.0,
                report.memory_accesses
            );
        }
        None => out.push_str("Trace: empty\n"),
    }
    let u = &report.unattributed;
    if u.unattributed_accesses + u.dead_object_accesses + u.straddling_accesses > 0 {
        let _ = writeln!(
            out,
            "Unattributed accesses: {} (freed-object: {}, straddling: {})",
            u.unattributed_accesses, u.dead_object_accesses, u.straddling_accesses
        );
    }
    out.push('\n');

    let reported: Vec<&Issue> = report.reported().collect();
    let _ = writeln!(out, "=== Issues ({}) ===\n", reported.len());
    for (i, issue) in reported.iter().enumerate() {
        render_issue(&mut out, i + 1, issue);
    }
    let info: Vec<&Issue> = report.informational().collect();
    if !info.is_empty() {
        let _ = writeln!(out, "=== Below threshold (informational, {}) ===\n", info.len());
        for (i, issue) in info.iter().enumerate() {
            render_issue(&mut out, i + 1, issue);
        }
    }
    out
}
