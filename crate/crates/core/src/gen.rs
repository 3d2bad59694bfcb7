//! Deterministic synthetic traces with planted ground truth.
//!
//! Every pattern is built so its counters follow from the construction
//! itself: which thread touches each page first, which words each writer
//! hits, how many lock handoffs happen. The [`Manifest`] records those
//! planted values for the default analyzer geometry.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::AnalyzerConfig;
use crate::registry::ObjectCounters;
use crate::report::{tier_for, SpanEntry, Tier};
use crate::score::{FixStrategy, IssueKind};
use crate::trace::{
    AccessKind, BarrierId, CallsiteId, CondId, EventCounts, LockId, RoutineId, ThreadId,
    Timestamp, TraceError, TraceEvent, TraceWriter,
};

const BASE: u64 = 0x1000_0000;
const SEGMENT: u64 = 0x1000_0000;
const PAGE: u64 = 4096;
const LINE: u64 = 64;
const WORD: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pattern {
    SingleThread,
    FalseSharing,
    TrueSharing,
    RemotePage,
    RemoteBlock,
    ReadMostly,
    MigrationHeavy,
    Imbalance,
    Mixed,
    Random,
}

impl Pattern {
    pub const ALL: [Pattern; 10] = [
        Pattern::SingleThread,
        Pattern::FalseSharing,
        Pattern::TrueSharing,
        Pattern::RemotePage,
        Pattern::RemoteBlock,
        Pattern::ReadMostly,
        Pattern::MigrationHeavy,
        Pattern::Imbalance,
        Pattern::Mixed,
        Pattern::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pattern::SingleThread => "single-thread",
            Pattern::FalseSharing => "false-sharing",
            Pattern::TrueSharing => "true-sharing",
            Pattern::RemotePage => "remote-page",
            Pattern::RemoteBlock => "remote-block",
            Pattern::ReadMostly => "read-mostly",
            Pattern::MigrationHeavy => "migration-heavy",
            Pattern::Imbalance => "imbalance",
            Pattern::Mixed => "mixed",
            Pattern::Random => "random",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pattern {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Pattern::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Pattern::ALL.iter().map(|p| p.name()).collect();
                format!("unknown pattern `{s}` (expected one of {})", names.join(", "))
            })
    }
}

/// Generator knobs. Not every pattern reads every field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    /// Thread count including the main thread.
    pub threads: u32,
    /// Approximate number of payload memory accesses.
    pub accesses: u64,
    /// Distance between the first and last timestamp.
    pub span_ns: u64,
    pub pages: u64,
    /// Lock contentions planted per thread.
    pub contentions: u64,
    /// Fraction of the span during which worker threads are live.
    pub parallel_fraction: f64,
    /// Relative access totals for each routine type (imbalance).
    pub totals: Vec<u64>,
    /// Accesses per unit of `totals`.
    pub unit: u64,
    pub threads_per_type: u32,
    /// Accesses by the main thread (imbalance).
    pub main_accesses: u64,
    pub seed: u64,
}

impl GenParams {
    pub fn defaults(pattern: Pattern) -> GenParams {
        let base = GenParams {
            threads: 9,
            accesses: 64_000,
            span_ns: 20_000_000,
            pages: 64,
            contentions: 0,
            parallel_fraction: 1.0,
            totals: Vec::new(),
            unit: 10,
            threads_per_type: 2,
            main_accesses: 0,
            seed: 0,
        };
        match pattern {
            Pattern::SingleThread => GenParams {
                threads: 1,
                accesses: 1000,
                span_ns: 100_000_000,
                pages: 4,
                ..base
            },
            Pattern::FalseSharing | Pattern::TrueSharing => GenParams {
                threads: 3,
                accesses: 2000,
                span_ns: 100_000_000,
                pages: 1,
                ..base
            },
            Pattern::RemotePage | Pattern::ReadMostly => GenParams { pages: 16, ..base },
            Pattern::RemoteBlock => base,
            Pattern::MigrationHeavy => GenParams {
                threads: 4,
                accesses: 0,
                span_ns: 500_000_000,
                pages: 1,
                contentions: 100,
                ..base
            },
            Pattern::Imbalance => GenParams {
                threads: 7,
                span_ns: 100_000_000,
                pages: 1,
                totals: vec![922, 3, 34],
                main_accesses: 410,
                ..base
            },
            Pattern::Mixed => GenParams {
                span_ns: 100_000_000,
                contentions: 5,
                ..base
            },
            Pattern::Random => GenParams {
                threads: 8,
                accesses: 20_000,
                span_ns: 100_000_000,
                ..base
            },
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, GenError> {
    Err(GenError::InvalidParams(msg.into()))
}

/// Planted counters of one allocation site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSubject {
    pub callsite: CallsiteId,
    pub site: String,
    pub counters: ObjectCounters,
    /// Dominant thread range of each page, when the construction fixes it.
    pub page_spans: Option<Vec<SpanEntry>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedIssue {
    pub tier: Tier,
    pub kind: IssueKind,
    pub fix: FixStrategy,
    pub score: f64,
}

/// Side file written next to a generated trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub pattern: Pattern,
    pub params: GenParams,
    /// Analyzer settings the planted values assume.
    pub config: AnalyzerConfig,
    pub event_counts: EventCounts,
    pub first_ts: Timestamp,
    pub last_ts: Timestamp,
    pub thread_count: usize,
    pub callsites: BTreeMap<CallsiteId, String>,
    /// Empty for the random pattern, whose truth is left to oracles.
    pub subjects: Vec<PlantedSubject>,
    pub migrations: Option<BTreeMap<ThreadId, u64>>,
    pub parallel_fraction: Option<f64>,
    pub migration_score: Option<f64>,
    pub routine_totals: Option<BTreeMap<RoutineId, u64>>,
    /// Issues the default configuration must report, in report order.
    pub expected_issues: Option<Vec<ExpectedIssue>>,
}

impl Manifest {
    pub fn subject(&self, callsite: CallsiteId) -> Option<&PlantedSubject> {
        self.subjects.iter().find(|s| s.callsite == callsite)
    }

    pub fn duration_ms(&self) -> f64 {
        ((self.last_ts.0 - self.first_ts.0) as f64 / 1e6).max(1.0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

/// Destination of generated records.
pub trait EventSink {
    fn callsite(&mut self, id: CallsiteId, source: &str) -> Result<(), TraceError>;
    fn event(&mut self, ev: &TraceEvent) -> Result<(), TraceError>;
}

impl<W: Write> EventSink for TraceWriter<W> {
    fn callsite(&mut self, id: CallsiteId, source: &str) -> Result<(), TraceError> {
        TraceWriter::callsite(self, id, source)
    }

    fn event(&mut self, ev: &TraceEvent) -> Result<(), TraceError> {
        TraceWriter::event(self, ev)
    }
}

/// Collects everything in memory.
#[derive(Debug, Default)]
pub struct VecSink {
    pub callsites: BTreeMap<CallsiteId, String>,
    pub events: Vec<TraceEvent>,
}

impl EventSink for VecSink {
    fn callsite(&mut self, id: CallsiteId, source: &str) -> Result<(), TraceError> {
        self.callsites.insert(id, source.to_string());
        Ok(())
    }

    fn event(&mut self, ev: &TraceEvent) -> Result<(), TraceError> {
        self.events.push(ev.clone());
        Ok(())
    }
}

struct NullSink;

impl EventSink for NullSink {
    fn callsite(&mut self, _: CallsiteId, _: &str) -> Result<(), TraceError> {
        Ok(())
    }

    fn event(&mut self, _: &TraceEvent) -> Result<(), TraceError> {
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Inv {
    None,
    False,
    True,
    Unclassified,
}

#[derive(Default)]
struct Truth {
    subjects: BTreeMap<CallsiteId, PlantedSubject>,
    routine_of: BTreeMap<ThreadId, RoutineId>,
    routine_totals: BTreeMap<RoutineId, u64>,
    migrations: BTreeMap<ThreadId, u64>,
    live_from: Option<u64>,
    /// (addr, size, reads after the object's last write)
    objects: Vec<(u64, u64, u64)>,
}

/// Assigns timestamps: fixed events carry their own, payload events are
/// spread evenly and strictly increasing over a window.
struct Emitter<'a> {
    sink: &'a mut dyn EventSink,
    counts: EventCounts,
    first_ts: Option<u64>,
    last_ts: u64,
    lo: u64,
    hi: u64,
    planned: u64,
    index: u64,
    callsites: BTreeMap<CallsiteId, String>,
    truth: Truth,
}

impl<'a> Emitter<'a> {
    fn new(sink: &'a mut dyn EventSink, planned: u64) -> Self {
        let mut truth = Truth::default();
        truth.routine_of.insert(ThreadId::MAIN, RoutineId::MAIN);
        Emitter {
            sink,
            counts: EventCounts::default(),
            first_ts: None,
            last_ts: 0,
            lo: 0,
            hi: 0,
            planned,
            index: 0,
            callsites: BTreeMap::new(),
            truth,
        }
    }

    fn window(&mut self, lo: u64, hi: u64) -> Result<(), GenError> {
        if self.planned > 0 && (hi < lo || hi - lo < self.planned - 1) {
            return invalid(format!(
                "span too short: {} events need at least {} ns",
                self.planned,
                self.planned + 1
            ));
        }
        self.lo = lo;
        self.hi = hi;
        Ok(())
    }

    fn ts(&mut self) -> Timestamp {
        let i = self.index;
        self.index += 1;
        if self.planned <= 1 {
            return Timestamp(self.lo);
        }
        let step = (self.hi - self.lo) as u128;
        Timestamp(self.lo + (i as u128 * step / (self.planned - 1) as u128) as u64)
    }

    fn emit(&mut self, ev: TraceEvent) -> Result<(), GenError> {
        if let Some(ts) = ev.ts() {
            self.first_ts.get_or_insert(ts.0);
            self.last_ts = self.last_ts.max(ts.0);
        }
        self.counts.add(ev.kind());
        self.sink.event(&ev)?;
        Ok(())
    }

    fn callsite(&mut self, id: u32, source: &str) -> Result<CallsiteId, GenError> {
        let id = CallsiteId(id);
        self.sink.callsite(id, source)?;
        self.callsites.insert(id, source.to_string());
        self.truth.subjects.insert(
            id,
            PlantedSubject {
                callsite: id,
                site: source.to_string(),
                counters: ObjectCounters::default(),
                page_spans: None,
            },
        );
        Ok(id)
    }

    fn spawn(&mut self, ts: u64, tid: u32, routine: u32) -> Result<(), GenError> {
        let tid = ThreadId(tid);
        self.truth.routine_of.insert(tid, RoutineId(routine));
        self.truth.live_from = Some(self.truth.live_from.map_or(ts, |t| t.min(ts)));
        self.emit(TraceEvent::ThreadCreate {
            ts: Timestamp(ts),
            tid,
            parent: ThreadId::MAIN,
            routine: RoutineId(routine),
        })
    }

    fn exit_all(&mut self, ts: u64) -> Result<(), GenError> {
        let tids: Vec<ThreadId> = self
            .truth
            .routine_of
            .keys()
            .copied()
            .filter(|t| *t != ThreadId::MAIN)
            .collect();
        for tid in tids {
            self.emit(TraceEvent::ThreadExit {
                ts: Timestamp(ts),
                tid,
            })?;
        }
        Ok(())
    }

    fn alloc(&mut self, ts: u64, tid: u32, addr: u64, size: u64, cs: CallsiteId) -> Result<(), GenError> {
        self.truth.objects.push((addr, size, 0));
        self.emit(TraceEvent::Alloc {
            ts: Timestamp(ts),
            tid: ThreadId(tid),
            addr,
            size,
            callsite: cs,
        })
    }

    fn free(&mut self, ts: u64, addr: u64) -> Result<(), GenError> {
        self.emit(TraceEvent::Free {
            ts: Timestamp(ts),
            tid: ThreadId::MAIN,
            addr,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn access(
        &mut self,
        tid: u32,
        kind: AccessKind,
        addr: u64,
        size: u32,
        cs: CallsiteId,
        remote: bool,
        inv: Inv,
    ) -> Result<(), GenError> {
        let ts = self.ts();
        let tid = ThreadId(tid);
        let rid = self.truth.routine_of.get(&tid).copied().unwrap_or(RoutineId::MAIN);
        *self.truth.routine_totals.entry(rid).or_insert(0) += 1;
        let obj = self
            .truth
            .objects
            .iter_mut()
            .find(|(a, s, _)| (*a..*a + *s).contains(&addr))
            .expect("planted access inside an object");
        let c = &mut self.truth.subjects.get_mut(&cs).expect("callsite declared").counters;
        match kind {
            AccessKind::Read => {
                c.reads += 1;
                c.reads_after_last_write += 1;
                obj.2 += 1;
            }
            AccessKind::Write => {
                c.writes += 1;
                c.reads_after_last_write -= obj.2;
                obj.2 = 0;
            }
        }
        if remote {
            c.remote_accesses += 1;
        }
        match inv {
            Inv::None => {}
            Inv::False => c.false_invalidations += 1,
            Inv::True => c.true_invalidations += 1,
            Inv::Unclassified => c.unclassified_invalidations += 1,
        }
        self.emit(TraceEvent::MemAccess {
            ts,
            tid,
            kind,
            addr,
            size,
        })
    }

    fn lock_op(&mut self, op: LockOp, tid: u32, lock: u64) -> Result<(), GenError> {
        let ts = self.ts();
        let (tid, lock) = (ThreadId(tid), LockId(lock));
        self.emit(match op {
            LockOp::Request => TraceEvent::LockRequest { ts, tid, lock },
            LockOp::Grant => TraceEvent::LockGrant { ts, tid, lock },
            LockOp::Release => TraceEvent::LockRelease { ts, tid, lock },
        })
    }

    fn contend(&mut self, tid: u32) {
        *self.truth.migrations.entry(ThreadId(tid)).or_insert(0) += 1;
    }

    fn set_spans(&mut self, cs: CallsiteId, spans: Vec<SpanEntry>) {
        self.truth.subjects.get_mut(&cs).expect("callsite declared").page_spans = Some(spans);
    }
}

#[derive(Clone, Copy)]
enum LockOp {
    Request,
    Grant,
    Release,
}

fn rng_for(params: &GenParams) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(params.seed)
}

fn pick_kind(rng: &mut ChaCha8Rng, write_p: f64) -> AccessKind {
    if rng.gen_bool(write_p) {
        AccessKind::Write
    } else {
        AccessKind::Read
    }
}

fn check_threads(p: &GenParams, min: u32) -> Result<u32, GenError> {
    if p.threads < min {
        return invalid(format!("needs at least {min} threads, got {}", p.threads));
    }
    Ok(p.threads)
}

/// Whether invalidation number `write_ordinal` (1-based write count of the
/// line) falls after word-level detail switched on.
fn classified(write_ordinal: u64, threshold: u64) -> bool {
    threshold == 0 || write_ordinal > threshold
}

fn single_thread(p: &GenParams, e: &mut Emitter) -> Result<(), GenError> {
    if p.threads != 1 {
        return invalid("single-thread takes exactly one thread");
    }
    let mut rng = rng_for(p);
    let cs = e.callsite(1, "single.c:12")?;
    let size = p.pages.max(1) * PAGE;
    e.alloc(0, 0, BASE, size, cs)?;
    e.window(1, p.span_ns.saturating_sub(1))?;
    for _ in 0..p.accesses {
        let kind = pick_kind(&mut rng, 0.3);
        let addr = BASE + rng.gen_range(0..size / WORD) * WORD;
        e.access(0, kind, addr, 8, cs, false, Inv::None)?;
    }
    e.free(p.span_ns, BASE)
}

/// Workers 1..=w write round-robin to one line; `same_word` selects true
/// over false sharing.
fn line_pingpong(
    p: &GenParams,
    e: &mut Emitter,
    cs: CallsiteId,
    base: u64,
    writers: u32,
    writes: u64,
    same_word: bool,
) -> Result<(), GenError> {
    let th = AnalyzerConfig::default().word_track_threshold;
    let _ = p;
    for k in 0..writes {
        let tid = 1 + (k % writers as u64) as u32;
        let word = if same_word { 0 } else { (tid - 1) as u64 };
        let inv = if k == 0 {
            Inv::None
        } else if !classified(k + 1, th) {
            Inv::Unclassified
        } else if same_word {
            Inv::True
        } else {
            Inv::False
        };
        e.access(tid, AccessKind::Write, base + word * WORD, 8, cs, tid != 1, inv)?;
    }
    Ok(())
}

fn sharing(p: &GenParams, e: &mut Emitter, same_word: bool) -> Result<(), GenError> {
    let threads = check_threads(p, 3)?;
    let writers = threads - 1;
    if !same_word && writers as u64 > LINE / WORD {
        return invalid(format!("false-sharing supports at most {} writers", LINE / WORD));
    }
    let cs = if same_word {
        e.callsite(1, "counter.c:40")?
    } else {
        e.callsite(1, "stats.c:88")?
    };
    for t in 1..threads {
        e.spawn(0, t, 1)?;
    }
    e.alloc(0, 0, BASE, LINE, cs)?;
    e.window(1, p.span_ns.saturating_sub(1))?;
    line_pingpong(p, e, cs, BASE, writers, p.accesses, same_word)?;
    e.exit_all(p.span_ns)?;
    e.free(p.span_ns, BASE)
}

enum Striping {
    /// Every worker touches every page.
    AllWorkers,
    /// Pages are split into contiguous ranges, one per worker group.
    Groups(u32),
}

/// One object of `pages` pages. The main thread first-touches line 0 of
/// every page; workers then use disjoint lines of the pages assigned to
/// them. Returns the workers of each page.
#[allow(clippy::too_many_arguments)]
fn striped(
    e: &mut Emitter,
    rng: &mut ChaCha8Rng,
    cs: CallsiteId,
    base: u64,
    pages: u64,
    workers: u32,
    striping: &Striping,
    accesses: u64,
    write_p: f64,
) -> Result<Vec<(u32, u32)>, GenError> {
    let owners: Vec<(u32, u32)> = (0..pages)
        .map(|pg| match striping {
            Striping::AllWorkers => (1, workers),
            Striping::Groups(g) => {
                let per = workers / g;
                let grp = (pg * *g as u64 / pages) as u32;
                (1 + grp * per, (grp + 1) * per)
            }
        })
        .collect();
    let width = (owners[0].1 - owners[0].0 + 1) as u64;
    if width > LINE - 1 {
        return invalid("too many threads share a page");
    }
    for pg in 0..pages {
        e.access(0, AccessKind::Write, base + pg * PAGE, 8, cs, false, Inv::None)?;
    }
    let rounds = (accesses / (pages * width)).max(1);
    for _ in 0..rounds {
        for (pg, &(lo, hi)) in owners.iter().enumerate() {
            for tid in lo..=hi {
                let slot = (tid - lo) as u64;
                let owned = (LINE - 1 - slot).div_ceil(width);
                let line = 1 + slot + width * rng.gen_range(0..owned);
                let addr = base + pg as u64 * PAGE + line * LINE + rng.gen_range(0..LINE / WORD) * WORD;
                let kind = pick_kind(rng, write_p);
                e.access(tid, kind, addr, 8, cs, true, Inv::None)?;
            }
        }
    }
    Ok(owners)
}

/// Read-only worker phase over an object whose pages the main thread has
/// written once each.
fn read_mostly_object(
    e: &mut Emitter,
    rng: &mut ChaCha8Rng,
    cs: CallsiteId,
    base: u64,
    pages: u64,
    workers: u32,
    accesses: u64,
) -> Result<(), GenError> {
    for pg in 0..pages {
        e.access(0, AccessKind::Write, base + pg * PAGE, 8, cs, false, Inv::None)?;
    }
    for k in 0..accesses {
        let tid = 1 + (k % workers as u64) as u32;
        let addr = base + rng.gen_range(0..pages * PAGE / WORD) * WORD;
        e.access(tid, AccessKind::Read, addr, 8, cs, true, Inv::None)?;
    }
    Ok(())
}

fn group_count(workers: u32) -> Result<u32, GenError> {
    let g = workers.min(8);
    if !workers.is_multiple_of(g) || workers / g > 8 {
        return invalid(format!(
            "remote-block needs a worker count divisible into 8 groups of at most 8 (got {workers} workers)"
        ));
    }
    Ok(g)
}

fn block_spans(owners: &[(u32, u32)], base: u64, rounds: u64) -> Option<Vec<SpanEntry>> {
    let width = (owners[0].1 - owners[0].0 + 1) as u64;
    // Enough recorded accesses per thread after detail switches on that
    // every group member stays inside the dominant range.
    let th = AnalyzerConfig::default().page_detail_threshold;
    if rounds * width < th + 10 * width {
        return None;
    }
    Some(
        owners
            .iter()
            .enumerate()
            .map(|(i, &(lo, hi))| SpanEntry {
                page: base / PAGE + i as u64,
                threads: Some((ThreadId(lo), ThreadId(hi))),
            })
            .collect(),
    )
}

fn remote(p: &GenParams, e: &mut Emitter, which: Pattern) -> Result<(), GenError> {
    let threads = check_threads(p, 2)?;
    let workers = threads - 1;
    if p.pages == 0 {
        return invalid("pages must be positive");
    }
    let mut rng = rng_for(p);
    let cs = match which {
        Pattern::RemotePage => e.callsite(1, "grid.c:210")?,
        Pattern::RemoteBlock => e.callsite(1, "matrix.c:1385")?,
        _ => e.callsite(1, "table.c:57")?,
    };
    for t in 1..threads {
        e.spawn(0, t, 1)?;
    }
    let size = p.pages * PAGE;
    e.alloc(0, 0, BASE, size, cs)?;
    e.window(1, p.span_ns.saturating_sub(1))?;
    match which {
        Pattern::RemotePage => {
            striped(e, &mut rng, cs, BASE, p.pages, workers, &Striping::AllWorkers, p.accesses, 0.5)?;
        }
        Pattern::RemoteBlock => {
            let g = group_count(workers)?;
            if !p.pages.is_multiple_of(g as u64) {
                return invalid(format!("pages must be a multiple of {g}"));
            }
            let owners = striped(e, &mut rng, cs, BASE, p.pages, workers, &Striping::Groups(g), p.accesses, 0.5)?;
            let width = (workers / g) as u64;
            let rounds = (p.accesses / (p.pages * width)).max(1);
            if let Some(spans) = block_spans(&owners, BASE, rounds) {
                e.set_spans(cs, spans);
            }
        }
        _ => read_mostly_object(e, &mut rng, cs, BASE, p.pages, workers, p.accesses)?,
    }
    e.exit_all(p.span_ns)?;
    e.free(p.span_ns, BASE)
}

/// `c` handoffs per thread: for each one the next thread holds the lock
/// while thread `b` requests it, so only `b`'s request is contended.
fn handoffs(e: &mut Emitter, threads: u32, c: u64, lock: u64) -> Result<(), GenError> {
    for b in 0..threads {
        let a = (b + 1) % threads;
        for _ in 0..c {
            e.lock_op(LockOp::Request, a, lock)?;
            e.lock_op(LockOp::Grant, a, lock)?;
            e.lock_op(LockOp::Request, b, lock)?;
            e.contend(b);
            e.lock_op(LockOp::Release, a, lock)?;
            e.lock_op(LockOp::Grant, b, lock)?;
            e.lock_op(LockOp::Release, b, lock)?;
        }
    }
    Ok(())
}

fn serial_ns(p: &GenParams) -> Result<u64, GenError> {
    if !(p.parallel_fraction > 0.0 && p.parallel_fraction <= 1.0) {
        return invalid("parallel-fraction must lie in (0, 1]");
    }
    Ok(((1.0 - p.parallel_fraction) * p.span_ns as f64).round() as u64)
}

fn migration_heavy(p: &GenParams, e: &mut Emitter) -> Result<(), GenError> {
    let threads = check_threads(p, 2)?;
    let serial = serial_ns(p)?;
    if serial + 2 > p.span_ns {
        return invalid("span too short for the requested parallel fraction");
    }
    let cs = e.callsite(1, "queue.c:77")?;
    e.alloc(0, 0, BASE, LINE, cs)?;
    for t in 1..threads {
        e.spawn(serial, t, 1)?;
    }
    e.window(serial + 1, p.span_ns - 1)?;
    handoffs(e, threads, p.contentions, 1)?;
    e.exit_all(p.span_ns)?;
    e.free(p.span_ns, BASE)
}

fn imbalance(p: &mut GenParams, e: &mut Emitter) -> Result<(), GenError> {
    if p.totals.is_empty() || p.threads_per_type == 0 || p.unit == 0 {
        return invalid("imbalance needs totals, a positive unit and threads-per-type");
    }
    let tp = p.threads_per_type;
    p.threads = 1 + tp * p.totals.len() as u32;
    let mut rng = rng_for(p);
    let main_cs = e.callsite(1, "main.c:31")?;
    let mut plan: Vec<(u32, CallsiteId, u64, u64)> = Vec::new();
    let mut remaining: Vec<u64> = Vec::new();
    for (r, &units) in p.totals.iter().enumerate() {
        let cs = e.callsite(2 + r as u32, &format!("stage{}.c:{}", r + 1, 100 + r))?;
        let total = units * p.unit;
        for i in 0..tp {
            let tid = 1 + r as u32 * tp + i;
            let share = total / tp as u64 + u64::from((i as u64) < total % tp as u64);
            plan.push((tid, cs, BASE + tid as u64 * PAGE, share));
            remaining.push(share);
        }
    }
    e.alloc(0, 0, BASE, PAGE, main_cs)?;
    for (r, _) in p.totals.iter().enumerate() {
        for i in 0..tp {
            e.spawn(0, 1 + r as u32 * tp + i, 2 + r as u32)?;
        }
    }
    for &(tid, cs, addr, _) in &plan {
        e.alloc(0, tid, addr, PAGE, cs)?;
    }
    e.window(1, p.span_ns.saturating_sub(1))?;
    for _ in 0..p.main_accesses {
        let kind = pick_kind(&mut rng, 0.3);
        let addr = BASE + rng.gen_range(0..PAGE / WORD) * WORD;
        e.access(0, kind, addr, 8, main_cs, false, Inv::None)?;
    }
    let mut left: u64 = remaining.iter().sum();
    while left > 0 {
        for (i, &(tid, cs, base, _)) in plan.iter().enumerate() {
            if remaining[i] == 0 {
                continue;
            }
            remaining[i] -= 1;
            left -= 1;
            let kind = pick_kind(&mut rng, 0.3);
            let addr = base + rng.gen_range(0..PAGE / WORD) * WORD;
            e.access(tid, kind, addr, 8, cs, false, Inv::None)?;
        }
    }
    e.exit_all(p.span_ns)?;
    e.free(p.span_ns, BASE)?;
    for &(_, _, addr, _) in &plan {
        e.free(p.span_ns, addr)?;
    }
    Ok(())
}

fn mixed(p: &GenParams, e: &mut Emitter) -> Result<(), GenError> {
    let threads = check_threads(p, 3)?;
    let workers = threads - 1;
    let g = group_count(workers)?;
    if p.pages == 0 || !p.pages.is_multiple_of(g as u64) {
        return invalid(format!("pages must be a positive multiple of {g}"));
    }
    let mut rng = rng_for(p);
    let fs = e.callsite(1, "stats.c:88")?;
    let blk = e.callsite(2, "matrix.c:1385")?;
    let ro = e.callsite(3, "table.c:57")?;
    let (fs_base, blk_base, ro_base) = (BASE, BASE + SEGMENT, BASE + 2 * SEGMENT);
    let ro_pages = (p.pages / 4).max(1);
    for t in 1..threads {
        e.spawn(0, t, 1)?;
    }
    e.alloc(0, 0, fs_base, LINE, fs)?;
    e.alloc(0, 0, blk_base, p.pages * PAGE, blk)?;
    e.alloc(0, 0, ro_base, ro_pages * PAGE, ro)?;
    e.window(1, p.span_ns.saturating_sub(1))?;
    line_pingpong(p, e, fs, fs_base, 2, p.accesses / 4, false)?;
    let owners = striped(
        e,
        &mut rng,
        blk,
        blk_base,
        p.pages,
        workers,
        &Striping::Groups(g),
        p.accesses / 2,
        0.5,
    )?;
    let width = (workers / g) as u64;
    if let Some(spans) = block_spans(&owners, blk_base, (p.accesses / 2 / (p.pages * width)).max(1)) {
        e.set_spans(blk, spans);
    }
    read_mostly_object(e, &mut rng, ro, ro_base, ro_pages, workers, p.accesses / 4)?;
    handoffs(e, threads, p.contentions, 1)?;
    e.exit_all(p.span_ns)?;
    for a in [fs_base, blk_base, ro_base] {
        e.free(p.span_ns, a)?;
    }
    Ok(())
}

struct RandomLock {
    holder: Option<u32>,
    queue: Vec<u32>,
}

/// Uniform mix of accesses, lock traffic, waits and free/reallocate pairs
/// over a random object layout. No ground truth is planted.
fn random(p: &GenParams, e: &mut Emitter) -> Result<(), GenError> {
    let threads = check_threads(p, 1)?;
    if p.pages == 0 {
        return invalid("pages must be positive");
    }
    let mut rng = rng_for(p);
    let region = p.pages * PAGE;
    for i in 1..=8u32 {
        e.callsite(i, &format!("rand{i}.c:{}", 10 * i))?;
    }
    for t in 1..threads {
        e.spawn(0, t, 1 + rng.gen_range(0..3))?;
    }
    // (addr, size, heap callsite)
    let mut objects: Vec<(u64, u64, Option<CallsiteId>)> = Vec::new();
    let mut at = BASE;
    while at < BASE + region {
        at += rng.gen_range(0..4) * 16;
        let size = match rng.gen_range(0..4) {
            0 => rng.gen_range(1..=64),
            1 => rng.gen_range(64..=PAGE),
            _ => rng.gen_range(PAGE..=3 * PAGE),
        }
        .min(BASE + region - at.min(BASE + region));
        if size == 0 {
            break;
        }
        let global = rng.gen_bool(0.1);
        objects.push((at, size, (!global).then(|| CallsiteId(rng.gen_range(1..=8)))));
        at += size;
    }
    for (i, &(addr, size, cs)) in objects.iter().enumerate() {
        match cs {
            Some(cs) => e.alloc(0, 0, addr, size, cs)?,
            None => e.emit(TraceEvent::GlobalDecl {
                addr,
                size,
                name: format!("g{i}"),
            })?,
        }
    }
    e.window(1, p.span_ns.saturating_sub(1))?;
    let mut locks: Vec<RandomLock> = (0..3)
        .map(|_| RandomLock {
            holder: None,
            queue: Vec::new(),
        })
        .collect();
    let sizes = [1u32, 2, 4, 8, 8, 8, 16, 64];
    for _ in 0..p.accesses {
        let tid = rng.gen_range(0..threads);
        let roll: f64 = rng.gen();
        if roll < 0.04 {
            let l = rng.gen_range(0..locks.len());
            let lk = &mut locks[l];
            let id = l as u64 + 1;
            if lk.holder == Some(tid) {
                e.lock_op(LockOp::Release, tid, id)?;
                lk.holder = None;
                if !lk.queue.is_empty() {
                    let next = lk.queue.remove(0);
                    e.lock_op(LockOp::Grant, next, id)?;
                    lk.holder = Some(next);
                }
            } else if !lk.queue.contains(&tid) {
                e.lock_op(LockOp::Request, tid, id)?;
                if lk.holder.is_none() {
                    e.lock_op(LockOp::Grant, tid, id)?;
                    lk.holder = Some(tid);
                } else {
                    lk.queue.push(tid);
                }
            }
            continue;
        }
        if roll < 0.05 {
            let ts = e.ts();
            let t = ThreadId(tid);
            if rng.gen_bool(0.5) {
                e.emit(TraceEvent::CondWait {
                    ts,
                    tid: t,
                    cond: CondId(rng.gen_range(1..3)),
                })?;
            } else {
                e.emit(TraceEvent::BarrierWait {
                    ts,
                    tid: t,
                    barrier: BarrierId(1),
                })?;
            }
            continue;
        }
        if roll < 0.052 {
            let heap: Vec<usize> = (0..objects.len()).filter(|&i| objects[i].2.is_some()).collect();
            if let Some(&i) = heap.get(rng.gen_range(0..heap.len().max(1))) {
                let (addr, size, _) = objects[i];
                let ts = e.ts();
                e.free(ts.0, addr)?;
                if rng.gen_bool(0.7) {
                    let cs = CallsiteId(rng.gen_range(1..=8));
                    e.alloc(ts.0, tid, addr, size, cs)?;
                    objects[i].2 = Some(cs);
                } else {
                    objects.remove(i);
                }
            }
            continue;
        }
        let size = sizes[rng.gen_range(0..sizes.len())];
        let addr = if rng.gen_bool(0.9) && !objects.is_empty() {
            let (a, s, _) = objects[rng.gen_range(0..objects.len())];
            a + rng.gen_range(0..s)
        } else {
            BASE + rng.gen_range(0..region)
        };
        let ts = e.ts();
        e.emit(TraceEvent::MemAccess {
            ts,
            tid: ThreadId(tid),
            kind: pick_kind(&mut rng, 0.4),
            addr,
            size,
        })?;
    }
    for (l, lk) in locks.iter_mut().enumerate() {
        let id = l as u64 + 1;
        while let Some(h) = lk.holder.take() {
            let ts = p.span_ns;
            e.emit(TraceEvent::LockRelease {
                ts: Timestamp(ts),
                tid: ThreadId(h),
                lock: LockId(id),
            })?;
            if !lk.queue.is_empty() {
                let next = lk.queue.remove(0);
                e.emit(TraceEvent::LockGrant {
                    ts: Timestamp(ts),
                    tid: ThreadId(next),
                    lock: LockId(id),
                })?;
                lk.holder = Some(next);
            }
        }
    }
    e.exit_all(p.span_ns)
}

fn run(pattern: Pattern, params: &mut GenParams, e: &mut Emitter) -> Result<(), GenError> {
    if params.span_ns < 2 {
        return invalid("span-ns must be at least 2");
    }
    match pattern {
        Pattern::SingleThread => single_thread(params, e),
        Pattern::FalseSharing => sharing(params, e, false),
        Pattern::TrueSharing => sharing(params, e, true),
        Pattern::RemotePage | Pattern::RemoteBlock | Pattern::ReadMostly => remote(params, e, pattern),
        Pattern::MigrationHeavy => migration_heavy(params, e),
        Pattern::Imbalance => imbalance(params, e),
        Pattern::Mixed => mixed(params, e),
        Pattern::Random => random(params, e),
    }
}

fn expected_issues(pattern: Pattern, m: &Manifest) -> Option<Vec<ExpectedIssue>> {
    let th = m.config.thresholds;
    let ms = m.duration_ms();
    let t = m.thread_count as f64;
    let mut out = Vec::new();
    let mut push = |kind, fix, score: f64, min: f64| {
        if let Some(tier) = tier_for(score, min) {
            out.push(ExpectedIssue { tier, kind, fix, score });
        }
    };
    let c = m.subjects.first().map(|s| s.counters).unwrap_or_default();
    let inv = c.invalidations() as f64;
    match pattern {
        Pattern::SingleThread => {}
        Pattern::FalseSharing => push(IssueKind::FalseSharing, FixStrategy::Padding, inv / (ms * t), th.sharing_min),
        Pattern::TrueSharing => push(IssueKind::TrueSharing, FixStrategy::PageInterleave, inv / (ms * t), th.sharing_min),
        Pattern::RemotePage | Pattern::RemoteBlock | Pattern::ReadMostly => {
            let fix = match pattern {
                Pattern::RemotePage => FixStrategy::PageInterleave,
                Pattern::RemoteBlock => {
                    m.subjects[0].page_spans.as_ref()?;
                    FixStrategy::BlockInterleave
                }
                _ => FixStrategy::Duplicate,
            };
            push(IssueKind::RemoteAccess, fix, c.remote_accesses as f64 / ms, th.remote_min);
        }
        Pattern::MigrationHeavy => push(
            IssueKind::ThreadMigration,
            FixStrategy::ThreadBinding,
            m.migration_score.unwrap_or(0.0),
            th.migration_min,
        ),
        Pattern::Imbalance => {
            let tp = m.params.threads_per_type as f64;
            let totals = m.routine_totals.as_ref()?;
            let means: Vec<f64> = totals
                .iter()
                .filter(|(r, _)| **r != RoutineId::MAIN)
                .map(|(_, v)| *v as f64 / tp)
                .collect();
            if means.len() >= 2 {
                let max = means.iter().copied().fold(0.0, f64::max);
                let min = means.iter().copied().fold(f64::INFINITY, f64::min);
                push(
                    IssueKind::ThreadImbalance,
                    FixStrategy::AdjustThreads,
                    max / min.max(1.0),
                    th.imbalance_ratio,
                );
            }
        }
        Pattern::Mixed | Pattern::Random => return None,
    }
    Some(out)
}

/// Generates `pattern` into `sink` and returns its manifest.
pub fn generate(pattern: Pattern, params: &GenParams, sink: &mut dyn EventSink) -> Result<Manifest, GenError> {
    // First pass only counts payload events so timestamps can be spread
    // over the requested span.
    let mut probe_params = params.clone();
    let mut null = NullSink;
    let mut probe = Emitter::new(&mut null, 0);
    run(pattern, &mut probe_params, &mut probe)?;
    let planned = probe.index;

    let mut params = params.clone();
    let mut e = Emitter::new(sink, planned);
    run(pattern, &mut params, &mut e)?;

    let truth = e.truth;
    let threads = truth.routine_of.len();
    let first = e.first_ts.unwrap_or(0);
    let total = e.last_ts - first;
    let p = match truth.live_from {
        Some(from) if total > 0 => (e.last_ts - from) as f64 / total as f64,
        _ => 0.0,
    };
    let planted = pattern != Pattern::Random;
    let mut migrations: BTreeMap<ThreadId, u64> = truth.routine_of.keys().map(|t| (*t, 0)).collect();
    for (t, m) in &truth.migrations {
        migrations.insert(*t, *m);
    }
    let duration_s = (total as f64 / 1e9).max(1e-3);
    let sum_m: u64 = migrations.values().sum();
    let mut manifest = Manifest {
        pattern,
        params,
        config: AnalyzerConfig::default(),
        event_counts: e.counts,
        first_ts: Timestamp(first),
        last_ts: Timestamp(e.last_ts),
        thread_count: threads,
        callsites: e.callsites,
        subjects: if planted {
            truth.subjects.into_values().collect()
        } else {
            Vec::new()
        },
        migrations: planted.then_some(migrations),
        parallel_fraction: Some(p),
        migration_score: planted.then(|| p * sum_m as f64 / (duration_s * threads as f64)),
        routine_totals: planted.then_some(truth.routine_totals),
        expected_issues: None,
    };
    manifest.expected_issues = expected_issues(pattern, &manifest);
    Ok(manifest)
}

/// Generates straight into a trace file.
pub fn generate_to_writer<W: Write>(pattern: Pattern, params: &GenParams, out: W) -> Result<(Manifest, W), GenError> {
    let mut w = TraceWriter::new(out)?;
    let m = generate(pattern, params, &mut w)?;
    Ok((m, w.finish()?))
}

/// Generates into memory.
pub fn generate_events(pattern: Pattern, params: &GenParams) -> Result<(VecSink, Manifest), GenError> {
    let mut sink = VecSink::default();
    let m = generate(pattern, params, &mut sink)?;
    Ok((sink, m))
}
