//! Event vocabulary and the `NPTRACE 1` text format.
//!
//! A trace is a header line followed by one record per line. Records are
//! either timestamped events, global declarations (no timestamp, ordered as
//! if stamped `0`) or callsite side-table entries. The replay order is the
//! stable sort of events by timestamp, ties broken by file position.

mod parse;
mod validate;
mod write;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use parse::{parse_line, parse_trace, Record, TraceReader};
pub use validate::Validator;
pub use write::{write_line, write_trace, write_trace_to, TraceWriter};

/// Header that must open every trace.
pub const HEADER: &str = "NPTRACE 1";

/// Largest byte count a single `MA` record may carry.
pub const MAX_ACCESS_SIZE: u32 = 4096;

macro_rules! id_newtype {
    ($(#[$m:meta])* $name:ident, $inner:ty) => {
        $(#[$m])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt(f)
            }
        }
    };
}

id_newtype!(
    /// Nanoseconds from an arbitrary monotonic origin.
    Timestamp,
    u64
);
id_newtype!(
    /// Thread identifier; the main thread is `0`.
    ThreadId,
    u32
);
id_newtype!(
    /// Thread start routine, i.e. the thread "type". Main is `0`.
    RoutineId,
    u32
);
id_newtype!(CallsiteId, u32);
id_newtype!(LockId, u64);
id_newtype!(CondId, u64);
id_newtype!(BarrierId, u64);

impl ThreadId {
    pub const MAIN: ThreadId = ThreadId(0);
}

impl RoutineId {
    pub const MAIN: RoutineId = RoutineId(0);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AccessKind {
    Read,
    Write,
}

impl AccessKind {
    pub fn is_write(self) -> bool {
        matches!(self, AccessKind::Write)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceEvent {
    ThreadCreate {
        ts: Timestamp,
        tid: ThreadId,
        parent: ThreadId,
        routine: RoutineId,
    },
    ThreadExit {
        ts: Timestamp,
        tid: ThreadId,
    },
    MemAccess {
        ts: Timestamp,
        tid: ThreadId,
        kind: AccessKind,
        addr: u64,
        size: u32,
    },
    Alloc {
        ts: Timestamp,
        tid: ThreadId,
        addr: u64,
        size: u64,
        callsite: CallsiteId,
    },
    Free {
        ts: Timestamp,
        tid: ThreadId,
        addr: u64,
    },
    GlobalDecl {
        addr: u64,
        size: u64,
        name: String,
    },
    LockRequest {
        ts: Timestamp,
        tid: ThreadId,
        lock: LockId,
    },
    LockGrant {
        ts: Timestamp,
        tid: ThreadId,
        lock: LockId,
    },
    LockRelease {
        ts: Timestamp,
        tid: ThreadId,
        lock: LockId,
    },
    CondWait {
        ts: Timestamp,
        tid: ThreadId,
        cond: CondId,
    },
    BarrierWait {
        ts: Timestamp,
        tid: ThreadId,
        barrier: BarrierId,
    },
}

impl TraceEvent {
    /// `None` only for [`TraceEvent::GlobalDecl`].
    pub fn ts(&self) -> Option<Timestamp> {
        use TraceEvent::*;
        match self {
            ThreadCreate { ts, .. }
            | ThreadExit { ts, .. }
            | MemAccess { ts, .. }
            | Alloc { ts, .. }
            | Free { ts, .. }
            | LockRequest { ts, .. }
            | LockGrant { ts, .. }
            | LockRelease { ts, .. }
            | CondWait { ts, .. }
            | BarrierWait { ts, .. } => Some(*ts),
            GlobalDecl { .. } => None,
        }
    }

    /// Key used for the replay order. Globals sort as if stamped at 0.
    pub fn sort_key(&self) -> u64 {
        self.ts().map_or(0, |t| t.0)
    }

    pub fn tid(&self) -> Option<ThreadId> {
        use TraceEvent::*;
        match self {
            ThreadCreate { tid, .. }
            | ThreadExit { tid, .. }
            | MemAccess { tid, .. }
            | Alloc { tid, .. }
            | Free { tid, .. }
            | LockRequest { tid, .. }
            | LockGrant { tid, .. }
            | LockRelease { tid, .. }
            | CondWait { tid, .. }
            | BarrierWait { tid, .. } => Some(*tid),
            GlobalDecl { .. } => None,
        }
    }

    pub fn kind(&self) -> EventKind {
        use TraceEvent::*;
        match self {
            ThreadCreate { .. } => EventKind::ThreadCreate,
            ThreadExit { .. } => EventKind::ThreadExit,
            MemAccess { .. } => EventKind::MemAccess,
            Alloc { .. } => EventKind::Alloc,
            Free { .. } => EventKind::Free,
            GlobalDecl { .. } => EventKind::GlobalDecl,
            LockRequest { .. } => EventKind::LockRequest,
            LockGrant { .. } => EventKind::LockGrant,
            LockRelease { .. } => EventKind::LockRelease,
            CondWait { .. } => EventKind::CondWait,
            BarrierWait { .. } => EventKind::BarrierWait,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    ThreadCreate,
    ThreadExit,
    MemAccess,
    Alloc,
    Free,
    GlobalDecl,
    LockRequest,
    LockGrant,
    LockRelease,
    CondWait,
    BarrierWait,
}

impl EventKind {
    pub const ALL: [EventKind; 11] = [
        EventKind::ThreadCreate,
        EventKind::ThreadExit,
        EventKind::MemAccess,
        EventKind::Alloc,
        EventKind::Free,
        EventKind::GlobalDecl,
        EventKind::LockRequest,
        EventKind::LockGrant,
        EventKind::LockRelease,
        EventKind::CondWait,
        EventKind::BarrierWait,
    ];

    /// Two-letter record code used in the text format.
    pub fn code(self) -> &'static str {
        match self {
            EventKind::ThreadCreate => "TC",
            EventKind::ThreadExit => "TX",
            EventKind::MemAccess => "MA",
            EventKind::Alloc => "AL",
            EventKind::Free => "FR",
            EventKind::GlobalDecl => "GB",
            EventKind::LockRequest => "LA",
            EventKind::LockGrant => "LG",
            EventKind::LockRelease => "LR",
            EventKind::CondWait => "CW",
            EventKind::BarrierWait => "BW",
        }
    }
}

/// Per-kind event tallies.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCounts(pub BTreeMap<EventKind, u64>);

impl EventCounts {
    pub fn add(&mut self, kind: EventKind) {
        *self.0.entry(kind).or_insert(0) += 1;
    }

    pub fn get(&self, kind: EventKind) -> u64 {
        self.0.get(&kind).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.0.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalInfo {
    pub addr: u64,
    pub size: u64,
    pub name: String,
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("missing `{HEADER}` header")]
    MissingHeader,
    #[error("line {line}: malformed record: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: unknown event code `{code}`")]
    UnknownEventCode { line: usize, code: String },
    #[error("line {line}: event references thread {tid} which is not live")]
    DanglingThreadRef { line: usize, tid: ThreadId },
    #[error("line {line}: thread {tid} is created twice")]
    DuplicateThread { line: usize, tid: ThreadId },
    #[error("line {line}: lock {lock} by thread {tid}: {reason}")]
    LockStateViolation {
        line: usize,
        tid: ThreadId,
        lock: LockId,
        reason: &'static str,
    },
    #[error("line {line}: free of {addr:#x} which is not a live allocation")]
    DoubleFree { line: usize, addr: u64 },
    #[error("line {line}: timestamp goes backwards (rerun with --sort)")]
    UnsortedInput { line: usize },
    #[error("event {index}: {reason}")]
    InvariantViolation { index: usize, reason: String },
    #[error("trace contains no timestamped events")]
    EmptyTrace,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TraceError {
    /// Rewrites the position of a validation error. Validation reports
    /// positions in whatever unit the caller fed it (file line or event
    /// index); the writer wants an event index.
    pub(crate) fn into_invariant(self, index: usize) -> TraceError {
        match self {
            TraceError::Io(e) => TraceError::Io(e),
            other => TraceError::InvariantViolation {
                index,
                reason: other.to_string(),
            },
        }
    }
}

/// A fully parsed, validated trace held in replay order.
#[derive(Debug, Clone, Default)]
pub struct ValidatedTrace {
    events: Vec<TraceEvent>,
    callsites: BTreeMap<CallsiteId, String>,
    globals: Vec<GlobalInfo>,
    routines: BTreeMap<ThreadId, RoutineId>,
    counts: EventCounts,
}

impl ValidatedTrace {
    pub(crate) fn from_parts(
        events: Vec<TraceEvent>,
        callsites: BTreeMap<CallsiteId, String>,
        routines: BTreeMap<ThreadId, RoutineId>,
    ) -> Self {
        let mut counts = EventCounts::default();
        let mut globals = Vec::new();
        for ev in &events {
            counts.add(ev.kind());
            if let TraceEvent::GlobalDecl { addr, size, name } = ev {
                globals.push(GlobalInfo {
                    addr: *addr,
                    size: *size,
                    name: name.clone(),
                });
            }
        }
        ValidatedTrace {
            events,
            callsites,
            globals,
            routines,
            counts,
        }
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn callsites(&self) -> &BTreeMap<CallsiteId, String> {
        &self.callsites
    }

    pub fn globals(&self) -> &[GlobalInfo] {
        &self.globals
    }

    /// Start routine of every thread, main included.
    pub fn routines(&self) -> &BTreeMap<ThreadId, RoutineId> {
        &self.routines
    }

    pub fn counts(&self) -> &EventCounts {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Source string for a callsite, falling back to `callsite-<id>`.
pub fn callsite_name(table: &BTreeMap<CallsiteId, String>, id: CallsiteId) -> String {
    table
        .get(&id)
        .cloned()
        .unwrap_or_else(|| format!("callsite-{}", id.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DurationStats {
    pub total_ns: u64,
    pub duration_ms: f64,
    pub duration_s: f64,
}

impl DurationStats {
    pub fn from_span(first: Timestamp, last: Timestamp) -> Self {
        let total_ns = last.0.saturating_sub(first.0);
        DurationStats {
            total_ns,
            duration_ms: (total_ns as f64 / 1e6).max(1.0),
            duration_s: (total_ns as f64 / 1e9).max(1e-3),
        }
    }
}

/// Running min/max over timestamped events.
#[derive(Debug, Clone, Copy, Default)]
pub struct SpanTracker {
    span: Option<(Timestamp, Timestamp)>,
}

impl SpanTracker {
    pub fn observe(&mut self, ev: &TraceEvent) {
        if let Some(ts) = ev.ts() {
            self.span = Some(match self.span {
                None => (ts, ts),
                Some((lo, hi)) => (lo.min(ts), hi.max(ts)),
            });
        }
    }

    pub fn span(&self) -> Option<(Timestamp, Timestamp)> {
        self.span
    }

    pub fn duration(&self) -> Result<DurationStats, TraceError> {
        self.span
            .map(|(lo, hi)| DurationStats::from_span(lo, hi))
            .ok_or(TraceError::EmptyTrace)
    }
}

pub fn trace_duration(trace: &ValidatedTrace) -> Result<DurationStats, TraceError> {
    let mut span = SpanTracker::default();
    for ev in trace.events() {
        span.observe(ev);
    }
    span.duration()
}
