//! Thread lifecycles, lock contention, condition/barrier waits and the
//! parallel-phase sweep feeding the migration score and imbalance checks.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::trace::{LockId, RoutineId, ThreadId, Timestamp, TraceEvent};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreadStats {
    pub tid: ThreadId,
    pub rid: RoutineId,
    pub birth_ts: Timestamp,
    pub exit_ts: Option<Timestamp>,
    pub access_count: u64,
    pub lock_contentions: u64,
    pub cond_waits: u64,
    pub barrier_waits: u64,
}

impl ThreadStats {
    fn new(tid: ThreadId, rid: RoutineId, birth_ts: Timestamp) -> Self {
        ThreadStats {
            tid,
            rid,
            birth_ts,
            exit_ts: None,
            access_count: 0,
            lock_contentions: 0,
            cond_waits: 0,
            barrier_waits: 0,
        }
    }

    /// Possible migration times.
    pub fn migrations(&self) -> u64 {
        self.lock_contentions + self.cond_waits + self.barrier_waits
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseStats {
    pub parallel_ns: u64,
    pub total_ns: u64,
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutineTotals {
    pub thread_count: u64,
    pub total_accesses: u64,
}

impl RoutineTotals {
    pub fn per_thread_mean(&self) -> f64 {
        if self.thread_count == 0 {
            0.0
        } else {
            self.total_accesses as f64 / self.thread_count as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum SyncDiagnostic {
    #[error("thread {tid} released lock {lock} it does not hold")]
    ReleaseByNonHolder { tid: ThreadId, lock: LockId },
}

#[derive(Debug, Clone, Default)]
pub struct SyncProfiler {
    threads: BTreeMap<ThreadId, ThreadStats>,
    holders: HashMap<LockId, ThreadId>,
    live: u64,
    first_ts: Option<Timestamp>,
    prev_ts: Option<Timestamp>,
    parallel_ns: u64,
    diagnostics: Vec<SyncDiagnostic>,
}

impl SyncProfiler {
    pub fn new() -> Self {
        SyncProfiler::default()
    }

    fn ensure_main(&mut self, ts: Timestamp) {
        if self.threads.is_empty() {
            self.threads
                .insert(ThreadId::MAIN, ThreadStats::new(ThreadId::MAIN, RoutineId::MAIN, ts));
            self.live = 1;
        }
    }

    /// Advances the parallel-phase sweep to `ts`. Call before applying the
    /// event stamped `ts`.
    fn advance(&mut self, ts: Timestamp) {
        self.ensure_main(ts);
        if self.first_ts.is_none() {
            self.first_ts = Some(ts);
        }
        if let Some(prev) = self.prev_ts {
            if self.live >= 2 {
                self.parallel_ns += ts.0.saturating_sub(prev.0);
            }
        }
        self.prev_ts = Some(ts);
    }

    /// Feeds any event. Non-sync, non-lifecycle events only move the clock.
    pub fn observe(&mut self, ev: &TraceEvent) {
        let Some(ts) = ev.ts() else { return };
        self.advance(ts);
        match ev {
            TraceEvent::ThreadCreate { tid, routine, .. } => {
                self.threads.insert(*tid, ThreadStats::new(*tid, *routine, ts));
                self.live += 1;
            }
            TraceEvent::ThreadExit { tid, .. } => {
                if let Some(t) = self.threads.get_mut(tid) {
                    if t.exit_ts.is_none() {
                        t.exit_ts = Some(ts);
                        self.live = self.live.saturating_sub(1);
                    }
                }
            }
            TraceEvent::LockRequest { .. }
            | TraceEvent::LockGrant { .. }
            | TraceEvent::LockRelease { .. }
            | TraceEvent::CondWait { .. }
            | TraceEvent::BarrierWait { .. } => {
                self.record_sync_event(ev);
            }
            _ => {}
        }
    }

    /// Updates contention and wait counters. Lock requests are contended when
    /// the lock is held by another thread at that point of the replay.
    pub fn record_sync_event(&mut self, ev: &TraceEvent) -> Option<&ThreadStats> {
        if let Some(ts) = ev.ts() {
            self.ensure_main(ts);
        }
        let tid = ev.tid()?;
        match ev {
            TraceEvent::LockRequest { lock, .. } => {
                let contended = self.holders.get(lock).is_some_and(|h| *h != tid);
                if contended {
                    self.thread_mut(tid).lock_contentions += 1;
                }
            }
            TraceEvent::LockGrant { lock, .. } => {
                self.holders.insert(*lock, tid);
            }
            TraceEvent::LockRelease { lock, .. } => {
                if self.holders.remove(lock) != Some(tid) {
                    self.diagnostics
                        .push(SyncDiagnostic::ReleaseByNonHolder { tid, lock: *lock });
                }
            }
            TraceEvent::CondWait { .. } => self.thread_mut(tid).cond_waits += 1,
            TraceEvent::BarrierWait { .. } => self.thread_mut(tid).barrier_waits += 1,
            _ => return None,
        }
        self.threads.get(&tid)
    }

    fn thread_mut(&mut self, tid: ThreadId) -> &mut ThreadStats {
        let birth = self.prev_ts.unwrap_or_default();
        self.threads
            .entry(tid)
            .or_insert_with(|| ThreadStats::new(tid, RoutineId::MAIN, birth))
    }

    pub fn record_access(&mut self, tid: ThreadId) {
        self.thread_mut(tid).access_count += 1;
    }

    pub fn threads(&self) -> &BTreeMap<ThreadId, ThreadStats> {
        &self.threads
    }

    pub fn diagnostics(&self) -> &[SyncDiagnostic] {
        &self.diagnostics
    }

    pub fn phase(&self) -> PhaseStats {
        let total_ns = match (self.first_ts, self.prev_ts) {
            (Some(a), Some(b)) => b.0 - a.0,
            _ => 0,
        };
        let p = if total_ns == 0 {
            0.0
        } else {
            self.parallel_ns as f64 / total_ns as f64
        };
        PhaseStats {
            parallel_ns: self.parallel_ns,
            total_ns,
            p,
        }
    }
}

/// `p * sum(m_t) / (rt * |T|)`.
pub fn migration_score(threads: &[ThreadStats], phase: &PhaseStats, duration_s: f64) -> f64 {
    if threads.is_empty() || duration_s <= 0.0 {
        return 0.0;
    }
    let total: u64 = threads.iter().map(ThreadStats::migrations).sum();
    phase.p * total as f64 / (duration_s * threads.len() as f64)
}

/// Access totals grouped by start routine. Main (routine 0) is included.
pub fn routine_access_totals<'a>(
    threads: impl IntoIterator<Item = &'a ThreadStats>,
) -> BTreeMap<RoutineId, RoutineTotals> {
    let mut out: BTreeMap<RoutineId, RoutineTotals> = BTreeMap::new();
    for t in threads {
        let e = out.entry(t.rid).or_insert(RoutineTotals {
            thread_count: 0,
            total_accesses: 0,
        });
        e.thread_count += 1;
        e.total_accesses += t.access_count;
    }
    out
}
