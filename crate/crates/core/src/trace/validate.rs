use std::collections::{HashMap, HashSet};

use super::{LockId, RoutineId, ThreadId, TraceError, TraceEvent, MAX_ACCESS_SIZE};

/// Streaming checker for the trace invariants. Feed events in replay order.
///
/// The `line` passed with each event is only used for error positions.
#[derive(Debug, Clone)]
pub struct Validator {
    created: HashSet<ThreadId>,
    exited: HashSet<ThreadId>,
    routines: HashMap<ThreadId, RoutineId>,
    holders: HashMap<LockId, ThreadId>,
    pending: HashSet<(ThreadId, LockId)>,
    live_allocs: HashMap<u64, u32>,
}

impl Default for Validator {
    fn default() -> Self {
        let mut created = HashSet::new();
        created.insert(ThreadId::MAIN);
        let mut routines = HashMap::new();
        routines.insert(ThreadId::MAIN, RoutineId::MAIN);
        Validator {
            created,
            exited: HashSet::new(),
            routines,
            holders: HashMap::new(),
            pending: HashSet::new(),
            live_allocs: HashMap::new(),
        }
    }
}

fn malformed(line: usize, reason: impl Into<String>) -> TraceError {
    TraceError::MalformedLine {
        line,
        reason: reason.into(),
    }
}

/// Checks that do not depend on trace state. The parser already enforces
/// these for text input; the writer relies on them for in-memory events.
pub(crate) fn check_shape(ev: &TraceEvent, line: usize) -> Result<(), TraceError> {
    match ev {
        TraceEvent::MemAccess { addr, size, .. } => {
            if *size == 0 || *size > MAX_ACCESS_SIZE {
                return Err(malformed(line, format!("access size {size} outside 1..=4096")));
            }
            if addr.checked_add(*size as u64 - 1).is_none() {
                return Err(malformed(line, "access wraps the address space"));
            }
        }
        TraceEvent::Alloc { addr, size, .. } | TraceEvent::GlobalDecl { addr, size, .. } => {
            if *size == 0 {
                return Err(malformed(line, "zero-sized object"));
            }
            if addr.checked_add(*size - 1).is_none() {
                return Err(malformed(line, "object wraps the address space"));
            }
            if let TraceEvent::GlobalDecl { name, .. } = ev {
                if name.is_empty() || name.chars().any(char::is_whitespace) {
                    return Err(malformed(line, "global name must be one non-empty token"));
                }
            }
        }
        _ => {}
    }
    Ok(())
}

impl Validator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn routines(&self) -> &HashMap<ThreadId, RoutineId> {
        &self.routines
    }

    fn require_live(&self, tid: ThreadId, line: usize) -> Result<(), TraceError> {
        if !self.created.contains(&tid) || self.exited.contains(&tid) {
            return Err(TraceError::DanglingThreadRef { line, tid });
        }
        Ok(())
    }

    pub fn check(&mut self, ev: &TraceEvent, line: usize) -> Result<(), TraceError> {
        check_shape(ev, line)?;
        if let TraceEvent::ThreadCreate {
            tid,
            parent,
            routine,
            ..
        } = ev
        {
            if self.created.contains(tid) {
                return Err(TraceError::DuplicateThread { line, tid: *tid });
            }
            self.require_live(*parent, line)?;
            self.created.insert(*tid);
            self.routines.insert(*tid, *routine);
            return Ok(());
        }
        if let Some(tid) = ev.tid() {
            self.require_live(tid, line)?;
        }
        match ev {
            TraceEvent::ThreadExit { tid, .. } => {
                self.exited.insert(*tid);
            }
            TraceEvent::Alloc { addr, .. } => {
                *self.live_allocs.entry(*addr).or_insert(0) += 1;
            }
            TraceEvent::Free { addr, .. } => match self.live_allocs.get_mut(addr) {
                Some(n) if *n > 0 => {
                    *n -= 1;
                    if *n == 0 {
                        self.live_allocs.remove(addr);
                    }
                }
                _ => return Err(TraceError::DoubleFree { line, addr: *addr }),
            },
            TraceEvent::LockRequest { tid, lock, .. } => {
                if self.holders.get(lock) == Some(tid) {
                    return Err(TraceError::LockStateViolation {
                        line,
                        tid: *tid,
                        lock: *lock,
                        reason: "requested while already held by the requester",
                    });
                }
                if !self.pending.insert((*tid, *lock)) {
                    return Err(TraceError::LockStateViolation {
                        line,
                        tid: *tid,
                        lock: *lock,
                        reason: "second request before the first was granted",
                    });
                }
            }
            TraceEvent::LockGrant { tid, lock, .. } => {
                if !self.pending.remove(&(*tid, *lock)) {
                    return Err(TraceError::LockStateViolation {
                        line,
                        tid: *tid,
                        lock: *lock,
                        reason: "grant without a matching request",
                    });
                }
                if self.holders.contains_key(lock) {
                    return Err(TraceError::LockStateViolation {
                        line,
                        tid: *tid,
                        lock: *lock,
                        reason: "granted while held by another thread",
                    });
                }
                self.holders.insert(*lock, *tid);
            }
            TraceEvent::LockRelease { lock, .. } => {
                // A release by a non-holder is a sync-profiler diagnostic, not a
                // parse error; either way the lock ends up free.
                self.holders.remove(lock);
            }
            _ => {}
        }
        Ok(())
    }
}
