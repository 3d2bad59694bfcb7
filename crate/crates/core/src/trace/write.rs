use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use super::validate::Validator;
use super::{AccessKind, CallsiteId, TraceError, TraceEvent, HEADER};

/// Canonical single-line form of an event, without the newline.
pub fn write_line(ev: &TraceEvent, out: &mut String) {
    use TraceEvent::*;
    // Writing into a String cannot fail.
    let _ = match ev {
        ThreadCreate {
            ts,
            tid,
            parent,
            routine,
        } => write!(out, "TC {ts} {tid} {parent} {routine}"),
        ThreadExit { ts, tid } => write!(out, "TX {ts} {tid}"),
        MemAccess {
            ts,
            tid,
            kind,
            addr,
            size,
        } => {
            let k = match kind {
                AccessKind::Read => 'R',
                AccessKind::Write => 'W',
            };
            write!(out, "MA {ts} {tid} {k} {addr:#x} {size}")
        }
        Alloc {
            ts,
            tid,
            addr,
            size,
            callsite,
        } => write!(out, "AL {ts} {tid} {addr:#x} {size} {callsite}"),
        Free { ts, tid, addr } => write!(out, "FR {ts} {tid} {addr:#x}"),
        GlobalDecl { addr, size, name } => write!(out, "GB {addr:#x} {size} {name}"),
        LockRequest { ts, tid, lock } => write!(out, "LA {ts} {tid} {lock}"),
        LockGrant { ts, tid, lock } => write!(out, "LG {ts} {tid} {lock}"),
        LockRelease { ts, tid, lock } => write!(out, "LR {ts} {tid} {lock}"),
        CondWait { ts, tid, cond } => write!(out, "CW {ts} {tid} {cond}"),
        BarrierWait { ts, tid, barrier } => write!(out, "BW {ts} {tid} {barrier}"),
    };
}

/// Streaming writer. Events must arrive in replay order; each one is
/// validated before it is written.
pub struct TraceWriter<W: Write> {
    out: W,
    validator: Validator,
    line: String,
    index: usize,
    last_key: u64,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W) -> Result<Self, TraceError> {
        writeln!(out, "{HEADER}")?;
        Ok(TraceWriter {
            out,
            validator: Validator::new(),
            line: String::with_capacity(64),
            index: 0,
            last_key: 0,
        })
    }

    pub fn callsite(&mut self, id: CallsiteId, source: &str) -> Result<(), TraceError> {
        let source = source.trim();
        if source.is_empty() || source.contains(['\n', '\r']) {
            return Err(TraceError::InvariantViolation {
                index: self.index,
                reason: format!("callsite {id}: source must be a non-empty single line"),
            });
        }
        writeln!(self.out, "CS {id} {source}")?;
        Ok(())
    }

    pub fn event(&mut self, ev: &TraceEvent) -> Result<(), TraceError> {
        let index = self.index;
        let key = ev.sort_key();
        if key < self.last_key {
            return Err(TraceError::InvariantViolation {
                index,
                reason: "events are not in timestamp order".into(),
            });
        }
        self.validator
            .check(ev, index)
            .map_err(|e| e.into_invariant(index))?;
        self.last_key = key;
        self.index += 1;
        self.line.clear();
        write_line(ev, &mut self.line);
        self.line.push('\n');
        self.out.write_all(self.line.as_bytes())?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, TraceError> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Writes `events` in replay order (a stable sort by timestamp is applied).
/// Callsite entries precede the events.
pub fn write_trace_to<W: Write>(
    out: W,
    callsites: &BTreeMap<CallsiteId, String>,
    events: &[TraceEvent],
) -> Result<(), TraceError> {
    let mut order: Vec<usize> = (0..events.len()).collect();
    order.sort_by_key(|&i| events[i].sort_key());
    let mut w = TraceWriter::new(out)?;
    for (id, src) in callsites {
        w.callsite(*id, src)?;
    }
    for &i in &order {
        // Report the caller's index, not the sorted position.
        w.index = i;
        w.event(&events[i])?;
    }
    w.finish()?;
    Ok(())
}

pub fn write_trace(events: &[TraceEvent]) -> Result<Vec<u8>, TraceError> {
    let mut buf = Vec::new();
    write_trace_to(&mut buf, &BTreeMap::new(), events)?;
    Ok(buf)
}
