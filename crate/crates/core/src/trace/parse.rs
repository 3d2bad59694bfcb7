use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read};
use std::str::SplitAsciiWhitespace;

use super::validate::Validator;
use super::{
    AccessKind, BarrierId, CallsiteId, CondId, LockId, RoutineId, ThreadId, Timestamp, TraceError,
    TraceEvent, ValidatedTrace, HEADER, MAX_ACCESS_SIZE,
};

/// One non-comment line of a trace body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Record {
    Event(TraceEvent),
    Callsite(CallsiteId, String),
}

struct Fields<'a> {
    it: SplitAsciiWhitespace<'a>,
    line: usize,
}

impl<'a> Fields<'a> {
    fn next_str(&mut self, what: &str) -> Result<&'a str, TraceError> {
        self.it.next().ok_or_else(|| TraceError::MalformedLine {
            line: self.line,
            reason: format!("missing {what}"),
        })
    }

    fn bad(&self, reason: String) -> TraceError {
        TraceError::MalformedLine {
            line: self.line,
            reason,
        }
    }

    fn dec<T: std::str::FromStr>(&mut self, what: &str) -> Result<T, TraceError> {
        let s = self.next_str(what)?;
        if !s.bytes().all(|b| b.is_ascii_digit()) {
            return Err(self.bad(format!("{what} `{s}` is not a decimal integer")));
        }
        s.parse()
            .map_err(|_| self.bad(format!("{what} `{s}` out of range")))
    }

    fn hex(&mut self, what: &str) -> Result<u64, TraceError> {
        let s = self.next_str(what)?;
        let digits = s
            .strip_prefix("0x")
            .ok_or_else(|| self.bad(format!("{what} `{s}` lacks 0x prefix")))?;
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(self.bad(format!("{what} `{s}` is not hexadecimal")));
        }
        u64::from_str_radix(digits, 16).map_err(|_| self.bad(format!("{what} `{s}` out of range")))
    }

    fn ts(&mut self) -> Result<Timestamp, TraceError> {
        self.dec("timestamp").map(Timestamp)
    }

    fn tid(&mut self) -> Result<ThreadId, TraceError> {
        self.dec("thread id").map(ThreadId)
    }

    fn finish(mut self) -> Result<(), TraceError> {
        match self.it.next() {
            None => Ok(()),
            Some(extra) => Err(self.bad(format!("unexpected trailing field `{extra}`"))),
        }
    }
}

/// Parses one body line. Returns `Ok(None)` for blank and comment lines.
///
/// `line` is the 1-based line number used in error positions.
pub fn parse_line(text: &str, line: usize) -> Result<Option<Record>, TraceError> {
    let trimmed = text.trim_start();
    if trimmed.is_empty() || trimmed.starts_with('#') {
        return Ok(None);
    }
    let mut f = Fields {
        it: trimmed.split_ascii_whitespace(),
        line,
    };
    let code = f.next_str("event code")?;
    let ev = match code {
        "TC" => TraceEvent::ThreadCreate {
            ts: f.ts()?,
            tid: f.tid()?,
            parent: f.tid()?,
            routine: RoutineId(f.dec("routine id")?),
        },
        "TX" => TraceEvent::ThreadExit {
            ts: f.ts()?,
            tid: f.tid()?,
        },
        "MA" => {
            let ts = f.ts()?;
            let tid = f.tid()?;
            let kind = match f.next_str("access kind")? {
                "R" => AccessKind::Read,
                "W" => AccessKind::Write,
                other => return Err(f.bad(format!("access kind `{other}` is not R or W"))),
            };
            let addr = f.hex("address")?;
            let size: u32 = f.dec("size")?;
            if size == 0 || size > MAX_ACCESS_SIZE {
                return Err(f.bad(format!("access size {size} outside 1..=4096")));
            }
            if addr.checked_add(size as u64 - 1).is_none() {
                return Err(f.bad("access wraps the address space".into()));
            }
            TraceEvent::MemAccess {
                ts,
                tid,
                kind,
                addr,
                size,
            }
        }
        "AL" => {
            let ts = f.ts()?;
            let tid = f.tid()?;
            let addr = f.hex("address")?;
            let size: u64 = f.dec("size")?;
            if size == 0 || addr.checked_add(size - 1).is_none() {
                return Err(f.bad(format!("invalid allocation size {size}")));
            }
            TraceEvent::Alloc {
                ts,
                tid,
                addr,
                size,
                callsite: CallsiteId(f.dec("callsite id")?),
            }
        }
        "FR" => TraceEvent::Free {
            ts: f.ts()?,
            tid: f.tid()?,
            addr: f.hex("address")?,
        },
        "GB" => {
            let addr = f.hex("address")?;
            let size: u64 = f.dec("size")?;
            if size == 0 || addr.checked_add(size - 1).is_none() {
                return Err(f.bad(format!("invalid global size {size}")));
            }
            TraceEvent::GlobalDecl {
                addr,
                size,
                name: f.next_str("global name")?.to_owned(),
            }
        }
        "LA" | "LG" | "LR" => {
            let ts = f.ts()?;
            let tid = f.tid()?;
            let lock = LockId(f.dec("lock id")?);
            match code {
                "LA" => TraceEvent::LockRequest { ts, tid, lock },
                "LG" => TraceEvent::LockGrant { ts, tid, lock },
                _ => TraceEvent::LockRelease { ts, tid, lock },
            }
        }
        "CW" => TraceEvent::CondWait {
            ts: f.ts()?,
            tid: f.tid()?,
            cond: CondId(f.dec("condition id")?),
        },
        "BW" => TraceEvent::BarrierWait {
            ts: f.ts()?,
            tid: f.tid()?,
            barrier: BarrierId(f.dec("barrier id")?),
        },
        "CS" => {
            let id = CallsiteId(f.dec("callsite id")?);
            // The source string is the rest of the line, internal spacing kept.
            let rest = trimmed[2..].trim_start();
            let rest = rest[rest.find(|c: char| c.is_ascii_whitespace()).unwrap_or(rest.len())..].trim();
            if rest.is_empty() {
                return Err(f.bad("callsite without source string".into()));
            }
            return Ok(Some(Record::Callsite(id, rest.to_owned())));
        }
        other => {
            return Err(TraceError::UnknownEventCode {
                line,
                code: other.to_owned(),
            })
        }
    };
    f.finish()?;
    Ok(Some(Record::Event(ev)))
}

/// Incremental reader over a trace body. Does not sort or validate; pair it
/// with a [`Validator`] for streaming replay.
pub struct TraceReader<R> {
    input: R,
    buf: String,
    line: usize,
    header_seen: bool,
}

impl<R: BufRead> TraceReader<R> {
    pub fn new(input: R) -> Self {
        TraceReader {
            input,
            buf: String::new(),
            line: 0,
            header_seen: false,
        }
    }

    /// Line number of the most recently returned record.
    pub fn line(&self) -> usize {
        self.line
    }

    fn read_header(&mut self) -> Result<(), TraceError> {
        self.buf.clear();
        let n = self.input.read_line(&mut self.buf)?;
        self.line = 1;
        if n == 0 || self.buf.trim_end() != HEADER {
            return Err(TraceError::MissingHeader);
        }
        self.header_seen = true;
        Ok(())
    }

    /// Next record, with its line number.
    pub fn next_record(&mut self) -> Result<Option<(Record, usize)>, TraceError> {
        if !self.header_seen {
            self.read_header()?;
        }
        loop {
            self.buf.clear();
            if self.input.read_line(&mut self.buf)? == 0 {
                return Ok(None);
            }
            self.line += 1;
            if let Some(rec) = parse_line(&self.buf, self.line)? {
                return Ok(Some((rec, self.line)));
            }
        }
    }
}

impl<R: BufRead> Iterator for TraceReader<R> {
    type Item = Result<(Record, usize), TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_record().transpose()
    }
}

/// Reads, sorts and validates a whole trace.
pub fn parse_trace<R: Read>(input: R) -> Result<ValidatedTrace, TraceError> {
    let mut reader = TraceReader::new(BufReader::new(input));
    let mut events: Vec<(TraceEvent, usize)> = Vec::new();
    let mut callsites = BTreeMap::new();
    while let Some((rec, line)) = reader.next_record()? {
        match rec {
            Record::Event(ev) => events.push((ev, line)),
            Record::Callsite(id, src) => {
                if callsites.insert(id, src).is_some() {
                    return Err(TraceError::MalformedLine {
                        line,
                        reason: format!("callsite {id} defined twice"),
                    });
                }
            }
        }
    }
    events.sort_by_key(|(ev, _)| ev.sort_key());

    let mut validator = Validator::new();
    for (ev, line) in &events {
        validator.check(ev, *line)?;
    }
    let routines = validator
        .routines()
        .iter()
        .map(|(t, r)| (*t, *r))
        .collect();
    Ok(ValidatedTrace::from_parts(
        events.into_iter().map(|(ev, _)| ev).collect(),
        callsites,
        routines,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::EventKind;

    #[test]
    fn minimal_trace() {
        let t = parse_trace("NPTRACE 1\nTC 0 1 0 7\nMA 10 1 W 0x1000 8\n".as_bytes()).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.routines().get(&ThreadId(1)), Some(&RoutineId(7)));
        assert_eq!(t.routines().len(), 2);
        assert_eq!(t.counts().get(EventKind::MemAccess), 1);
        assert_eq!(t.counts().total(), 2);
    }

    #[test]
    fn missing_header() {
        assert!(matches!(
            parse_trace("TC 0 1 0 7\n".as_bytes()),
            Err(TraceError::MissingHeader)
        ));
        assert!(matches!(parse_trace("".as_bytes()), Err(TraceError::MissingHeader)));
        assert!(matches!(
            parse_trace("NPTRACE 2\n".as_bytes()),
            Err(TraceError::MissingHeader)
        ));
    }

    #[test]
    fn grant_before_request_is_lock_violation() {
        let src = "NPTRACE 1\nLG 5 0 3\nLA 6 0 3\n";
        assert!(matches!(
            parse_trace(src.as_bytes()),
            Err(TraceError::LockStateViolation { line: 2, .. })
        ));
    }

    #[test]
    fn ties_keep_file_order_and_sort_by_time() {
        let src = "NPTRACE 1\nMA 20 0 R 0x10 1\nMA 10 0 W 0x20 1\nMA 10 0 R 0x30 1\n";
        let t = parse_trace(src.as_bytes()).unwrap();
        let addrs: Vec<u64> = t
            .events()
            .iter()
            .map(|e| match e {
                TraceEvent::MemAccess { addr, .. } => *addr,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(addrs, vec![0x20, 0x30, 0x10]);
    }

    #[test]
    fn comments_blank_lines_and_callsites() {
        let src = "NPTRACE 1\n# hello\n\nCS 4 lulesh.cc:2251\nAL 0 0 0x1000 64 4\n";
        let t = parse_trace(src.as_bytes()).unwrap();
        assert_eq!(t.callsites().get(&CallsiteId(4)).unwrap(), "lulesh.cc:2251");
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn callsite_source_keeps_internal_spaces() {
        let rec = parse_line("CS 9   foo.c:12 (inlined)  ", 3).unwrap().unwrap();
        assert_eq!(rec, Record::Callsite(CallsiteId(9), "foo.c:12 (inlined)".into()));
    }

    #[test]
    fn malformed_lines() {
        for bad in [
            "MA 1 0 X 0x10 4",
            "MA 1 0 R 10 4",
            "MA 1 0 R 0x10 0",
            "MA 1 0 R 0x10 5000",
            "MA 1 0 R 0x10",
            "MA 1 0 R 0x10 4 extra",
            "TC -1 1 0 0",
            "AL 0 0 0x10 0 1",
            "GB 0x10 8",
            "CS 3",
            "LA 1 0 99999999999999999999999",
        ] {
            assert!(
                matches!(parse_line(bad, 5), Err(TraceError::MalformedLine { line: 5, .. })),
                "{bad}"
            );
        }
        assert!(matches!(
            parse_line("ZZ 1 2", 9),
            Err(TraceError::UnknownEventCode { line: 9, .. })
        ));
    }

    #[test]
    fn dangling_thread_reference() {
        let src = "NPTRACE 1\nMA 1 3 R 0x10 4\n";
        assert!(matches!(
            parse_trace(src.as_bytes()),
            Err(TraceError::DanglingThreadRef { line: 2, tid: ThreadId(3) })
        ));
    }

    #[test]
    fn double_free() {
        let src = "NPTRACE 1\nAL 0 0 0x1000 8 1\nFR 1 0 0x1000\nFR 2 0 0x1000\n";
        assert!(matches!(
            parse_trace(src.as_bytes()),
            Err(TraceError::DoubleFree { line: 4, .. })
        ));
    }

    #[test]
    fn global_sorts_before_stamped_events() {
        let src = "NPTRACE 1\nMA 5 0 R 0x10 4\nGB 0x10 16 table\n";
        let t = parse_trace(src.as_bytes()).unwrap();
        assert_eq!(t.events()[0].kind(), EventKind::GlobalDecl);
        assert_eq!(t.globals()[0].name, "table");
    }
}
