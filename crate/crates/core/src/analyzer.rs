//! Single forward replay of a trace through every profiler.

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::cache::{CacheProfiler, InvalidationDelta};
use crate::config::AnalyzerConfig;
use crate::page::{AccessClass, PageProfiler, PageSpan};
use crate::registry::{AccessNote, ObjectId, ObjectRegistry, RegistryError, Resolution};
use crate::sync::SyncProfiler;
use crate::trace::{
    CallsiteId, DurationStats, Record, SpanTracker, TraceError, TraceEvent, TraceReader,
    ValidatedTrace, Validator,
};

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("{0}")]
    Registry(#[from] RegistryError),
}

/// Counts of events the analyzer could not attribute cleanly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Accesses resolving to no object (stack, untracked memory).
    pub unattributed_accesses: u64,
    /// Accesses charged to an already freed object.
    pub dead_object_accesses: u64,
    /// Accesses whose last byte lies outside the first byte's object.
    pub straddling_accesses: u64,
    /// Invalidations on lines outside any object.
    pub unattributed_invalidations: u64,
    pub lock_release_violations: u64,
}

pub struct Analyzer {
    config: AnalyzerConfig,
    registry: ObjectRegistry,
    pages: PageProfiler,
    cache: CacheProfiler,
    sync: SyncProfiler,
    span: SpanTracker,
    callsites: BTreeMap<CallsiteId, String>,
    diagnostics: Diagnostics,
    memory_accesses: u64,
}

impl Analyzer {
    /// `config` must already be validated.
    pub fn new(config: AnalyzerConfig) -> Self {
        Analyzer {
            registry: ObjectRegistry::new(config.page_size),
            pages: PageProfiler::new(config.page_geometry()),
            cache: CacheProfiler::new(config.line_geometry()),
            sync: SyncProfiler::new(),
            span: SpanTracker::default(),
            callsites: BTreeMap::new(),
            diagnostics: Diagnostics::default(),
            memory_accesses: 0,
            config,
        }
    }

    pub fn callsite(&mut self, id: CallsiteId, source: String) {
        self.callsites.insert(id, source);
    }

    /// Applies one event. Events must be valid and arrive in replay order.
    pub fn feed(&mut self, ev: &TraceEvent) -> Result<(), AnalysisError> {
        self.span.observe(ev);
        self.sync.observe(ev);
        match ev {
            TraceEvent::GlobalDecl { addr, size, name } => {
                self.registry.register_global(*addr, *size, name)?;
            }
            TraceEvent::Alloc {
                ts,
                addr,
                size,
                callsite,
                ..
            } => {
                self.registry.register_allocation(*ts, *addr, *size, *callsite)?;
            }
            TraceEvent::Free { ts, addr, .. } => {
                self.registry.free(*ts, *addr)?;
            }
            TraceEvent::MemAccess {
                ts,
                tid,
                kind,
                addr,
                size,
            } => {
                self.memory_accesses += 1;
                let (ts, tid, kind, addr, size) = (*ts, *tid, *kind, *addr, *size);
                let resolution = self.registry.resolve_for_access(addr);
                let object = resolution.object();
                if let Resolution::Live(id) = resolution {
                    if size > 1 && self.registry.resolve_live(addr + size as u64 - 1) != Some(id) {
                        self.diagnostics.straddling_accesses += 1;
                    }
                }

                let class = self.pages.record_page_access(ts, tid, addr, size, kind);

                let registry = &mut self.registry;
                let diagnostics = &mut self.diagnostics;
                self.cache
                    .record_line_access_with(tid, addr, size, kind, |line_addr, d| {
                        let owner = registry.resolve_live(line_addr).or(object);
                        match owner {
                            Some(o) => {
                                // Owner ids come from the registry itself.
                                let _ = registry.add_invalidations(
                                    o,
                                    d.false_part,
                                    d.true_part,
                                    d.unclassified_part,
                                );
                            }
                            None => diagnostics.unattributed_invalidations += d.count,
                        }
                    });

                match object {
                    Some(id) => {
                        if self.registry.record_object_access(id, ts, kind)?
                            == AccessNote::AccessToDeadObject
                        {
                            self.diagnostics.dead_object_accesses += 1;
                        }
                        if class == AccessClass::Remote {
                            self.registry.add_remote(id)?;
                        }
                        self.sync.record_access(tid);
                    }
                    None => self.diagnostics.unattributed_accesses += 1,
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn finish(mut self) -> Analysis {
        self.diagnostics.lock_release_violations = self.sync.diagnostics().len() as u64;
        Analysis {
            duration: self.span.duration().ok(),
            config: self.config,
            registry: self.registry,
            pages: self.pages,
            cache: self.cache,
            sync: self.sync,
            callsites: self.callsites,
            diagnostics: self.diagnostics,
            memory_accesses: self.memory_accesses,
        }
    }
}

/// Everything the replay produced; read-only.
pub struct Analysis {
    pub config: AnalyzerConfig,
    pub registry: ObjectRegistry,
    pub pages: PageProfiler,
    pub cache: CacheProfiler,
    pub sync: SyncProfiler,
    pub callsites: BTreeMap<CallsiteId, String>,
    pub diagnostics: Diagnostics,
    /// `None` when the trace had no timestamped event.
    pub duration: Option<DurationStats>,
    pub memory_accesses: u64,
}

impl Analysis {
    fn object(&self, id: ObjectId) -> Result<&crate::registry::ObjectRecord, RegistryError> {
        self.registry.get(id).ok_or(RegistryError::UnknownObject(id))
    }

    /// Block-based remote estimate for one object.
    pub fn object_remote_count(&self, id: ObjectId) -> Result<u64, RegistryError> {
        let o = self.object(id)?;
        Ok(self.pages.object_remote_count(o.addr, o.size))
    }

    /// Invalidation counts charged to the object during replay.
    pub fn object_sharing_counts(&self, id: ObjectId) -> Result<InvalidationDelta, RegistryError> {
        let c = self.object(id)?.counters;
        Ok(InvalidationDelta {
            count: c.invalidations(),
            false_part: c.false_invalidations,
            true_part: c.true_invalidations,
            unclassified_part: c.unclassified_invalidations,
        })
    }

    pub fn page_thread_spans(&self, id: ObjectId) -> Result<Vec<PageSpan>, RegistryError> {
        let o = self.object(id)?;
        Ok(self
            .pages
            .page_thread_spans(o.addr, o.size, self.config.span_quantile))
    }

    pub fn thread_count(&self) -> usize {
        self.sync.threads().len().max(1)
    }
}

/// Replays an in-memory trace.
pub fn analyze_trace(trace: &ValidatedTrace, config: AnalyzerConfig) -> Result<Analysis, AnalysisError> {
    let mut a = Analyzer::new(config);
    for (id, src) in trace.callsites() {
        a.callsite(*id, src.clone());
    }
    for ev in trace.events() {
        a.feed(ev)?;
    }
    Ok(a.finish())
}

/// Replays a trace in one forward pass without buffering it. Input must
/// already be in timestamp order.
pub fn analyze_stream<R: BufRead>(input: R, config: AnalyzerConfig) -> Result<Analysis, AnalysisError> {
    let mut reader = TraceReader::new(input);
    let mut validator = Validator::new();
    let mut a = Analyzer::new(config);
    let mut last_key = 0u64;
    while let Some((rec, line)) = reader.next_record()? {
        match rec {
            Record::Callsite(id, src) => a.callsite(id, src),
            Record::Event(ev) => {
                let key = ev.sort_key();
                if key < last_key {
                    return Err(TraceError::UnsortedInput { line }.into());
                }
                last_key = key;
                validator.check(&ev, line)?;
                a.feed(&ev)?;
            }
        }
    }
    Ok(a.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::parse_trace;

    const TRACE: &str = "NPTRACE 1
CS 1 main.c:10
TC 0 1 0 1
TC 0 2 0 1
AL 1 0 0x10000 128 1
MA 2 1 W 0x10000 8
MA 3 2 W 0x10008 8
MA 4 1 W 0x10000 8
MA 5 0 R 0x7fff0000 8
MA 6 2 R 0x1003c 8
";

    #[test]
    fn stream_and_batch_agree() {
        let cfg = AnalyzerConfig::default();
        let batch = analyze_trace(&parse_trace(TRACE.as_bytes()).unwrap(), cfg).unwrap();
        let stream = analyze_stream(TRACE.as_bytes(), cfg).unwrap();
        assert_eq!(batch.registry.objects(), stream.registry.objects());
        assert_eq!(batch.diagnostics, stream.diagnostics);
    }

    #[test]
    fn counters_and_diagnostics() {
        let a = analyze_stream(TRACE.as_bytes(), AnalyzerConfig::default()).unwrap();
        let o = &a.registry.objects()[0];
        assert_eq!(o.counters.writes, 3);
        assert_eq!(o.counters.reads, 1);
        // t2's accesses are remote (t1 touched the page first).
        assert_eq!(o.counters.remote_accesses, 2);
        // t2 write invalidates t1, t1 write invalidates t2.
        assert_eq!(o.counters.invalidations(), 2);
        assert_eq!(a.diagnostics.unattributed_accesses, 1);
        assert_eq!(a.sync.threads()[&crate::trace::ThreadId(1)].access_count, 2);
        assert_eq!(a.duration.unwrap().total_ns, 6);
    }

    #[test]
    fn unsorted_stream_is_rejected() {
        let src = "NPTRACE 1\nMA 5 0 R 0x10 4\nMA 4 0 R 0x10 4\n";
        assert!(matches!(
            analyze_stream(src.as_bytes(), AnalyzerConfig::default()),
            Err(AnalysisError::Trace(TraceError::UnsortedInput { line: 3 }))
        ));
    }

    #[test]
    fn overlapping_allocation_is_an_error() {
        let src = "NPTRACE 1\nAL 0 0 0x1000 64 1\nAL 1 0 0x1020 64 1\n";
        assert!(matches!(
            analyze_stream(src.as_bytes(), AnalyzerConfig::default()),
            Err(AnalysisError::Registry(RegistryError::OverlapWithLiveObject { .. }))
        ));
    }

    #[test]
    fn straddling_access_goes_to_first_byte_object() {
        let src = "NPTRACE 1\nAL 0 0 0x1000 8 1\nAL 0 0 0x1008 8 2\nMA 1 0 W 0x1004 8\n";
        let a = analyze_stream(src.as_bytes(), AnalyzerConfig::default()).unwrap();
        assert_eq!(a.registry.objects()[0].counters.writes, 1);
        assert_eq!(a.registry.objects()[1].counters.writes, 0);
        assert_eq!(a.diagnostics.straddling_accesses, 1);
    }

    #[test]
    fn dead_object_fallback() {
        let src = "NPTRACE 1\nAL 0 0 0x1000 8 1\nFR 1 0 0x1000\nMA 2 0 R 0x1000 4\n";
        let a = analyze_stream(src.as_bytes(), AnalyzerConfig::default()).unwrap();
        assert_eq!(a.diagnostics.dead_object_accesses, 1);
        assert_eq!(a.registry.objects()[0].counters.reads, 1);
    }
}
