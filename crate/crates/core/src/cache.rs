//! Cache-line copy sets, invalidation counting and word-level false/true
//! sharing classification.
//!
//! A write by thread `t` invalidates every other thread in the line's copy
//! set. Once a line has seen `word_track_threshold` writes, each invalidated
//! thread is classified: true sharing if it touched one of the written words
//! since it (re)joined the copy set, false sharing otherwise.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::threadset::ThreadSet;
use crate::trace::{AccessKind, ThreadId, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LineGeometry {
    pub line_size: u64,
    pub word_size: u64,
    pub word_track_threshold: u64,
}

impl Default for LineGeometry {
    fn default() -> Self {
        LineGeometry {
            line_size: 64,
            word_size: 8,
            word_track_threshold: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvalidationDelta {
    pub count: u64,
    pub false_part: u64,
    pub true_part: u64,
    pub unclassified_part: u64,
}

impl InvalidationDelta {
    pub fn is_zero(&self) -> bool {
        self.count == 0
    }

    fn add(&mut self, o: InvalidationDelta) {
        self.count += o.count;
        self.false_part += o.false_part;
        self.true_part += o.true_part;
        self.unclassified_part += o.unclassified_part;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheLineRecord {
    pub line_number: u64,
    pub copy_set: ThreadSet,
    pub write_count: u64,
    pub invalidations: u64,
    pub classified_false: u64,
    pub classified_true: u64,
    /// One accessor set per word once the line is hot.
    pub word_detail: Option<Vec<ThreadSet>>,
}

impl CacheLineRecord {
    pub fn unclassified(&self) -> u64 {
        self.invalidations - self.classified_false - self.classified_true
    }
}

#[derive(Debug, Clone)]
pub struct CacheProfiler {
    geometry: LineGeometry,
    shift: u32,
    words_per_line: usize,
    lines: HashMap<u64, CacheLineRecord>,
}

impl CacheProfiler {
    pub fn new(geometry: LineGeometry) -> Self {
        assert!(geometry.line_size.is_power_of_two() && geometry.word_size.is_power_of_two());
        assert!(geometry.word_size <= geometry.line_size);
        CacheProfiler {
            geometry,
            shift: geometry.line_size.trailing_zeros(),
            words_per_line: (geometry.line_size / geometry.word_size) as usize,
            lines: HashMap::new(),
        }
    }

    pub fn geometry(&self) -> LineGeometry {
        self.geometry
    }

    pub fn line(&self, line_number: u64) -> Option<&CacheLineRecord> {
        self.lines.get(&line_number)
    }

    pub fn lines(&self) -> impl Iterator<Item = &CacheLineRecord> {
        self.lines.values()
    }

    pub fn line_of(&self, addr: u64) -> u64 {
        addr >> self.shift
    }

    /// Processes one access and calls `on_line` with the first byte of every
    /// line whose invalidation delta is non-zero. Returns the summed delta.
    pub fn record_line_access_with(
        &mut self,
        tid: ThreadId,
        addr: u64,
        size: u32,
        kind: AccessKind,
        mut on_line: impl FnMut(u64, InvalidationDelta),
    ) -> InvalidationDelta {
        let last = addr + (size.max(1) as u64 - 1);
        let mut total = InvalidationDelta::default();
        let mut piece = addr;
        loop {
            let line_number = piece >> self.shift;
            let line_end = ((line_number + 1) << self.shift).wrapping_sub(1);
            let piece_last = last.min(line_end);
            let d = self.touch(tid, line_number, piece, piece_last, kind);
            if !d.is_zero() {
                on_line(line_number << self.shift, d);
                total.add(d);
            }
            if piece_last == last {
                break;
            }
            piece = piece_last + 1;
        }
        total
    }

    pub fn record_line_access(
        &mut self,
        _ts: Timestamp,
        tid: ThreadId,
        addr: u64,
        size: u32,
        kind: AccessKind,
    ) -> InvalidationDelta {
        self.record_line_access_with(tid, addr, size, kind, |_, _| {})
    }

    fn touch(
        &mut self,
        tid: ThreadId,
        line_number: u64,
        first: u64,
        last: u64,
        kind: AccessKind,
    ) -> InvalidationDelta {
        let g = self.geometry;
        let words = self.words_per_line;
        let line_mask = g.line_size - 1;
        let w0 = ((first & line_mask) / g.word_size) as usize;
        let w1 = ((last & line_mask) / g.word_size) as usize;
        let rec = self.lines.entry(line_number).or_insert_with(|| CacheLineRecord {
            line_number,
            copy_set: ThreadSet::new(),
            write_count: 0,
            invalidations: 0,
            classified_false: 0,
            classified_true: 0,
            word_detail: (g.word_track_threshold == 0).then(|| vec![ThreadSet::new(); words]),
        });

        let mut delta = InvalidationDelta::default();
        match kind {
            AccessKind::Read => {
                rec.copy_set.insert(tid);
                if let Some(wd) = rec.word_detail.as_mut() {
                    for set in &mut wd[w0..=w1] {
                        set.insert(tid);
                    }
                }
            }
            AccessKind::Write => {
                for victim in rec.copy_set.iter().filter(|&v| v != tid) {
                    delta.count += 1;
                    match rec.word_detail.as_ref() {
                        Some(wd) => {
                            if wd[w0..=w1].iter().any(|s| s.contains(victim)) {
                                delta.true_part += 1;
                            } else {
                                delta.false_part += 1;
                            }
                        }
                        None => delta.unclassified_part += 1,
                    }
                }
                rec.invalidations += delta.count;
                rec.classified_false += delta.false_part;
                rec.classified_true += delta.true_part;
                rec.copy_set = ThreadSet::singleton(tid);
                rec.write_count += 1;
                if rec.word_detail.is_none() && rec.write_count >= g.word_track_threshold {
                    rec.word_detail = Some(vec![ThreadSet::new(); words]);
                }
                if let Some(wd) = rec.word_detail.as_mut() {
                    for (w, set) in wd.iter_mut().enumerate() {
                        set.clear();
                        if (w0..=w1).contains(&w) {
                            set.insert(tid);
                        }
                    }
                }
            }
        }
        delta
    }

    /// Sums over lines whose first byte lies in `[addr, addr+size)`.
    pub fn range_sharing_counts(&self, addr: u64, size: u64) -> InvalidationDelta {
        let end = addr + size;
        let first_line = (addr + self.geometry.line_size - 1) >> self.shift;
        let mut out = InvalidationDelta::default();
        let mut line = first_line;
        while (line << self.shift) < end {
            if let Some(r) = self.lines.get(&line) {
                out.add(InvalidationDelta {
                    count: r.invalidations,
                    false_part: r.classified_false,
                    true_part: r.classified_true,
                    unclassified_part: r.unclassified(),
                });
            }
            line += 1;
        }
        out
    }
}
