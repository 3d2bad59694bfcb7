//! Shadow page map: first-touch ownership and remote-access classification,
//! with per-block counters and accessing-thread tallies on busy pages.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::trace::{AccessKind, ThreadId, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AccessClass {
    Local,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageGeometry {
    pub page_size: u64,
    pub blocks_per_page: u64,
    pub detail_threshold: u64,
}

impl Default for PageGeometry {
    fn default() -> Self {
        PageGeometry {
            page_size: 4096,
            blocks_per_page: 64,
            detail_threshold: 64,
        }
    }
}

impl PageGeometry {
    pub fn block_size(&self) -> u64 {
        self.page_size / self.blocks_per_page
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PageDetail {
    pub block_access: Vec<u64>,
    pub block_remote: Vec<u64>,
    /// Accesses per thread since detail activation, kept sorted by tid.
    pub thread_accesses: SmallVec<[(ThreadId, u64); 4]>,
}

impl PageDetail {
    fn new(blocks: usize) -> Self {
        PageDetail {
            block_access: vec![0; blocks],
            block_remote: vec![0; blocks],
            thread_accesses: SmallVec::new(),
        }
    }

    fn bump_thread(&mut self, tid: ThreadId) {
        match self.thread_accesses.binary_search_by_key(&tid, |e| e.0) {
            Ok(i) => self.thread_accesses[i].1 += 1,
            Err(i) => self.thread_accesses.insert(i, (tid, 1)),
        }
    }

    pub fn accessing_threads(&self) -> impl Iterator<Item = ThreadId> + '_ {
        self.thread_accesses.iter().map(|e| e.0)
    }

    /// Smallest contiguous tid interval whose threads account for at least
    /// `quantile` of the recorded accesses. Ties go to the lower interval.
    pub fn dominant_span(&self, quantile: f64) -> Option<(ThreadId, ThreadId)> {
        let entries = &self.thread_accesses;
        let total: u64 = entries.iter().map(|e| e.1).sum();
        if total == 0 {
            return None;
        }
        let need = quantile * total as f64;
        let enough = |s: u64| s as f64 + 1e-9 >= need;
        let mut best: Option<(u32, u32)> = None;
        let mut lo = 0usize;
        let mut sum = 0u64;
        for hi in 0..entries.len() {
            sum += entries[hi].1;
            while lo < hi && enough(sum - entries[lo].1) {
                sum -= entries[lo].1;
                lo += 1;
            }
            if enough(sum) {
                let cand = (entries[lo].0 .0, entries[hi].0 .0);
                let better = match best {
                    None => true,
                    Some(b) => cand.1 - cand.0 < b.1 - b.0,
                };
                if better {
                    best = Some(cand);
                }
            }
        }
        best.map(|(a, b)| (ThreadId(a), ThreadId(b)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PageRecord {
    pub page_number: u64,
    pub first_toucher: ThreadId,
    pub access_count: u64,
    pub remote_count: u64,
    pub detail: Option<Box<PageDetail>>,
}

/// Dominant thread span of one page of an object; `None` when the page never
/// reached the detail threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageSpan {
    pub page_number: u64,
    pub span: Option<(ThreadId, ThreadId)>,
}

#[derive(Debug, Clone)]
pub struct PageProfiler {
    geometry: PageGeometry,
    shift: u32,
    pages: HashMap<u64, PageRecord>,
}

impl PageProfiler {
    pub fn new(geometry: PageGeometry) -> Self {
        assert!(geometry.page_size.is_power_of_two());
        assert!(geometry.blocks_per_page > 0 && geometry.page_size.is_multiple_of(geometry.blocks_per_page));
        PageProfiler {
            geometry,
            shift: geometry.page_size.trailing_zeros(),
            pages: HashMap::new(),
        }
    }

    pub fn geometry(&self) -> PageGeometry {
        self.geometry
    }

    pub fn page(&self, page_number: u64) -> Option<&PageRecord> {
        self.pages.get(&page_number)
    }

    pub fn pages(&self) -> impl Iterator<Item = &PageRecord> {
        self.pages.values()
    }

    pub fn page_of(&self, addr: u64) -> u64 {
        addr >> self.shift
    }

    fn touch(&mut self, tid: ThreadId, addr: u64) -> AccessClass {
        let g = self.geometry;
        let page_number = addr >> self.shift;
        let rec = self.pages.entry(page_number).or_insert_with(|| PageRecord {
            page_number,
            first_toucher: tid,
            access_count: 0,
            remote_count: 0,
            detail: None,
        });
        let class = if rec.first_toucher == tid {
            AccessClass::Local
        } else {
            AccessClass::Remote
        };
        rec.access_count += 1;
        if class == AccessClass::Remote {
            rec.remote_count += 1;
        }
        if rec.detail.is_none() && rec.access_count >= g.detail_threshold {
            rec.detail = Some(Box::new(PageDetail::new(g.blocks_per_page as usize)));
        }
        if let Some(d) = rec.detail.as_deref_mut() {
            let block = ((addr & (g.page_size - 1)) / g.block_size()) as usize;
            d.block_access[block] += 1;
            if class == AccessClass::Remote {
                d.block_remote[block] += 1;
            }
            d.bump_thread(tid);
        }
        class
    }

    /// Classifies one access. Accesses crossing a page boundary are split and
    /// counted once per page; the result is `Remote` if any piece is remote.
    pub fn record_page_access(
        &mut self,
        _ts: Timestamp,
        tid: ThreadId,
        addr: u64,
        size: u32,
        _kind: AccessKind,
    ) -> AccessClass {
        let last = addr + (size.max(1) as u64 - 1);
        let mut class = AccessClass::Local;
        let mut piece = addr;
        loop {
            if self.touch(tid, piece) == AccessClass::Remote {
                class = AccessClass::Remote;
            }
            let next = ((piece >> self.shift) + 1) << self.shift;
            if next == 0 || next > last {
                break;
            }
            piece = next;
        }
        class
    }

    /// Block-based remote estimate for the object occupying `[addr, addr+size)`.
    ///
    /// Detailed pages contribute the remote counts of blocks whose first byte
    /// lies inside the object. Undetailed pages contribute their whole remote
    /// count when the object covers the page, otherwise a byte-overlap share
    /// rounded half-up.
    pub fn object_remote_count(&self, addr: u64, size: u64) -> u64 {
        let g = self.geometry;
        let end = addr + size;
        let bs = g.block_size();
        let mut total = 0u64;
        for page_number in (addr >> self.shift)..=((end - 1) >> self.shift) {
            let Some(rec) = self.pages.get(&page_number) else {
                continue;
            };
            let page_start = page_number << self.shift;
            let page_end = page_start + g.page_size;
            match rec.detail.as_deref() {
                Some(d) => {
                    for (b, remote) in d.block_remote.iter().enumerate() {
                        let first = page_start + b as u64 * bs;
                        if first >= addr && first < end {
                            total += remote;
                        }
                    }
                }
                None if addr <= page_start && end >= page_end => total += rec.remote_count,
                None => {
                    let overlap = (end.min(page_end) - addr.max(page_start)) as u128;
                    let num = rec.remote_count as u128 * overlap * 2 + g.page_size as u128;
                    total += (num / (2 * g.page_size as u128)) as u64;
                }
            }
        }
        total
    }

    pub fn page_thread_spans(&self, addr: u64, size: u64, quantile: f64) -> Vec<PageSpan> {
        let end = addr + size;
        ((addr >> self.shift)..=((end - 1) >> self.shift))
            .filter_map(|page_number| {
                self.pages.get(&page_number).map(|rec| PageSpan {
                    page_number,
                    span: rec.detail.as_deref().and_then(|d| d.dominant_span(quantile)),
                })
            })
            .collect()
    }
}
