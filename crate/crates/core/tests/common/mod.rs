//! Naive reference models used by the integration and acceptance tests.
//! Each one replays events directly with plain collections and shares no
//! code with the analyzer.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use numalens_core::trace::{AccessKind, TraceEvent};

pub const PAGE: u64 = 4096;
pub const LINE: u64 = 64;
pub const WORD: u64 = 8;

#[derive(Debug, Clone)]
struct Obj {
    addr: u64,
    size: u64,
    death: Option<u64>,
}

/// First-touch remote accounting per page and per object.
#[derive(Debug, Default)]
pub struct RemoteOracle {
    first: BTreeMap<u64, u32>,
    /// page → (accesses, remote)
    pub pages: BTreeMap<u64, (u64, u64)>,
    objects: Vec<Obj>,
    /// Remote accesses per object, indexed by creation order.
    pub object_remote: Vec<u64>,
}

impl RemoteOracle {
    pub fn new() -> Self {
        Self::default()
    }

    fn owner(&self, addr: u64) -> Option<usize> {
        let inside = |o: &Obj| addr >= o.addr && addr < o.addr + o.size;
        if let Some(i) = self.objects.iter().position(|o| o.death.is_none() && inside(o)) {
            return Some(i);
        }
        let mut best: Option<(u64, usize)> = None;
        for (i, o) in self.objects.iter().enumerate() {
            if let Some(d) = o.death {
                if inside(o) && best.is_none_or(|(bd, _)| d >= bd) {
                    best = Some((d, i));
                }
            }
        }
        best.map(|(_, i)| i)
    }

    pub fn feed(&mut self, ev: &TraceEvent) {
        match ev {
            TraceEvent::Alloc { addr, size, .. } | TraceEvent::GlobalDecl { addr, size, .. } => {
                self.objects.push(Obj {
                    addr: *addr,
                    size: *size,
                    death: None,
                });
                self.object_remote.push(0);
            }
            TraceEvent::Free { ts, addr, .. } => {
                let o = self
                    .objects
                    .iter_mut()
                    .find(|o| o.death.is_none() && o.addr == *addr)
                    .expect("free of live object");
                o.death = Some(ts.0);
            }
            TraceEvent::MemAccess { tid, addr, size, .. } => {
                let mut remote = false;
                let last = addr + *size as u64 - 1;
                for page in addr / PAGE..=last / PAGE {
                    let owner = *self.first.entry(page).or_insert(tid.0);
                    let e = self.pages.entry(page).or_insert((0, 0));
                    e.0 += 1;
                    if owner != tid.0 {
                        e.1 += 1;
                        remote = true;
                    }
                }
                if remote {
                    if let Some(i) = self.owner(*addr) {
                        self.object_remote[i] += 1;
                    }
                }
            }
            _ => {}
        }
    }
}

/// Copy-set model with word detail always on.
#[derive(Debug, Default)]
pub struct InvalidationOracle {
    copies: BTreeMap<u64, BTreeSet<u32>>,
    words: BTreeMap<(u64, u64), BTreeSet<u32>>,
    /// line → (invalidations, false, true)
    pub lines: BTreeMap<u64, (u64, u64, u64)>,
}

impl InvalidationOracle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn feed(&mut self, ev: &TraceEvent) {
        let TraceEvent::MemAccess {
            tid,
            kind,
            addr,
            size,
            ..
        } = ev
        else {
            return;
        };
        let t = tid.0;
        let last = addr + *size as u64 - 1;
        for line in addr / LINE..=last / LINE {
            let lo = (*addr).max(line * LINE);
            let hi = last.min(line * LINE + LINE - 1);
            let touched: Vec<u64> = (lo / WORD..=hi / WORD).collect();
            match kind {
                AccessKind::Read => {
                    self.copies.entry(line).or_default().insert(t);
                    for w in touched {
                        self.words.entry((line, w)).or_default().insert(t);
                    }
                }
                AccessKind::Write => {
                    let victims: Vec<u32> = self
                        .copies
                        .get(&line)
                        .map(|s| s.iter().copied().filter(|&v| v != t).collect())
                        .unwrap_or_default();
                    let e = self.lines.entry(line).or_insert((0, 0, 0));
                    for v in victims {
                        e.0 += 1;
                        let shared = touched
                            .iter()
                            .any(|w| self.words.get(&(line, *w)).is_some_and(|s| s.contains(&v)));
                        if shared {
                            e.2 += 1;
                        } else {
                            e.1 += 1;
                        }
                    }
                    self.copies.insert(line, BTreeSet::from([t]));
                    let first = line * LINE / WORD;
                    for w in first..first + LINE / WORD {
                        self.words.remove(&(line, w));
                    }
                    for w in touched {
                        self.words.insert((line, w), BTreeSet::from([t]));
                    }
                }
            }
        }
    }
}

/// All assignments of `budget` threads with at least one per type that
/// minimize the largest per-thread load `w_i / n_i`.
pub fn min_max_assignments(weights: &[u64], budget: u64) -> Vec<Vec<u64>> {
    fn rec(weights: &[u64], left: u64, cur: &mut Vec<u64>, out: &mut Vec<Vec<u64>>) {
        let k = cur.len();
        if k + 1 == weights.len() {
            cur.push(left);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        let rest = (weights.len() - k - 1) as u64;
        for n in 1..=left - rest {
            cur.push(n);
            rec(weights, left - n, cur, out);
            cur.pop();
        }
    }
    let mut all = Vec::new();
    rec(weights, budget, &mut Vec::new(), &mut all);
    // Compare loads as fractions: w_a / n_a vs w_b / n_b.
    let max_load = |a: &Vec<u64>| {
        (0..weights.len())
            .max_by(|&i, &j| (weights[i] as u128 * a[j] as u128).cmp(&(weights[j] as u128 * a[i] as u128)))
            .map(|i| (weights[i], a[i]))
            .unwrap()
    };
    let less = |x: (u64, u64), y: (u64, u64)| (x.0 as u128 * y.1 as u128) < (y.0 as u128 * x.1 as u128);
    let mut best = max_load(&all[0]);
    for a in &all {
        let l = max_load(a);
        if less(l, best) {
            best = l;
        }
    }
    all.into_iter()
        .filter(|a| {
            let l = max_load(a);
            !less(best, l)
        })
        .collect()
}
