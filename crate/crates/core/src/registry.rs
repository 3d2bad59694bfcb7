//! Live address ranges of heap objects and globals, with lifetime-aware
//! lookup and the per-object counters used for data-centric reporting.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::trace::{AccessKind, CallsiteId, Timestamp};

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct ObjectId(pub u32);

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Heap { callsite: CallsiteId },
    Global { name: String },
}

/// Counters shared by single objects and callsite aggregates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectCounters {
    pub reads: u64,
    pub writes: u64,
    pub reads_after_last_write: u64,
    pub remote_accesses: u64,
    pub false_invalidations: u64,
    pub true_invalidations: u64,
    pub unclassified_invalidations: u64,
}

impl ObjectCounters {
    pub fn accesses(&self) -> u64 {
        self.reads + self.writes
    }

    pub fn invalidations(&self) -> u64 {
        self.false_invalidations + self.true_invalidations + self.unclassified_invalidations
    }

    pub fn absorb(&mut self, other: &ObjectCounters) {
        self.reads += other.reads;
        self.writes += other.writes;
        self.reads_after_last_write += other.reads_after_last_write;
        self.remote_accesses += other.remote_accesses;
        self.false_invalidations += other.false_invalidations;
        self.true_invalidations += other.true_invalidations;
        self.unclassified_invalidations += other.unclassified_invalidations;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub id: ObjectId,
    pub origin: Origin,
    pub addr: u64,
    pub size: u64,
    pub birth_ts: Timestamp,
    /// `None` while live; objects never freed die at end of trace.
    pub death_ts: Option<Timestamp>,
    pub last_write_ts: Option<Timestamp>,
    pub counters: ObjectCounters,
}

impl ObjectRecord {
    pub fn end(&self) -> u64 {
        self.addr + self.size
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.addr && addr < self.end()
    }

    /// Half-open lifetime `[birth, death)`.
    pub fn alive_at(&self, ts: Timestamp) -> bool {
        ts >= self.birth_ts && self.death_ts.is_none_or(|d| ts < d)
    }

    pub fn is_live(&self) -> bool {
        self.death_ts.is_none()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallsiteAggregate {
    pub callsite: CallsiteId,
    pub object_count: u64,
    pub counters: ObjectCounters,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegistryError {
    #[error("object {attempted} at {addr:#x} overlaps live object {existing}")]
    OverlapWithLiveObject {
        attempted: ObjectId,
        existing: ObjectId,
        addr: u64,
    },
    #[error("no live object starts at {0:#x}")]
    NotLive(u64),
    #[error("unknown object {0}")]
    UnknownObject(ObjectId),
}

/// Where an access landed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolution {
    Live(ObjectId),
    /// No live object covers the address; this is the most recently freed one
    /// that did.
    Dead(ObjectId),
    Unattributed,
}

impl Resolution {
    pub fn object(self) -> Option<ObjectId> {
        match self {
            Resolution::Live(id) | Resolution::Dead(id) => Some(id),
            Resolution::Unattributed => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessNote {
    Live,
    /// Counted, but the object was already dead.
    AccessToDeadObject,
}

type Bucket = SmallVec<[ObjectId; 2]>;

#[derive(Debug, Clone)]
pub struct ObjectRegistry {
    objects: Vec<ObjectRecord>,
    shift: u32,
    live: HashMap<u64, Bucket>,
    history: HashMap<u64, Bucket>,
    live_by_start: HashMap<u64, ObjectId>,
}

impl Default for ObjectRegistry {
    fn default() -> Self {
        Self::new(4096)
    }
}

impl ObjectRegistry {
    /// `bucket_size` is the index granularity in bytes (a power of two).
    pub fn new(bucket_size: u64) -> Self {
        assert!(bucket_size.is_power_of_two());
        ObjectRegistry {
            objects: Vec::new(),
            shift: bucket_size.trailing_zeros(),
            live: HashMap::new(),
            history: HashMap::new(),
            live_by_start: HashMap::new(),
        }
    }

    fn buckets(&self, addr: u64, size: u64) -> std::ops::RangeInclusive<u64> {
        (addr >> self.shift)..=((addr + size - 1) >> self.shift)
    }

    fn next_id(&self) -> ObjectId {
        ObjectId(self.objects.len() as u32 + 1)
    }

    pub fn get(&self, id: ObjectId) -> Option<&ObjectRecord> {
        (id.0 as usize)
            .checked_sub(1)
            .and_then(|i| self.objects.get(i))
    }

    fn get_mut(&mut self, id: ObjectId) -> Option<&mut ObjectRecord> {
        (id.0 as usize)
            .checked_sub(1)
            .and_then(|i| self.objects.get_mut(i))
    }

    pub fn objects(&self) -> &[ObjectRecord] {
        &self.objects
    }

    fn insert(
        &mut self,
        origin: Origin,
        ts: Timestamp,
        addr: u64,
        size: u64,
    ) -> Result<ObjectId, RegistryError> {
        let id = self.next_id();
        assert!(size > 0, "zero-sized object");
        for b in self.buckets(addr, size) {
            if let Some(bucket) = self.live.get(&b) {
                for &other in bucket {
                    let o = &self.objects[other.0 as usize - 1];
                    if addr < o.end() && o.addr < addr + size {
                        return Err(RegistryError::OverlapWithLiveObject {
                            attempted: id,
                            existing: other,
                            addr,
                        });
                    }
                }
            }
        }
        for b in self.buckets(addr, size) {
            self.live.entry(b).or_default().push(id);
            self.history.entry(b).or_default().push(id);
        }
        self.live_by_start.insert(addr, id);
        self.objects.push(ObjectRecord {
            id,
            origin,
            addr,
            size,
            birth_ts: ts,
            death_ts: None,
            last_write_ts: None,
            counters: ObjectCounters::default(),
        });
        Ok(id)
    }

    pub fn register_allocation(
        &mut self,
        ts: Timestamp,
        addr: u64,
        size: u64,
        callsite: CallsiteId,
    ) -> Result<ObjectId, RegistryError> {
        self.insert(Origin::Heap { callsite }, ts, addr, size)
    }

    /// Globals live for the whole trace.
    pub fn register_global(
        &mut self,
        addr: u64,
        size: u64,
        name: &str,
    ) -> Result<ObjectId, RegistryError> {
        self.insert(
            Origin::Global {
                name: name.to_owned(),
            },
            Timestamp(0),
            addr,
            size,
        )
    }

    pub fn free(&mut self, ts: Timestamp, addr: u64) -> Result<ObjectId, RegistryError> {
        let id = self
            .live_by_start
            .remove(&addr)
            .ok_or(RegistryError::NotLive(addr))?;
        let size = self.objects[id.0 as usize - 1].size;
        for b in self.buckets(addr, size) {
            if let Some(bucket) = self.live.get_mut(&b) {
                bucket.retain(|o| *o != id);
                if bucket.is_empty() {
                    self.live.remove(&b);
                }
            }
        }
        self.objects[id.0 as usize - 1].death_ts = Some(ts);
        Ok(id)
    }

    /// Object whose range contains `addr` and whose lifetime contains `ts`.
    pub fn resolve(&self, addr: u64, ts: Timestamp) -> Option<ObjectId> {
        self.history.get(&(addr >> self.shift)).and_then(|bucket| {
            bucket
                .iter()
                .copied()
                .find(|&id| {
                    let o = &self.objects[id.0 as usize - 1];
                    o.contains(addr) && o.alive_at(ts)
                })
        })
    }

    /// Live object covering `addr` at the current replay position.
    pub fn resolve_live(&self, addr: u64) -> Option<ObjectId> {
        self.live.get(&(addr >> self.shift)).and_then(|bucket| {
            bucket
                .iter()
                .copied()
                .find(|&id| self.objects[id.0 as usize - 1].contains(addr))
        })
    }

    pub fn resolve_for_access(&self, addr: u64) -> Resolution {
        if let Some(id) = self.resolve_live(addr) {
            return Resolution::Live(id);
        }
        let dead = self.history.get(&(addr >> self.shift)).and_then(|bucket| {
            bucket
                .iter()
                .copied()
                .filter(|&id| self.objects[id.0 as usize - 1].contains(addr))
                .max_by_key(|&id| (self.objects[id.0 as usize - 1].death_ts, id))
        });
        dead.map_or(Resolution::Unattributed, Resolution::Dead)
    }

    pub fn record_object_access(
        &mut self,
        id: ObjectId,
        ts: Timestamp,
        kind: AccessKind,
    ) -> Result<AccessNote, RegistryError> {
        let o = self.get_mut(id).ok_or(RegistryError::UnknownObject(id))?;
        match kind {
            AccessKind::Write => {
                o.counters.writes += 1;
                o.last_write_ts = Some(ts);
                o.counters.reads_after_last_write = 0;
            }
            AccessKind::Read => {
                o.counters.reads += 1;
                if o.last_write_ts.is_none_or(|w| ts > w) {
                    o.counters.reads_after_last_write += 1;
                }
            }
        }
        Ok(if o.is_live() {
            AccessNote::Live
        } else {
            AccessNote::AccessToDeadObject
        })
    }

    pub fn add_remote(&mut self, id: ObjectId) -> Result<(), RegistryError> {
        let o = self.get_mut(id).ok_or(RegistryError::UnknownObject(id))?;
        o.counters.remote_accesses += 1;
        Ok(())
    }

    pub fn add_invalidations(
        &mut self,
        id: ObjectId,
        false_part: u64,
        true_part: u64,
        unclassified: u64,
    ) -> Result<(), RegistryError> {
        let o = self.get_mut(id).ok_or(RegistryError::UnknownObject(id))?;
        o.counters.false_invalidations += false_part;
        o.counters.true_invalidations += true_part;
        o.counters.unclassified_invalidations += unclassified;
        Ok(())
    }

    pub fn callsite_aggregates(&self) -> BTreeMap<CallsiteId, CallsiteAggregate> {
        let mut out: BTreeMap<CallsiteId, CallsiteAggregate> = BTreeMap::new();
        for o in &self.objects {
            if let Origin::Heap { callsite } = o.origin {
                let agg = out.entry(callsite).or_insert_with(|| CallsiteAggregate {
                    callsite,
                    ..Default::default()
                });
                agg.object_count += 1;
                agg.counters.absorb(&o.counters);
            }
        }
        out
    }
}
