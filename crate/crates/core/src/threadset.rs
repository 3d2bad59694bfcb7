use smallvec::SmallVec;

use crate::trace::ThreadId;

/// Small sorted set of thread ids.
///
/// Copy sets and per-word accessor sets are almost always a handful of
/// threads, so a sorted inline vector beats a hash set here.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ThreadSet(SmallVec<[ThreadId; 4]>);

impl ThreadSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn singleton(tid: ThreadId) -> Self {
        let mut s = Self::new();
        s.0.push(tid);
        s
    }

    /// Returns `true` if the thread was not present.
    pub fn insert(&mut self, tid: ThreadId) -> bool {
        match self.0.binary_search(&tid) {
            Ok(_) => false,
            Err(pos) => {
                self.0.insert(pos, tid);
                true
            }
        }
    }

    pub fn contains(&self, tid: ThreadId) -> bool {
        self.0.binary_search(&tid).is_ok()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn clear(&mut self) {
        self.0.clear();
    }

    pub fn iter(&self) -> impl Iterator<Item = ThreadId> + '_ {
        self.0.iter().copied()
    }
}

impl FromIterator<ThreadId> for ThreadSet {
    fn from_iter<I: IntoIterator<Item = ThreadId>>(iter: I) -> Self {
        let mut s = ThreadSet::new();
        for t in iter {
            s.insert(t);
        }
        s
    }
}
