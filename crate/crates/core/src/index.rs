//! The index handle: shared root, reader handles, and structural inspection.

use std::collections::HashSet;
use std::sync::atomic::{AtomicPtr, AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::epoch::{Collector, Guard, LocalHandle, ReclaimStats};
use crate::model::{Entry, IndexConfig, Key, Value};
use crate::node::{Node, NodeHandle};
use crate::read::{self, LookupTrace, RangeStats};

/// Structural-modification counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct SmoStats {
    pub dbucket_splits: u64,
    /// Combined SMOs triggered by a full S-Bucket.
    pub combined_smos: u64,
    pub resegments: u64,
    pub merges: u64,
    /// Merges that found no admissible neighbour and fell back to re-segmenting.
    pub merge_fallbacks: u64,
    /// Times a new root level was added.
    pub root_splits: u64,
    /// Already-published entries moved to another slot of a live bucket.
    /// Nothing on the write path relocates entries, so this stays 0.
    pub shifts_performed: u64,
}

pub(crate) struct WriterState {
    pub stats: SmoStats,
    /// Nodes allocated by the operation in flight; none of them is reachable
    /// by readers until the operation publishes.
    pub fresh: HashSet<usize>,
    pub retire: Vec<*mut Node>,
    pub ops_since_advance: u32,
    /// Skip publishing the valid bit of the n-th placed insert.
    pub fault_skip_publish: Option<u64>,
    pub placed: u64,
}

// SAFETY: raw pointers here are owned by the index and only touched under the
// writer mutex.
unsafe impl Send for WriterState {}

/// Result of [`Index::insert`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Upsert {
    Inserted,
    Updated,
}

/// Bucket-based learned index with one writer and any number of readers.
///
/// Readers never block and never take locks. Writers are serialized by an
/// internal mutex that readers do not touch.
pub struct Index {
    pub(crate) root: AtomicPtr<Node>,
    pub(crate) cfg: IndexConfig,
    pub(crate) collector: Collector,
    pub(crate) writer: Mutex<WriterState>,
    pub(crate) len: AtomicUsize,
}

// SAFETY: all shared mutation goes through atomics; node memory is reclaimed
// through the epoch collector.
unsafe impl Send for Index {}
unsafe impl Sync for Index {}

impl Index {
    /// Empty index.
    pub fn new(cfg: IndexConfig) -> crate::Result<Self> {
        cfg.validate()?;
        Ok(Self::from_root(std::ptr::null_mut(), cfg, 0))
    }

    pub(crate) fn from_root(root: *mut Node, cfg: IndexConfig, len: usize) -> Self {
        Self {
            root: AtomicPtr::new(root),
            cfg,
            collector: Collector::new(),
            writer: Mutex::new(WriterState {
                stats: SmoStats::default(),
                fresh: HashSet::new(),
                retire: Vec::new(),
                ops_since_advance: 0,
                fault_skip_publish: None,
                placed: 0,
            }),
            len: AtomicUsize::new(len),
        }
    }

    /// Bulk load sorted pairs; see [`crate::bulkload::bulk_load`].
    pub fn bulk_load(pairs: &[Entry], cfg: IndexConfig) -> crate::Result<Self> {
        crate::bulkload::bulk_load(pairs, cfg).map(|(idx, _)| idx)
    }

    pub fn config(&self) -> &IndexConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.len.load(Ordering::Relaxed)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of Segment levels; 0 for an empty index.
    pub fn height(&self) -> u32 {
        let root = self.root.load(Ordering::Acquire);
        if root.is_null() {
            0
        } else {
            // SAFETY: the root node is never retired while reachable; level is
            // immutable. Callers racing a root swap may see either height.
            unsafe { (*root).level() }
        }
    }

    pub fn smo_stats(&self) -> SmoStats {
        self.writer.lock().unwrap().stats
    }

    pub fn reclaim_stats(&self) -> ReclaimStats {
        self.collector.stats()
    }

    /// Register a reader. Each thread should hold its own.
    pub fn reader(&self) -> Reader<'_> {
        Reader {
            index: self,
            handle: self.collector.register(),
        }
    }

    /// Point lookup through a temporary reader registration.
    pub fn get(&self, key: Key) -> Option<Value> {
        self.reader().get(key)
    }

    /// Range query through a temporary reader registration.
    pub fn range(&self, start: Key, count: usize) -> Vec<Entry> {
        self.reader().range(start, count)
    }

    /// Arrange for the `nth` (0-based) placed insert to skip setting its valid
    /// bit. Used by differential-check self-tests.
    #[doc(hidden)]
    pub fn inject_skip_publish(&self, nth: u64) {
        let mut w = self.writer.lock().unwrap();
        w.fault_skip_publish = Some(w.placed + nth);
    }

    /// Force an epoch advance attempt (normally done by the writer).
    pub fn try_advance_epoch(&self) -> bool {
        self.collector.try_advance()
    }

    // ---- structural inspection (writer-side; callers must not race a writer) ----

    fn with_walk<F: FnMut(&Node, usize)>(&self, mut f: F) {
        let _w = self.writer.lock().unwrap();
        let root = self.root.load(Ordering::Acquire);
        if root.is_null() {
            return;
        }
        // SAFETY: writer lock held, so no node is retired during the walk.
        unsafe { walk(root, 0, &mut f) }
    }

    /// Leaf bucket sizes in key order.
    pub fn dbucket_sizes(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.with_walk(|n, _| {
            if let Some(b) = n.as_dbucket() {
                out.push(b.len());
            }
        });
        out
    }

    /// All stored pairs in key order.
    pub fn entries(&self) -> Vec<Entry> {
        let mut out = Vec::with_capacity(self.len());
        self.with_walk(|n, _| {
            if let Some(b) = n.as_dbucket() {
                let mut e = b.entries();
                e.sort_unstable_by_key(|e| e.key);
                out.extend(e);
            }
        });
        out
    }

    /// Node counts per level, leaves first.
    pub fn level_sizes(&self) -> Vec<usize> {
        let h = self.height() as usize;
        let mut out = vec![0; if h == 0 { 0 } else { h + 1 }];
        self.with_walk(|n, _| out[n.level() as usize] += 1);
        out
    }

    /// Distinct root-to-leaf path lengths; a single value when balanced.
    pub fn leaf_depths(&self) -> std::collections::BTreeSet<usize> {
        let mut out = std::collections::BTreeSet::new();
        self.with_walk(|n, d| {
            if n.as_dbucket().is_some() {
                out.insert(d);
            }
        });
        out
    }

    /// Children per Segment, grouped by Segment level (index 0 = level 1).
    pub fn fanouts(&self) -> Vec<Vec<usize>> {
        let h = self.height() as usize;
        let mut out = vec![Vec::new(); h];
        self.with_walk(|n, _| {
            if let Some(s) = n.as_segment() {
                out[s.level as usize - 1].push(s.entry_count());
            }
        });
        out
    }

    /// Bytes of every reachable node (slots, masks, models, headers).
    pub fn memory_bytes(&self) -> usize {
        let mut total = std::mem::size_of::<Index>();
        self.with_walk(|n, _| total += n.heap_bytes());
        total
    }

    /// Depth at which `key`'s descent reaches a leaf.
    pub fn leaf_depth(&self, key: Key) -> usize {
        let root = self.root.load(Ordering::Acquire);
        if root.is_null() {
            return 0;
        }
        let g = self.collector.register();
        let _pin = g.pin();
        let mut t = LookupTrace::default();
        // SAFETY: pinned.
        unsafe { read::descend(root, key, &mut t) };
        t.levels as usize
    }

    /// Verify structural invariants; returns a description of the first
    /// violation. Walks the whole tree, so this is for tests.
    pub fn check_invariants(&self) -> Result<(), String> {
        let _w = self.writer.lock().unwrap();
        let root = self.root.load(Ordering::Acquire);
        if root.is_null() {
            return if self.is_empty() {
                Ok(())
            } else {
                Err("null root with non-zero len".into())
            };
        }
        // SAFETY: writer lock held.
        unsafe { check_node(root, None, None, &self.cfg) }?;
        let mut leaves: Vec<(Key, Vec<Entry>)> = Vec::new();
        unsafe {
            walk(root, 0, &mut |n, _| {
                if let Some(b) = n.as_dbucket() {
                    leaves.push((b.pivot(), b.entries()));
                }
            })
        };
        for w in leaves.windows(2) {
            if w[0].0 >= w[1].0 {
                return Err(format!("leaf pivots not increasing: {} then {}", w[0].0, w[1].0));
            }
            if let Some(max) = w[0].1.iter().map(|e| e.key).max() {
                if max >= w[1].0 {
                    return Err(format!("leaf key {max} overlaps next pivot {}", w[1].0));
                }
            }
        }
        let total: usize = leaves.iter().map(|l| l.1.len()).sum();
        if total != self.len() {
            return Err(format!("len {} but {} stored entries", self.len(), total));
        }
        // routing soundness
        for (_, entries) in &leaves {
            for e in entries {
                let (v, _) = unsafe { read::lookup(root, e.key, self.cfg.early_stop_on_empty) };
                if v != Some(e.value) {
                    return Err(format!("key {} not reachable by routing", e.key));
                }
            }
        }
        Ok(())
    }
}

impl Drop for Index {
    fn drop(&mut self) {
        let root = *self.root.get_mut();
        if !root.is_null() {
            // SAFETY: exclusive access; every reachable node is owned by the tree
            // exactly once, retired nodes are unreachable.
            unsafe { free_subtree(root) };
        }
    }
}

pub(crate) unsafe fn walk<F: FnMut(&Node, usize)>(node: *mut Node, depth: usize, f: &mut F) {
    let n = &*node;
    f(n, depth);
    if let Node::Inner(s) = n {
        for (_, child) in s.sorted_entries() {
            walk(child, depth + 1, f);
        }
    }
}

unsafe fn free_subtree(node: *mut Node) {
    if let Node::Inner(s) = &*node {
        for (_, child) in s.sorted_entries() {
            free_subtree(child);
        }
    }
    drop(Box::from_raw(node));
}

unsafe fn check_node(node: *mut Node, lo: Option<Key>, hi: Option<Key>, cfg: &IndexConfig) -> Result<(), String> {
    match &*node {
        Node::Leaf(b) => {
            if b.len() != b.valid_population() {
                return Err(format!("bucket {} count {} != popcount {}", b.pivot(), b.len(), b.valid_population()));
            }
            let keys: Vec<Key> = b.entries().iter().map(|e| e.key).collect();
            if let Some(&min) = keys.iter().min() {
                if min != b.pivot() {
                    return Err(format!("bucket pivot {} != min key {min}", b.pivot()));
                }
            }
            for &k in &keys {
                if lo.is_some_and(|l| k < l) || hi.is_some_and(|h| k >= h) {
                    return Err(format!("key {k} outside [{lo:?}, {hi:?})"));
                }
            }
            Ok(())
        }
        Node::Inner(s) => {
            if s.level as usize > 1 && s.sbuckets.iter().any(|sb| sb.capacity() != cfg.sbucket_capacity) {
                return Err("S-Bucket capacity mismatch".into());
            }
            for w in s.sbuckets.windows(2) {
                if w[0].pivot() >= w[1].pivot() {
                    return Err(format!("S-Bucket pivots not increasing in segment {}", s.pivot()));
                }
            }
            let entries = s.sorted_entries();
            for sb in s.sbuckets.iter() {
                let e = sb.valid_entries();
                if e.is_empty() {
                    return Err("empty S-Bucket".into());
                }
                if e.iter().map(|x| x.0).min() != Some(sb.pivot()) {
                    return Err(format!("S-Bucket pivot {} != min entry pivot", sb.pivot()));
                }
            }
            for (i, &(p, c)) in entries.iter().enumerate() {
                if (*c).level() + 1 != s.level {
                    return Err(format!("child level {} under level {}", (*c).level(), s.level));
                }
                if (*c).pivot() != p {
                    return Err(format!("entry pivot {p} != child pivot {}", (*c).pivot()));
                }
                let child_hi = entries.get(i + 1).map(|e| e.0).or(hi);
                let child_lo = if i == 0 { lo } else { Some(p) };
                check_node(c, child_lo, child_hi, cfg)?;
            }
            Ok(())
        }
    }
}

/// A registered reader; lookups pin an epoch for their duration.
pub struct Reader<'a> {
    index: &'a Index,
    handle: LocalHandle<'a>,
}

impl<'a> Reader<'a> {
    pub fn index(&self) -> &'a Index {
        self.index
    }

    #[inline]
    pub fn get(&self, key: Key) -> Option<Value> {
        self.get_traced(key).0
    }

    /// Stay pinned until the guard drops, e.g. to model a stalled reader.
    /// Nothing retired meanwhile is reclaimed.
    pub fn pin(&self) -> Guard<'_, 'a> {
        self.handle.pin()
    }

    #[inline]
    pub fn get_traced(&self, key: Key) -> (Option<Value>, LookupTrace) {
        let _g = self.handle.pin();
        let root = self.index.root.load(Ordering::Acquire);
        // SAFETY: pinned for the whole descent.
        unsafe { read::lookup(root, key, self.index.cfg.early_stop_on_empty) }
    }

    pub fn range(&self, start: Key, count: usize) -> Vec<Entry> {
        self.range_with_stats(start, count, false).0
    }

    pub fn range_with_stats(&self, start: Key, count: usize, parallel: bool) -> (Vec<Entry>, RangeStats) {
        let _g = self.handle.pin();
        let root = self.index.root.load(Ordering::Acquire);
        // SAFETY: pinned for the whole scan.
        unsafe { read::range_query(root, start, count, parallel) }
    }

    /// Lookup with separate timing for Segment descent and D-Bucket probe.
    pub fn get_timed(&self, key: Key, clock: &mut crate::metrics::OpTimer) -> Option<Value> {
        let _g = self.handle.pin();
        let root = self.index.root.load(Ordering::Acquire);
        if root.is_null() {
            return None;
        }
        let t0 = clock.now();
        let mut trace = LookupTrace::default();
        // SAFETY: pinned.
        let (leaf, _) = unsafe { read::descend(root, key, &mut trace) };
        let t1 = clock.now();
        let b = unsafe { (*leaf).as_dbucket().unwrap() };
        let (v, probes) = b.h_lookup(key, self.index.cfg.early_stop_on_empty);
        let t2 = clock.now();
        clock.record_get(t1 - t0, t2 - t1, probes);
        v
    }

    /// Route `key` to its leaf and hand back the leaf handle.
    pub fn leaf_for(&self, key: Key) -> Option<(NodeHandle, Key)> {
        let _g = self.handle.pin();
        let root = self.index.root.load(Ordering::Acquire);
        if root.is_null() {
            return None;
        }
        let mut t = LookupTrace::default();
        let (leaf, _) = unsafe { read::descend(root, key, &mut t) };
        Some((NodeHandle::new(leaf), unsafe { (*leaf).pivot() }))
    }
}
