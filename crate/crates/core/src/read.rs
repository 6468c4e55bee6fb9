//! Read path: Segment routing, H-lookup, and range scans.
//!
//! All functions taking raw node pointers require the caller to hold an epoch
//! guard (readers) or the writer lock.

use rayon::prelude::*;

use crate::model::{Entry, Key, Value};
use crate::node::{Node, NodeHandle, RouteHit, Segment};
use crate::segmentation::model_predict_bucket;

/// Where a key routes inside one Segment.
#[derive(Clone, Copy, Debug)]
pub struct Route {
    pub sbucket: usize,
    pub hit: RouteHit,
    /// S-Buckets stepped over after the model prediction.
    pub neighbor_steps: u32,
    /// Exclusive upper bound of the chosen child's range inside this
    /// Segment, if the Segment itself knows it.
    pub local_hi: Option<Key>,
}

impl Route {
    pub fn child(&self) -> NodeHandle {
        NodeHandle::new(self.hit.child)
    }
}

impl Segment {
    /// Predict an S-Bucket, walk to the one with the largest pivot `<= key`,
    /// then take the lower-bound entry inside it. Keys below every pivot go
    /// to the leftmost child.
    #[inline]
    pub fn route(&self, key: Key) -> Route {
        let n = self.sbuckets.len();
        let mut j = model_predict_bucket(&self.model, key, n);
        let mut steps = 0;
        while j > 0 && key < self.sbuckets[j].pivot() {
            j -= 1;
            steps += 1;
        }
        while j + 1 < n && key >= self.sbuckets[j + 1].pivot() {
            j += 1;
            steps += 1;
        }
        let hit = self.sbuckets[j].lower_bound(key);
        let local_hi = hit
            .next_pivot
            .or_else(|| self.sbuckets.get(j + 1).map(|sb| sb.pivot()));
        Route {
            sbucket: j,
            hit,
            neighbor_steps: steps,
            local_hi,
        }
    }
}

/// Counters collected by one point lookup.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LookupTrace {
    pub levels: u32,
    pub neighbor_steps: u32,
    pub probes: u32,
}

#[inline]
pub(crate) unsafe fn seg<'a>(node: *const Node) -> &'a Segment {
    match &*node {
        Node::Inner(s) => s,
        Node::Leaf(_) => unreachable!("expected a Segment"),
    }
}

/// Root-to-leaf descent; returns the leaf and its exclusive upper bound.
#[inline]
pub(crate) unsafe fn descend(root: *mut Node, key: Key, trace: &mut LookupTrace) -> (*mut Node, Option<Key>) {
    let mut node = root;
    let mut hi = None;
    while let Node::Inner(s) = &*node {
        let r = s.route(key);
        trace.levels += 1;
        trace.neighbor_steps += r.neighbor_steps;
        hi = r.local_hi.or(hi);
        node = r.hit.child;
    }
    (node, hi)
}

pub(crate) unsafe fn lookup(root: *mut Node, key: Key, early_stop: bool) -> (Option<Value>, LookupTrace) {
    let mut trace = LookupTrace::default();
    if root.is_null() {
        return (None, trace);
    }
    let (leaf, _) = descend(root, key, &mut trace);
    let b = (*leaf).as_dbucket().expect("descent ends at a D-Bucket");
    let (v, probes) = b.h_lookup(key, early_stop);
    trace.probes = probes as u32;
    (v, trace)
}

/// One step of a writer-side descent.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PathStep {
    pub seg: *mut Node,
    /// Exclusive upper bound of this Segment's range.
    pub seg_hi: Option<Key>,
    pub sbucket: usize,
    pub slot: usize,
}

/// Descent recording every Segment passed and the entry chosen in it.
pub(crate) unsafe fn descend_path(root: *mut Node, key: Key, max_depth: usize) -> (Vec<PathStep>, *mut Node, Option<Key>) {
    let mut path = Vec::with_capacity(8);
    let mut node = root;
    let mut hi = None;
    while let Node::Inner(s) = &*node {
        if path.len() == max_depth {
            break;
        }
        let r = s.route(key);
        path.push(PathStep {
            seg: node,
            seg_hi: hi,
            sbucket: r.sbucket,
            slot: r.hit.slot,
        });
        hi = r.local_hi.or(hi);
        node = r.hit.child;
    }
    (path, node, hi)
}

/// Counters for one range query.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RangeStats {
    pub buckets: usize,
    /// Slots visited while copying bucket contents.
    pub slots_scanned: usize,
    pub descents: usize,
}

/// The `count` smallest stored keys `>= start`, sorted. Buckets are copied in
/// order, then each copy is sorted (optionally on the rayon pool) and the
/// runs are concatenated.
pub(crate) unsafe fn range_query(
    root: *mut Node,
    start: Key,
    count: usize,
    parallel: bool,
) -> (Vec<Entry>, RangeStats) {
    let mut stats = RangeStats::default();
    if count == 0 || root.is_null() {
        return (Vec::new(), stats);
    }
    let mut runs: Vec<Vec<Entry>> = Vec::new();
    let mut collected = 0usize;
    let mut cursor = start;
    loop {
        let mut t = LookupTrace::default();
        let (leaf, hi) = descend(root, cursor, &mut t);
        stats.descents += 1;
        let b = (*leaf).as_dbucket().expect("descent ends at a D-Bucket");
        let mut run = Vec::with_capacity(b.len());
        stats.slots_scanned += b.for_each_valid(|e| {
            if e.key >= cursor && hi.is_none_or(|h| e.key < h) {
                run.push(e);
            }
        });
        stats.buckets += 1;
        collected += run.len();
        runs.push(run);
        match hi {
            Some(h) if collected < count && h > cursor => cursor = h,
            _ => break,
        }
    }
    if parallel {
        runs.par_iter_mut().for_each(|r| r.sort_unstable_by_key(|e| e.key));
    } else {
        runs.iter_mut().for_each(|r| r.sort_unstable_by_key(|e| e.key));
    }
    let mut out = Vec::with_capacity(count.min(collected));
    for r in runs {
        let take = (count - out.len()).min(r.len());
        out.extend_from_slice(&r[..take]);
        if out.len() == count {
            break;
        }
    }
    (out, stats)
}
