//! Write path: hint-assisted insert, D-Bucket split, and the combined SMO
//! (ReSegment / MergeNeighbors) with upward propagation.
//!
//! Every structural change is copy-on-write: new nodes are built off to the
//! side, published with a release store into their parent, and only then is
//! the old entry invalidated. Replaced nodes are retired at the end of the
//! operation.

use std::sync::atomic::Ordering;
use std::time::{Duration, Instant};

use crate::bulkload::{build_level, build_up};
use crate::hints::HintFn;
use crate::index::{Index, Upsert, WriterState};
use crate::metrics::OpTimer;
use crate::model::{Entry, Key, Value};
use crate::node::{alloc, DBucket, InsertOutcome, Node};
use crate::read::{descend_path, seg, PathStep};
use crate::segmentation::{greedy_corridor, Corridor};

const ADVANCE_EVERY: u32 = 64;

/// Exclusive upper bound as a hint endpoint.
fn wide(hi: Option<Key>) -> u128 {
    hi.map_or(1u128 << 64, u128::from)
}

/// Split a full bucket's contents plus one new pair around the median key.
/// The left half (keys `<=` median) keeps the smallest key as its pivot; the
/// right half's pivot is its own minimum.
pub(crate) fn split_entries(mut all: Vec<Entry>) -> (Vec<Entry>, Vec<Entry>) {
    assert!(all.len() >= 2);
    let mid = (all.len() - 1) / 2;
    all.select_nth_unstable_by_key(mid, |e| e.key);
    let right = all.split_off(mid + 1);
    (all, right)
}

impl Index {
    /// Insert or overwrite. Serialized against other writers; never blocks
    /// readers.
    pub fn insert(&self, key: Key, value: Value) -> Upsert {
        let mut w = self.writer.lock().unwrap();
        // SAFETY: writer lock held; node lifetimes are managed by the collector.
        let (out, _) = unsafe { self.insert_locked(&mut w, key, value) };
        self.finish_op(&mut w);
        out
    }

    /// [`insert`](Self::insert) with the split/SMO part timed separately.
    /// `lookup` is the caller's timing of a lookup of the same key.
    pub fn insert_timed(&self, key: Key, value: Value, lookup: Duration, clock: &mut OpTimer) -> Upsert {
        let t0 = Instant::now();
        let mut w = self.writer.lock().unwrap();
        // SAFETY: as in `insert`.
        let (out, mm) = unsafe { self.insert_locked(&mut w, key, value) };
        let t1 = Instant::now();
        self.finish_op(&mut w);
        let mm = mm + t1.elapsed();
        drop(w);
        clock.record_put(t0.elapsed(), mm, lookup);
        out
    }

    unsafe fn insert_locked(&self, w: &mut WriterState, key: Key, value: Value) -> (Upsert, Duration) {
        let root = self.root.load(Ordering::Acquire);
        if root.is_null() {
            let b = DBucket::new(self.cfg.dbucket_capacity, key, HintFn::new(self.cfg.hint_kind, key, wide(None)));
            b.h_insert(key, value);
            let new_root = build_up(vec![(key, alloc(Node::Leaf(b)))], 0, &self.cfg, None);
            self.root.store(new_root, Ordering::Release);
            self.len.fetch_add(1, Ordering::Relaxed);
            w.placed += 1;
            return (Upsert::Inserted, Duration::ZERO);
        }
        let below_min = key < (*root).pivot();
        let (path, leaf, hi) = descend_path(root, key, usize::MAX);
        let b = (*leaf).as_dbucket().expect("descent ends at a D-Bucket");
        let publish = w.fault_skip_publish != Some(w.placed);
        let mut mm = Duration::ZERO;
        match b.h_insert_inner(key, value, publish) {
            InsertOutcome::Overwrote(_) => return (Upsert::Updated, mm),
            InsertOutcome::Placed(_) => w.placed += 1,
            InsertOutcome::BucketFull => {
                w.placed += 1;
                let t = Instant::now();
                self.split(w, &path, leaf, hi, key, value);
                mm = t.elapsed();
            }
        }
        self.len.fetch_add(1, Ordering::Relaxed);
        if below_min {
            self.lower_leftmost(key);
        }
        (Upsert::Inserted, mm)
    }

    /// Copy a full D-Bucket and the new pair into two fresh buckets and hand
    /// their entries to the parent.
    unsafe fn split(&self, w: &mut WriterState, path: &[PathStep], leaf: *mut Node, hi: Option<Key>, key: Key, value: Value) {
        let old = (*leaf).as_dbucket().unwrap();
        let mut all = old.entries();
        all.push(Entry::new(key, value));
        let (left, right) = split_entries(all);
        let lpiv = left.iter().map(|e| e.key).min().unwrap();
        let rpiv = right.iter().map(|e| e.key).min().unwrap();
        let cap = self.cfg.dbucket_capacity;
        let kind = self.cfg.hint_kind;
        let make = |pivot: Key, hi: u128, items: &[Entry]| {
            let b = DBucket::new(cap, pivot, HintFn::new(kind, pivot, hi));
            for e in items {
                b.h_insert(e.key, e.value);
            }
            alloc(Node::Leaf(b))
        };
        let l = make(lpiv, u128::from(rpiv), &left);
        let r = make(rpiv, wide(hi), &right);
        w.fresh.insert(l as usize);
        w.fresh.insert(r as usize);
        w.stats.dbucket_splits += 1;
        w.retire.push(leaf);
        self.propagate(w, path, path.len(), vec![(lpiv, l), (rpiv, r)]);
    }

    /// Replace the entry chosen at `path[depth - 1]` by `entries`. With
    /// `depth == 0` the entries become (or are built into) the new root.
    pub(crate) unsafe fn propagate(&self, w: &mut WriterState, path: &[PathStep], depth: usize, entries: Vec<(Key, *mut Node)>) {
        if depth == 0 {
            let new_root = if entries.len() == 1 {
                entries[0].1
            } else {
                w.stats.root_splits += 1;
                let level = (*entries[0].1).level();
                build_up(entries, level, &self.cfg, None)
            };
            self.root.store(new_root, Ordering::Release);
            return;
        }
        let step = path[depth - 1];
        let sb = &seg(step.seg).sbuckets[step.sbucket];
        let epoch = self.collector.epoch();
        let mut free = sb.free_mask(epoch);
        if free.count_ones() as usize >= entries.len() {
            for &(p, c) in &entries {
                let slot = free.trailing_zeros() as usize;
                free &= free - 1;
                sb.publish(slot, p, c);
            }
            sb.invalidate(step.slot, epoch);
            return;
        }
        self.combined_smo(w, path, depth, entries);
    }

    /// The S-Bucket at `path[depth - 1]` has no room: re-segment the Segment,
    /// or merge it with its neighbours if they have churned enough.
    unsafe fn combined_smo(&self, w: &mut WriterState, path: &[PathStep], depth: usize, entries: Vec<(Key, *mut Node)>) {
        w.stats.combined_smos += 1;
        let step = path[depth - 1];
        let s = seg(step.seg);
        let mut counts = vec![s.smo_count()];
        let (mut lo_node, mut hi_bound) = (step.seg, step.seg_hi);
        for _ in 0..self.cfg.neighbor_window {
            match self.left_neighbor(lo_node, depth - 1) {
                Some((n, _)) => {
                    counts.push(seg(n).smo_count());
                    lo_node = n;
                }
                None => break,
            }
        }
        for _ in 0..self.cfg.neighbor_window {
            match self.right_neighbor(hi_bound, depth - 1) {
                Some((n, h)) => {
                    counts.push(seg(n).smo_count());
                    hi_bound = h;
                }
                None => break,
            }
        }
        let mean = counts.iter().map(|&c| f64::from(c)).sum::<f64>() / counts.len() as f64;
        if mean < f64::from(self.cfg.merge_threshold) {
            self.resegment(w, path, depth, entries);
        } else {
            self.merge_neighbors(w, path, depth, entries);
        }
    }

    /// Node `steps` levels below the root on the descent path of `key`.
    unsafe fn node_at(&self, key: Key, steps: usize) -> (Vec<PathStep>, *mut Node, Option<Key>) {
        descend_path(self.root.load(Ordering::Acquire), key, steps)
    }

    unsafe fn left_neighbor(&self, node: *mut Node, steps: usize) -> Option<(*mut Node, Option<Key>)> {
        let p = (*node).pivot();
        if p == 0 {
            return None;
        }
        let (_, n, h) = self.node_at(p - 1, steps);
        (n != node && matches!(&*n, Node::Inner(_))).then_some((n, h))
    }

    unsafe fn right_neighbor(&self, hi: Option<Key>, steps: usize) -> Option<(*mut Node, Option<Key>)> {
        let (_, n, h) = self.node_at(hi?, steps);
        matches!(&*n, Node::Inner(_)).then_some((n, h))
    }

    /// Entries of the Segment at `path[depth - 1]` with the chosen one
    /// replaced by `entries`, sorted by pivot.
    unsafe fn substituted(&self, step: PathStep, entries: &[(Key, *mut Node)]) -> Vec<(Key, *mut Node)> {
        let s = seg(step.seg);
        let mut all = Vec::with_capacity(s.entry_count() + entries.len());
        for (j, sb) in s.sbuckets.iter().enumerate() {
            for (slot, p, c) in sb.sorted_entries_with_slots() {
                if j == step.sbucket && slot == step.slot {
                    all.extend_from_slice(entries);
                } else {
                    all.push((p, c));
                }
            }
        }
        all.sort_by_key(|e| e.0);
        all
    }

    /// Merge the Segment's entries with the new ones, re-run the corridor, and
    /// build one fresh Segment per cut.
    unsafe fn resegment(&self, w: &mut WriterState, path: &[PathStep], depth: usize, entries: Vec<(Key, *mut Node)>) {
        let step = path[depth - 1];
        let s = seg(step.seg);
        let all = self.substituted(step, &entries);
        let cuts = build_level(&all, s.level, s.smo_count() + 1, &self.cfg);
        for &(_, n) in &cuts {
            w.fresh.insert(n as usize);
        }
        w.stats.resegments += 1;
        w.retire.push(step.seg);
        self.propagate(w, path, depth - 1, cuts);
    }

    /// Grow a run of neighbouring Segments that fits one corridor, then
    /// rebuild the subtree of their least common ancestor from its leaves.
    unsafe fn merge_neighbors(&self, w: &mut WriterState, path: &[PathStep], depth: usize, entries: Vec<(Key, *mut Node)>) {
        let step = path[depth - 1];
        let steps = depth - 1;
        let eps = self.cfg.corridor_error;
        let mut pivots: Vec<Key> = self.substituted(step, &entries).iter().map(|e| e.0).collect();
        if greedy_corridor(&pivots, eps).len() != 1 {
            w.stats.merge_fallbacks += 1;
            return self.resegment(w, path, depth, entries);
        }
        let mut left = step.seg;
        let mut added = 0usize;
        while let Some((n, _)) = self.left_neighbor(left, steps) {
            let mut cand: Vec<Key> = seg(n).sorted_entries().iter().map(|e| e.0).collect();
            cand.extend_from_slice(&pivots);
            if greedy_corridor(&cand, eps).len() != 1 {
                break;
            }
            pivots = cand;
            left = n;
            added += 1;
        }
        let mut corridor = Corridor::new(pivots[0], eps);
        for &p in &pivots[1..] {
            let ok = corridor.push(p);
            debug_assert!(ok);
        }
        let mut right = step.seg;
        let mut hi = step.seg_hi;
        'grow: while let Some((n, h)) = self.right_neighbor(hi, steps) {
            let mut trial = corridor.clone();
            for (p, _) in seg(n).sorted_entries() {
                if !trial.push(p) {
                    break 'grow;
                }
            }
            corridor = trial;
            right = n;
            hi = h;
            added += 1;
        }
        if added == 0 {
            w.stats.merge_fallbacks += 1;
            return self.resegment(w, path, depth, entries);
        }
        w.stats.merges += 1;

        // Least common ancestor by comparing root-descent paths.
        let (lpath, lnode, _) = self.node_at((*left).pivot(), steps);
        let (rpath, rnode, _) = self.node_at((*right).pivot(), steps);
        debug_assert!(lnode == left && rnode == right);
        let mut lca_depth = 0;
        while lca_depth + 1 < steps && lpath[lca_depth + 1].seg == rpath[lca_depth + 1].seg {
            lca_depth += 1;
        }
        debug_assert!(lpath[lca_depth].seg == rpath[lca_depth].seg);
        let lca = lpath[lca_depth].seg;
        debug_assert!(lca == path[lca_depth].seg);
        let lca_level = seg(lca).level;

        // Leaves under the LCA, with the replaced child swapped for the new
        // entries' subtrees.
        let mut leaves = Vec::new();
        self.collect_leaves(w, lca, step, &entries, &mut leaves);
        let mut level_entries = leaves;
        for level in 1..=lca_level {
            level_entries = build_level(&level_entries, level, 0, &self.cfg);
            for &(_, n) in &level_entries {
                w.fresh.insert(n as usize);
            }
        }
        self.propagate(w, path, lca_depth, level_entries);
    }

    /// Append the leaves below `node` in key order. Old Segments are retired;
    /// fresh unpublished Segments are freed on the spot.
    unsafe fn collect_leaves(&self, w: &mut WriterState, node: *mut Node, replaced: PathStep, entries: &[(Key, *mut Node)], out: &mut Vec<(Key, *mut Node)>) {
        let s = match &*node {
            Node::Leaf(b) => {
                out.push((b.pivot(), node));
                return;
            }
            Node::Inner(s) => s,
        };
        for (j, sb) in s.sbuckets.iter().enumerate() {
            for (slot, _, c) in sb.sorted_entries_with_slots() {
                if node == replaced.seg && j == replaced.sbucket && slot == replaced.slot {
                    for &(_, e) in entries {
                        self.collect_leaves(w, e, replaced, entries, out);
                    }
                } else {
                    self.collect_leaves(w, c, replaced, entries, out);
                }
            }
        }
        if w.fresh.remove(&(node as usize)) {
            drop(Box::from_raw(node));
        } else {
            w.retire.push(node);
        }
    }

    /// Lower the routing pivots along the path of a new global minimum.
    unsafe fn lower_leftmost(&self, key: Key) {
        let (path, leaf, _) = descend_path(self.root.load(Ordering::Acquire), key, usize::MAX);
        (*leaf).as_dbucket().unwrap().lower_pivot(key);
        for step in path.iter().rev() {
            seg(step.seg).sbuckets[step.sbucket].lower_entry_pivot(step.slot, key);
        }
    }

    fn finish_op(&self, w: &mut WriterState) {
        w.fresh.clear();
        let retired = !w.retire.is_empty();
        for n in w.retire.drain(..) {
            // SAFETY: every retired node was unlinked by this operation.
            unsafe { self.collector.retire(n) };
        }
        w.ops_since_advance += 1;
        if retired || w.ops_since_advance >= ADVANCE_EVERY {
            w.ops_since_advance = 0;
            self.collector.try_advance();
        }
    }
}
