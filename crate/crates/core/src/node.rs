//! Node layout: D-Buckets (leaves), S-Buckets and Segments (inner nodes).
//!
//! Every field a reader may observe while the writer mutates it is an atomic.
//! Slot contents are written with relaxed stores and published by a release
//! `fetch_or` on the valid mask; readers load the mask with acquire before
//! touching the slot. Pivots are lowered only after the data is visible.

use std::sync::atomic::{AtomicPtr, AtomicU32, AtomicU64, Ordering};

use crate::hints::HintFn;
use crate::model::{Entry, Key, LinearModel, Value};

/// A tree node. Children of a level-1 Segment are leaves; children of a
/// level-`n` Segment are level-`n-1` Segments.
pub enum Node {
    Inner(Segment),
    Leaf(DBucket),
}

impl Node {
    #[inline]
    pub fn as_segment(&self) -> Option<&Segment> {
        match self {
            Node::Inner(s) => Some(s),
            Node::Leaf(_) => None,
        }
    }

    #[inline]
    pub fn as_dbucket(&self) -> Option<&DBucket> {
        match self {
            Node::Leaf(b) => Some(b),
            Node::Inner(_) => None,
        }
    }

    pub fn pivot(&self) -> Key {
        match self {
            Node::Inner(s) => s.pivot(),
            Node::Leaf(b) => b.pivot(),
        }
    }

    /// 0 for leaves.
    pub fn level(&self) -> u32 {
        match self {
            Node::Inner(s) => s.level,
            Node::Leaf(_) => 0,
        }
    }

    pub fn kind(&self) -> NodeKind {
        match self {
            Node::Inner(_) => NodeKind::Segment,
            Node::Leaf(_) => NodeKind::DBucket,
        }
    }

    /// Bytes owned by this node alone (children excluded).
    pub fn heap_bytes(&self) -> usize {
        std::mem::size_of::<Node>()
            + match self {
                Node::Inner(s) => s.owned_bytes(),
                Node::Leaf(b) => b.owned_bytes(),
            }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Segment,
    DBucket,
}

/// Opaque reference to a live node plus its kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeHandle {
    pub(crate) ptr: *mut Node,
    pub kind: NodeKind,
}

// SAFETY: a handle is only dereferenced under an epoch guard or by the writer.
unsafe impl Send for NodeHandle {}
unsafe impl Sync for NodeHandle {}

impl NodeHandle {
    pub(crate) fn new(ptr: *mut Node) -> Self {
        // SAFETY: callers pass live nodes.
        let kind = unsafe { (*ptr).kind() };
        Self { ptr, kind }
    }

    pub fn addr(&self) -> usize {
        self.ptr as usize
    }
}

pub(crate) fn alloc(node: Node) -> *mut Node {
    Box::into_raw(Box::new(node))
}

#[inline]
fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

struct Slot {
    key: AtomicU64,
    value: AtomicU64,
}

/// Outcome of a hint-assisted insert into one D-Bucket.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InsertOutcome {
    Placed(usize),
    Overwrote(usize),
    BucketFull,
}

/// Leaf container: unsorted key-value slots addressed through a hint.
pub struct DBucket {
    pivot: AtomicU64,
    count: AtomicU32,
    hint: HintFn,
    valid: Box<[AtomicU64]>,
    slots: Box<[Slot]>,
}

impl DBucket {
    pub fn new(capacity: usize, pivot: Key, hint: HintFn) -> Self {
        assert!(capacity >= 1);
        Self {
            pivot: AtomicU64::new(pivot),
            count: AtomicU32::new(0),
            hint,
            valid: (0..words_for(capacity)).map(|_| AtomicU64::new(0)).collect(),
            slots: (0..capacity)
                .map(|_| Slot {
                    key: AtomicU64::new(0),
                    value: AtomicU64::new(0),
                })
                .collect(),
        }
    }

    #[inline]
    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    #[inline]
    pub fn pivot(&self) -> Key {
        self.pivot.load(Ordering::Acquire)
    }

    pub(crate) fn lower_pivot(&self, key: Key) {
        if key < self.pivot.load(Ordering::Relaxed) {
            self.pivot.store(key, Ordering::Release);
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.count.load(Ordering::Acquire) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_full(&self) -> bool {
        self.len() == self.capacity()
    }

    pub fn hint(&self) -> HintFn {
        self.hint
    }

    #[inline]
    pub fn hint_slot(&self, key: Key) -> usize {
        self.hint.slot(key, self.capacity())
    }

    #[inline]
    pub fn is_valid(&self, slot: usize) -> bool {
        self.valid[slot / 64].load(Ordering::Acquire) >> (slot % 64) & 1 == 1
    }

    /// Key and value of a slot; only meaningful if `is_valid(slot)` was
    /// observed first.
    #[inline]
    fn read_slot(&self, slot: usize) -> Entry {
        let s = &self.slots[slot];
        Entry::new(s.key.load(Ordering::Relaxed), s.value.load(Ordering::Acquire))
    }

    /// Population of the valid mask.
    pub fn valid_population(&self) -> usize {
        self.valid
            .iter()
            .map(|w| w.load(Ordering::Acquire).count_ones() as usize)
            .sum()
    }

    /// Hint-assisted lookup. Returns the value (if any) and the number of
    /// slots probed.
    #[inline]
    pub fn h_lookup(&self, key: Key, early_stop: bool) -> (Option<Value>, usize) {
        let cap = self.capacity();
        let mut slot = self.hint_slot(key);
        for probes in 1..=cap {
            if self.is_valid(slot) {
                let e = self.read_slot(slot);
                if e.key == key {
                    return (Some(e.value), probes);
                }
            } else if early_stop {
                return (None, probes);
            }
            slot += 1;
            if slot == cap {
                slot = 0;
            }
        }
        (None, cap)
    }

    /// Hint-assisted insert (writer only). Writes the slot, publishes the
    /// valid bit, then lowers the pivot if `key` is a new minimum.
    pub(crate) fn h_insert(&self, key: Key, value: Value) -> InsertOutcome {
        self.h_insert_inner(key, value, true)
    }

    /// Like [`h_insert`](Self::h_insert) but `publish == false` skips setting
    /// the valid bit. Exists only for fault-injection self-tests.
    pub(crate) fn h_insert_inner(&self, key: Key, value: Value, publish: bool) -> InsertOutcome {
        let cap = self.capacity();
        let mut slot = self.hint_slot(key);
        let full = self.is_full();
        for _ in 0..cap {
            if self.is_valid(slot) {
                let s = &self.slots[slot];
                if s.key.load(Ordering::Relaxed) == key {
                    s.value.store(value, Ordering::Release);
                    return InsertOutcome::Overwrote(slot);
                }
            } else if !full {
                let s = &self.slots[slot];
                s.key.store(key, Ordering::Relaxed);
                s.value.store(value, Ordering::Relaxed);
                if publish {
                    self.valid[slot / 64].fetch_or(1 << (slot % 64), Ordering::Release);
                    self.count.fetch_add(1, Ordering::Release);
                    self.lower_pivot(key);
                }
                return InsertOutcome::Placed(slot);
            }
            slot += 1;
            if slot == cap {
                slot = 0;
            }
        }
        InsertOutcome::BucketFull
    }

    /// All valid entries in slot order.
    pub fn entries(&self) -> Vec<Entry> {
        let mut out = Vec::with_capacity(self.len());
        self.for_each_valid(|e| out.push(e));
        out
    }

    /// Visit every valid entry; returns the number of slots scanned.
    pub fn for_each_valid(&self, mut f: impl FnMut(Entry)) -> usize {
        for (w, word) in self.valid.iter().enumerate() {
            let mut bits = word.load(Ordering::Acquire);
            while bits != 0 {
                let slot = w * 64 + bits.trailing_zeros() as usize;
                f(self.read_slot(slot));
                bits &= bits - 1;
            }
        }
        self.capacity()
    }

    fn owned_bytes(&self) -> usize {
        self.slots.len() * std::mem::size_of::<Slot>() + self.valid.len() * 8
    }
}

struct RouteEntry {
    pivot: AtomicU64,
    child: AtomicPtr<Node>,
}

/// Result of the in-S-Bucket lower-bound scan.
#[derive(Clone, Copy, Debug)]
pub struct RouteHit {
    pub slot: usize,
    pub pivot: Key,
    pub child: *mut Node,
    /// Smallest valid pivot in this S-Bucket greater than `pivot`.
    pub next_pivot: Option<Key>,
}

/// Fixed-capacity, unsorted run of `(pivot, child)` routing entries.
pub struct SBucket {
    pivot: AtomicU64,
    valid: AtomicU64,
    /// Invalidated slots that readers may still be looking at. Writer-only.
    dead: AtomicU64,
    dead_epoch: AtomicU64,
    entries: Box<[RouteEntry]>,
}

impl SBucket {
    pub(crate) fn new(capacity: usize, init: &[(Key, *mut Node)]) -> Self {
        assert!(capacity <= 64 && init.len() <= capacity && !init.is_empty());
        let entries: Box<[RouteEntry]> = (0..capacity)
            .map(|i| match init.get(i) {
                Some(&(p, c)) => RouteEntry {
                    pivot: AtomicU64::new(p),
                    child: AtomicPtr::new(c),
                },
                None => RouteEntry {
                    pivot: AtomicU64::new(0),
                    child: AtomicPtr::new(std::ptr::null_mut()),
                },
            })
            .collect();
        let mask = if init.len() == 64 {
            u64::MAX
        } else {
            (1u64 << init.len()) - 1
        };
        let pivot = init.iter().map(|e| e.0).min().unwrap();
        Self {
            pivot: AtomicU64::new(pivot),
            valid: AtomicU64::new(mask),
            dead: AtomicU64::new(0),
            dead_epoch: AtomicU64::new(0),
            entries,
        }
    }

    pub fn capacity(&self) -> usize {
        self.entries.len()
    }

    #[inline]
    pub fn pivot(&self) -> Key {
        self.pivot.load(Ordering::Acquire)
    }

    pub fn valid_mask(&self) -> u64 {
        self.valid.load(Ordering::Acquire)
    }

    pub fn len(&self) -> usize {
        self.valid_mask().count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scan every valid entry; pick the largest pivot `<= key`, or the
    /// smallest pivot when `key` is below all of them.
    #[inline]
    pub fn lower_bound(&self, key: Key) -> RouteHit {
        let mut bits = self.valid.load(Ordering::Acquire);
        let mut best: Option<(usize, Key, *mut Node)> = None;
        let mut min: Option<(usize, Key, *mut Node)> = None;
        let mut above: Option<Key> = None;
        while bits != 0 {
            let i = bits.trailing_zeros() as usize;
            bits &= bits - 1;
            let e = &self.entries[i];
            let p = e.pivot.load(Ordering::Relaxed);
            let c = e.child.load(Ordering::Acquire);
            if p <= key {
                if best.is_none_or(|b| p > b.1) {
                    best = Some((i, p, c));
                }
            } else if above.is_none_or(|a| p < a) {
                above = Some(p);
            }
            if min.is_none_or(|m| p < m.1) {
                min = Some((i, p, c));
            }
        }
        let (slot, pivot, child) = best.or(min).expect("S-Bucket has no valid entry");
        // When falling back to the minimum, `above` may contain it.
        let next_pivot = if best.is_some() {
            above
        } else {
            self.next_after(pivot)
        };
        RouteHit {
            slot,
            pivot,
            child,
            next_pivot,
        }
    }

    fn next_after(&self, pivot: Key) -> Option<Key> {
        self.valid_entries()
            .into_iter()
            .map(|e| e.0)
            .filter(|&p| p > pivot)
            .min()
    }

    /// Valid `(pivot, child)` pairs in slot order.
    pub fn valid_entries(&self) -> Vec<(Key, *mut Node)> {
        let mut out = Vec::with_capacity(self.capacity());
        let mut bits = self.valid.load(Ordering::Acquire);
        while bits != 0 {
            let i = bits.trailing_zeros() as usize;
            bits &= bits - 1;
            let e = &self.entries[i];
            out.push((e.pivot.load(Ordering::Relaxed), e.child.load(Ordering::Acquire)));
        }
        out
    }

    /// Valid entries with their slot index, sorted by pivot.
    pub(crate) fn sorted_entries_with_slots(&self) -> Vec<(usize, Key, *mut Node)> {
        let mut out = Vec::with_capacity(self.capacity());
        let mut bits = self.valid.load(Ordering::Acquire);
        while bits != 0 {
            let i = bits.trailing_zeros() as usize;
            bits &= bits - 1;
            let e = &self.entries[i];
            out.push((i, e.pivot.load(Ordering::Relaxed), e.child.load(Ordering::Acquire)));
        }
        out.sort_unstable_by_key(|e| e.1);
        out
    }

    /// Slots that are neither valid nor awaiting a grace period (writer only).
    /// Dead slots whose grace period has passed are recycled first.
    pub(crate) fn free_mask(&self, epoch: u64) -> u64 {
        let dead = self.dead.load(Ordering::Relaxed);
        if dead != 0 && epoch >= self.dead_epoch.load(Ordering::Relaxed) + 2 {
            self.dead.store(0, Ordering::Relaxed);
        }
        let cap_mask = if self.capacity() == 64 {
            u64::MAX
        } else {
            (1u64 << self.capacity()) - 1
        };
        cap_mask & !self.valid.load(Ordering::Relaxed) & !self.dead.load(Ordering::Relaxed)
    }

    /// Write an entry into a free slot and publish it (writer only).
    pub(crate) fn publish(&self, slot: usize, pivot: Key, child: *mut Node) {
        debug_assert!(self.valid.load(Ordering::Relaxed) & (1 << slot) == 0);
        let e = &self.entries[slot];
        e.pivot.store(pivot, Ordering::Relaxed);
        e.child.store(child, Ordering::Relaxed);
        self.valid.fetch_or(1 << slot, Ordering::Release);
    }

    /// Clear an entry's valid bit (writer only). The slot stays unusable
    /// until two epochs after `epoch`.
    pub(crate) fn invalidate(&self, slot: usize, epoch: u64) {
        self.valid.fetch_and(!(1 << slot), Ordering::Release);
        self.dead.fetch_or(1 << slot, Ordering::Relaxed);
        self.dead_epoch.store(epoch, Ordering::Relaxed);
    }

    pub(crate) fn lower_entry_pivot(&self, slot: usize, key: Key) {
        let e = &self.entries[slot];
        if key < e.pivot.load(Ordering::Relaxed) {
            e.pivot.store(key, Ordering::Release);
        }
        if key < self.pivot.load(Ordering::Relaxed) {
            self.pivot.store(key, Ordering::Release);
        }
    }

    fn owned_bytes(&self) -> usize {
        self.entries.len() * std::mem::size_of::<RouteEntry>()
    }
}

/// Inner node: linear model over a sorted run of S-Buckets.
pub struct Segment {
    pub model: LinearModel,
    /// Height above the leaves; last-level Segments are 1.
    pub level: u32,
    smo_count: AtomicU32,
    pub sbuckets: Box<[SBucket]>,
}

impl Segment {
    pub(crate) fn new(model: LinearModel, level: u32, smo_count: u32, sbuckets: Vec<SBucket>) -> Self {
        assert!(!sbuckets.is_empty() && level >= 1);
        Self {
            model,
            level,
            smo_count: AtomicU32::new(smo_count),
            sbuckets: sbuckets.into_boxed_slice(),
        }
    }

    #[inline]
    pub fn pivot(&self) -> Key {
        self.sbuckets[0].pivot()
    }

    pub fn smo_count(&self) -> u32 {
        self.smo_count.load(Ordering::Relaxed)
    }

    /// All valid `(pivot, child)` pairs sorted by pivot. S-Buckets are
    /// mutually ordered, so sorting each one and concatenating is enough.
    pub fn sorted_entries(&self) -> Vec<(Key, *mut Node)> {
        let mut out = Vec::new();
        for sb in self.sbuckets.iter() {
            out.extend(sb.sorted_entries_with_slots().into_iter().map(|(_, p, c)| (p, c)));
        }
        out
    }

    pub fn entry_count(&self) -> usize {
        self.sbuckets.iter().map(SBucket::len).sum()
    }

    fn owned_bytes(&self) -> usize {
        self.sbuckets.len() * std::mem::size_of::<SBucket>()
            + self.sbuckets.iter().map(SBucket::owned_bytes).sum::<usize>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hints::HintKind;

    fn mod_bucket(cap: usize, pivot: Key) -> DBucket {
        DBucket::new(cap, pivot, HintFn::new(HintKind::Mod, pivot, 1 << 64))
    }

    #[test]
    fn figure_two_bucket() {
        let b = mod_bucket(4, 2187);
        assert_eq!(b.h_insert(2187, 1), InsertOutcome::Placed(3));
        assert_eq!(b.h_insert(2333, 2), InsertOutcome::Placed(1));
        assert_eq!(b.h_lookup(2333, true), (Some(2), 1));
        assert_eq!(b.len(), 2);
        assert_eq!(b.valid_population(), 2);
    }

    #[test]
    fn collisions_probe_forward() {
        let b = mod_bucket(8, 0);
        assert_eq!(b.h_insert(3, 0), InsertOutcome::Placed(3));
        assert_eq!(b.h_insert(11, 1), InsertOutcome::Placed(4));
        assert_eq!(b.h_insert(19, 2), InsertOutcome::Placed(5));
        assert_eq!(b.h_lookup(11, true), (Some(1), 2));
        assert_eq!(b.h_lookup(19, true), (Some(2), 3));
        // absent key whose hint slot is empty
        assert_eq!(b.h_lookup(1, true), (None, 1));
        // wraps around
        assert_eq!(b.h_insert(7, 3), InsertOutcome::Placed(7));
        assert_eq!(b.h_insert(15, 4), InsertOutcome::Placed(0));
        assert_eq!(b.h_lookup(15, true), (Some(4), 2));
    }

    #[test]
    fn full_bucket_rejects_and_overwrites() {
        let b = mod_bucket(4, 0);
        for k in 0..4 {
            assert!(matches!(b.h_insert(k, k), InsertOutcome::Placed(_)));
        }
        let before = b.entries();
        assert_eq!(b.h_insert(9, 9), InsertOutcome::BucketFull);
        assert_eq!(b.entries(), before);
        assert_eq!(b.h_insert(2, 42), InsertOutcome::Overwrote(2));
        assert_eq!(b.len(), 4);
        assert_eq!(b.h_lookup(2, true).0, Some(42));
        assert_eq!(b.h_lookup(9, false), (None, 4));
    }

    #[test]
    fn pivot_lowered_after_publish() {
        let b = mod_bucket(4, 100);
        b.h_insert(100, 0);
        b.h_insert(50, 1);
        assert_eq!(b.pivot(), 50);
        assert!(b.entries().iter().all(|e| e.key >= b.pivot()));
    }

    #[test]
    fn unpublished_slot_is_invisible() {
        let b = mod_bucket(4, 0);
        b.h_insert_inner(1, 5, false);
        assert_eq!(b.h_lookup(1, true).0, None);
        assert_eq!(b.len(), 0);
    }

    #[test]
    fn sbucket_lower_bound_unsorted() {
        let fake = |i: usize| (i * 8) as *mut Node;
        let sb = SBucket::new(8, &[(30, fake(3)), (10, fake(1)), (20, fake(2))]);
        assert_eq!(sb.pivot(), 10);
        let hit = sb.lower_bound(25);
        assert_eq!((hit.pivot, hit.child, hit.next_pivot), (20, fake(2), Some(30)));
        let hit = sb.lower_bound(5);
        assert_eq!((hit.pivot, hit.next_pivot), (10, Some(20)));
        let hit = sb.lower_bound(99);
        assert_eq!((hit.pivot, hit.next_pivot), (30, None));
    }

    #[test]
    fn sbucket_dead_slots_wait_two_epochs() {
        let fake = |i: usize| (i * 8) as *mut Node;
        let sb = SBucket::new(4, &[(1, fake(1)), (2, fake(2))]);
        assert_eq!(sb.free_mask(0), 0b1100);
        sb.invalidate(1, 5);
        assert_eq!(sb.free_mask(5), 0b1100);
        assert_eq!(sb.free_mask(6), 0b1100);
        assert_eq!(sb.free_mask(7), 0b1110);
        sb.publish(1, 3, fake(3));
        assert_eq!(sb.len(), 2);
    }
}
