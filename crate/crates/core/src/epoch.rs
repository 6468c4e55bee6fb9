//! Epoch-based grace periods for memory retired by the single writer.
//!
//! Readers pin the current global epoch for the duration of one operation.
//! The writer retires unlinked nodes into one of three bags keyed by the
//! epoch at retirement. The global epoch only advances once every pinned
//! reader has observed it, so a bag becomes safe to free two advances after
//! it was filled.

use std::cell::Cell;
use std::marker::PhantomData;
use std::sync::atomic::{fence, AtomicBool, AtomicU64, Ordering};
use std::sync::Mutex;

/// Number of concurrently registered reader handles.
pub const MAX_PARTICIPANTS: usize = 256;

const PINNED: u64 = 1;

#[repr(align(64))]
struct Participant {
    claimed: AtomicBool,
    /// `(epoch << 1) | PINNED` while pinned, 0 otherwise.
    state: AtomicU64,
}

struct Deferred {
    ptr: *mut (),
    drop_fn: unsafe fn(*mut ()),
}

// SAFETY: a deferred item is an exclusively owned allocation that is only
// touched again by the thread running `drop_fn`.
unsafe impl Send for Deferred {}

impl Deferred {
    unsafe fn run(self) {
        (self.drop_fn)(self.ptr)
    }
}

#[derive(Default)]
struct Bags {
    bags: [Vec<Deferred>; 3],
}

/// Counters for tests and reports.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ReclaimStats {
    pub epoch: u64,
    pub retired: u64,
    pub reclaimed: u64,
}

impl ReclaimStats {
    pub fn pending(&self) -> u64 {
        self.retired - self.reclaimed
    }
}

pub struct Collector {
    global: AtomicU64,
    participants: Box<[Participant]>,
    garbage: Mutex<Bags>,
    retired: AtomicU64,
    reclaimed: AtomicU64,
}

impl Default for Collector {
    fn default() -> Self {
        Self::new()
    }
}

impl Collector {
    pub fn new() -> Self {
        let participants = (0..MAX_PARTICIPANTS)
            .map(|_| Participant {
                claimed: AtomicBool::new(false),
                state: AtomicU64::new(0),
            })
            .collect();
        Self {
            global: AtomicU64::new(0),
            participants,
            garbage: Mutex::new(Bags::default()),
            retired: AtomicU64::new(0),
            reclaimed: AtomicU64::new(0),
        }
    }

    pub fn epoch(&self) -> u64 {
        self.global.load(Ordering::Acquire)
    }

    pub fn stats(&self) -> ReclaimStats {
        ReclaimStats {
            epoch: self.epoch(),
            retired: self.retired.load(Ordering::Relaxed),
            reclaimed: self.reclaimed.load(Ordering::Relaxed),
        }
    }

    /// Claim a participant slot. Spins (yielding) while all slots are taken.
    pub fn register(&self) -> LocalHandle<'_> {
        let start = thread_hint() % MAX_PARTICIPANTS;
        loop {
            for i in 0..MAX_PARTICIPANTS {
                let idx = (start + i) % MAX_PARTICIPANTS;
                let p = &self.participants[idx];
                if !p.claimed.load(Ordering::Relaxed)
                    && p
                        .claimed
                        .compare_exchange(false, true, Ordering::Acquire, Ordering::Relaxed)
                        .is_ok()
                {
                    return LocalHandle {
                        collector: self,
                        idx,
                        depth: Cell::new(0),
                        _not_sync: PhantomData,
                    };
                }
            }
            std::thread::yield_now();
        }
    }

    /// Defer dropping `ptr` (a leaked `Box<T>`) until no reader can hold it.
    ///
    /// # Safety
    /// `ptr` must come from `Box::into_raw`, must already be unreachable for
    /// readers that pin after this call, and must not be retired twice.
    pub unsafe fn retire<T: Send>(&self, ptr: *mut T) {
        unsafe fn drop_box<T>(p: *mut ()) {
            drop(Box::from_raw(p as *mut T));
        }
        let item = Deferred {
            ptr: ptr as *mut (),
            drop_fn: drop_box::<T>,
        };
        let epoch = self.global.load(Ordering::Relaxed);
        let mut g = self.garbage.lock().unwrap();
        g.bags[(epoch % 3) as usize].push(item);
        self.retired.fetch_add(1, Ordering::Relaxed);
    }

    /// Try to move the global epoch forward and free whatever became safe.
    /// Returns true if the epoch advanced.
    pub fn try_advance(&self) -> bool {
        fence(Ordering::SeqCst);
        let epoch = self.global.load(Ordering::Relaxed);
        let mut any_pinned = false;
        for p in self.participants.iter() {
            let s = p.state.load(Ordering::Acquire);
            if s & PINNED != 0 {
                any_pinned = true;
                if s >> 1 != epoch {
                    return false;
                }
            }
        }
        let next = epoch + 1;
        self.global.store(next, Ordering::Release);

        let mut g = self.garbage.lock().unwrap();
        let freed: Vec<Deferred> = if any_pinned {
            // Items retired at `next - 3`, i.e. two full advances ago.
            std::mem::take(&mut g.bags[(next % 3) as usize])
        } else {
            // Nobody is inside a read-side critical section: everything
            // retired so far is unreachable for future readers.
            g.bags.iter_mut().flat_map(std::mem::take).collect()
        };
        drop(g);
        self.free(freed);
        true
    }

    fn free(&self, items: Vec<Deferred>) {
        let n = items.len() as u64;
        for item in items {
            // SAFETY: guaranteed by the grace period (see `retire`).
            unsafe { item.run() };
        }
        self.reclaimed.fetch_add(n, Ordering::Relaxed);
    }

    /// Number of readers currently pinned.
    pub fn pinned_readers(&self) -> usize {
        self.participants
            .iter()
            .filter(|p| p.state.load(Ordering::Relaxed) & PINNED != 0)
            .count()
    }
}

impl Drop for Collector {
    fn drop(&mut self) {
        let g = self.garbage.get_mut().unwrap();
        let items: Vec<Deferred> = g.bags.iter_mut().flat_map(std::mem::take).collect();
        self.free(items);
    }
}

fn thread_hint() -> usize {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    std::thread::current().id().hash(&mut h);
    h.finish() as usize
}

/// A registered reader. Not `Sync`; one per thread.
pub struct LocalHandle<'c> {
    collector: &'c Collector,
    idx: usize,
    depth: Cell<u32>,
    _not_sync: PhantomData<Cell<()>>,
}

impl<'c> LocalHandle<'c> {
    pub fn collector(&self) -> &'c Collector {
        self.collector
    }

    pub fn pin(&self) -> Guard<'_, 'c> {
        let d = self.depth.get();
        if d == 0 {
            let p = &self.collector.participants[self.idx];
            let epoch = self.collector.global.load(Ordering::Acquire);
            p.state.store((epoch << 1) | PINNED, Ordering::Relaxed);
            fence(Ordering::SeqCst);
        }
        self.depth.set(d + 1);
        Guard { handle: self }
    }

    pub fn is_pinned(&self) -> bool {
        self.depth.get() > 0
    }
}

impl Drop for LocalHandle<'_> {
    fn drop(&mut self) {
        let p = &self.collector.participants[self.idx];
        p.state.store(0, Ordering::Release);
        p.claimed.store(false, Ordering::Release);
    }
}

/// Keeps the pinned epoch alive; nodes reachable while it lives stay valid.
pub struct Guard<'h, 'c> {
    handle: &'h LocalHandle<'c>,
}

impl Drop for Guard<'_, '_> {
    fn drop(&mut self) {
        let d = self.handle.depth.get() - 1;
        self.handle.depth.set(d);
        if d == 0 {
            let p = &self.handle.collector.participants[self.handle.idx];
            p.state.store(0, Ordering::Release);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;
    use std::sync::Arc;

    struct Tracked(Arc<AtomicUsize>);

    impl Drop for Tracked {
        fn drop(&mut self) {
            self.0.fetch_add(1, Ordering::SeqCst);
        }
    }

    fn retire_one(c: &Collector, drops: &Arc<AtomicUsize>) {
        let p = Box::into_raw(Box::new(Tracked(drops.clone())));
        unsafe { c.retire(p) };
    }

    #[test]
    fn no_readers_reclaims_on_next_tick() {
        let c = Collector::new();
        let drops = Arc::new(AtomicUsize::new(0));
        for _ in 0..10 {
            retire_one(&c, &drops);
        }
        assert_eq!(drops.load(Ordering::SeqCst), 0);
        assert!(c.try_advance());
        assert_eq!(drops.load(Ordering::SeqCst), 10);
        assert_eq!(c.stats().pending(), 0);
    }

    #[test]
    fn stalled_reader_blocks_reclamation() {
        let c = Collector::new();
        let drops = Arc::new(AtomicUsize::new(0));
        let h = c.register();
        let g = h.pin();
        retire_one(&c, &drops);
        // The reader pinned the current epoch, so one advance is allowed.
        assert!(c.try_advance());
        for _ in 0..100 {
            retire_one(&c, &drops);
            assert!(!c.try_advance());
        }
        assert_eq!(drops.load(Ordering::SeqCst), 0);
        assert_eq!(c.stats().pending(), 101);
        drop(g);
        assert!(c.try_advance());
        assert_eq!(drops.load(Ordering::SeqCst), 101);
    }

    #[test]
    fn pinned_reader_at_current_epoch_delays_by_two_advances() {
        let c = Collector::new();
        let drops = Arc::new(AtomicUsize::new(0));
        let h = c.register();
        retire_one(&c, &drops); // epoch 0
        let mut freed_at = None;
        for step in 1..=5 {
            let _g = h.pin();
            assert!(c.try_advance());
            if freed_at.is_none() && drops.load(Ordering::SeqCst) == 1 {
                freed_at = Some(step);
            }
        }
        // bag 0 is emptied when advancing 2 -> 3
        assert_eq!(freed_at, Some(3));
    }

    #[test]
    fn nested_pins() {
        let c = Collector::new();
        let h = c.register();
        let g1 = h.pin();
        let g2 = h.pin();
        assert_eq!(c.pinned_readers(), 1);
        drop(g2);
        assert!(h.is_pinned());
        drop(g1);
        assert_eq!(c.pinned_readers(), 0);
    }

    #[test]
    fn slots_are_recycled() {
        let c = Collector::new();
        for _ in 0..(MAX_PARTICIPANTS * 3) {
            let h = c.register();
            drop(h.pin());
        }
        let hs: Vec<_> = (0..MAX_PARTICIPANTS).map(|_| c.register()).collect();
        assert_eq!(hs.len(), MAX_PARTICIPANTS);
    }

    #[test]
    fn drop_frees_pending() {
        let drops = Arc::new(AtomicUsize::new(0));
        {
            let c = Collector::new();
            let h = c.register();
            let _g = h.pin();
            retire_one(&c, &drops);
            retire_one(&c, &drops);
        }
        assert_eq!(drops.load(Ordering::SeqCst), 2);
    }
}
