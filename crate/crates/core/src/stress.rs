//! One writer, many readers: safety and visibility checks under real
//! concurrency, plus a read-only scaling probe.

use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use rand::prelude::*;
use rand::rngs::StdRng;

use crate::index::Index;
use crate::model::{Entry, IndexConfig, Key, Value};
use crate::oracle::{gen_synthetic, Distribution};

/// The value stored for `k`; readers use it to detect fabricated results.
#[inline]
pub fn value_of(k: Key) -> Value {
    k.rotate_left(17) ^ 0x5DEE_CE66_D1CE_4E5B
}

#[derive(Clone, Debug)]
pub struct StressParams {
    pub bulk: usize,
    pub inserts: usize,
    pub readers: usize,
    /// Keys whose visibility is tracked across all readers.
    pub tracked: usize,
    pub seed: u64,
    pub cfg: IndexConfig,
}

impl Default for StressParams {
    fn default() -> Self {
        Self {
            bulk: 10_000,
            inserts: 100_000,
            readers: 7,
            tracked: 10_000,
            seed: 1,
            cfg: IndexConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct StressReport {
    pub inserted: usize,
    pub reads: u64,
    /// A key whose insert had completed before the probe was not found.
    pub missing_completed: u64,
    /// A lookup returned a value never written for that key.
    pub fabricated: u64,
    /// A tracked key was seen by some reader and later not found.
    pub visibility_regressions: u64,
    /// Range results out of order, duplicated, or fabricated.
    pub bad_scans: u64,
    pub elapsed: Duration,
    pub retired: u64,
    pub reclaimed: u64,
}

impl StressReport {
    pub fn clean(&self) -> bool {
        self.missing_completed == 0 && self.fabricated == 0 && self.visibility_regressions == 0 && self.bad_scans == 0
    }
}

/// Bulk load `bulk` keys, then insert `inserts` more from one thread while
/// `readers` threads probe completed, pending, absent and tracked keys.
pub fn run_spmc(p: &StressParams) -> StressReport {
    let keys = gen_synthetic(Distribution::Uniform, p.bulk + p.inserts, p.seed);
    let mut rng = StdRng::seed_from_u64(p.seed);
    let mut order = keys.clone();
    order.shuffle(&mut rng);
    let (pre, order) = order.split_at(p.bulk);
    let mut pre = pre.to_vec();
    pre.sort_unstable();
    let pairs: Vec<Entry> = pre.iter().map(|&k| Entry::new(k, value_of(k))).collect();
    let idx = Index::bulk_load(&pairs, p.cfg.clone()).expect("valid config");
    let pre = &pre[..];
    let done = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let tracked = p.tracked.min(order.len());
    let stride = order.len().checked_div(tracked).unwrap_or(1).max(1);
    let seen: Vec<AtomicBool> = (0..tracked).map(|_| AtomicBool::new(false)).collect();
    let reads = AtomicU64::new(0);
    let missing = AtomicU64::new(0);
    let fabricated = AtomicU64::new(0);
    let regressions = AtomicU64::new(0);
    let bad_scans = AtomicU64::new(0);
    let start = Instant::now();

    std::thread::scope(|s| {
        s.spawn(|| {
            for (i, &k) in order.iter().enumerate() {
                idx.insert(k, value_of(k));
                done.store(i + 1, Ordering::Release);
            }
            stop.store(true, Ordering::Release);
        });
        for r in 0..p.readers {
            let (idx, done, stop, seen) = (&idx, &done, &stop, &seen);
            let (reads, missing, fabricated, regressions, bad_scans) = (&reads, &missing, &fabricated, &regressions, &bad_scans);
            let seed = p.seed.wrapping_add(r as u64 + 1);
            s.spawn(move || {
                let mut rng = StdRng::seed_from_u64(seed);
                let reader = idx.reader();
                let check = |k: Key, got: Option<Value>| {
                    if got.is_some_and(|v| v != value_of(k)) {
                        fabricated.fetch_add(1, Ordering::Relaxed);
                    }
                };
                let mut n = 0u64;
                while !stop.load(Ordering::Acquire) {
                    n += 1;
                    match rng.gen_range(0..100) {
                        0..=39 => {
                            let d = done.load(Ordering::Acquire);
                            let k = if d > 0 && (pre.is_empty() || rng.gen_bool(0.8)) {
                                order[rng.gen_range(0..d)]
                            } else if !pre.is_empty() {
                                pre[rng.gen_range(0..pre.len())]
                            } else {
                                continue;
                            };
                            let got = reader.get(k);
                            if got.is_none() {
                                missing.fetch_add(1, Ordering::Relaxed);
                            }
                            check(k, got);
                        }
                        40..=59 => {
                            let k = order[rng.gen_range(0..order.len())];
                            check(k, reader.get(k));
                        }
                        60..=69 => {
                            // Almost surely absent.
                            let k: Key = rng.gen::<u64>() | 1 << 63;
                            if reader.get(k).is_some() {
                                fabricated.fetch_add(1, Ordering::Relaxed);
                            }
                        }
                        70..=98 if tracked > 0 => {
                            let t = rng.gen_range(0..tracked);
                            let k = order[t * stride];
                            let was_seen = seen[t].load(Ordering::Acquire);
                            let got = reader.get(k);
                            check(k, got);
                            match got {
                                Some(_) => seen[t].store(true, Ordering::Release),
                                None if was_seen => {
                                    regressions.fetch_add(1, Ordering::Relaxed);
                                }
                                None => {}
                            }
                        }
                        _ => {
                            let k = order[rng.gen_range(0..order.len())];
                            let out = reader.range(k, 64);
                            let sorted = out.windows(2).all(|w| w[0].key < w[1].key);
                            let genuine = out.iter().all(|e| e.key >= k && e.value == value_of(e.key));
                            if !sorted || !genuine {
                                bad_scans.fetch_add(1, Ordering::Relaxed);
                            }
                        }
                    }
                }
                reads.fetch_add(n, Ordering::Relaxed);
            });
        }
    });
    let elapsed = start.elapsed();
    idx.try_advance_epoch();
    let rs = idx.reclaim_stats();
    StressReport {
        inserted: order.len(),
        reads: reads.into_inner(),
        missing_completed: missing.into_inner(),
        fabricated: fabricated.into_inner(),
        visibility_regressions: regressions.into_inner(),
        bad_scans: bad_scans.into_inner(),
        elapsed,
        retired: rs.retired,
        reclaimed: rs.reclaimed,
    }
}

/// Aggregate lookups per second of `threads` readers, each doing
/// `ops_per_thread` lookups on a shared bulk-loaded index.
pub fn read_throughput(idx: &Index, keys: &[Key], threads: usize, ops_per_thread: usize, seed: u64) -> f64 {
    let start = Instant::now();
    let found = AtomicU64::new(0);
    std::thread::scope(|s| {
        for t in 0..threads {
            let found = &found;
            s.spawn(move || {
                let mut rng = StdRng::seed_from_u64(seed + t as u64);
                let reader = idx.reader();
                let mut n = 0u64;
                for _ in 0..ops_per_thread {
                    n += reader.get(keys[rng.gen_range(0..keys.len())]).is_some() as u64;
                }
                found.fetch_add(n, Ordering::Relaxed);
            });
        }
    });
    let secs = start.elapsed().as_secs_f64();
    assert_eq!(found.into_inner(), (threads * ops_per_thread) as u64);
    (threads * ops_per_thread) as f64 / secs
}
