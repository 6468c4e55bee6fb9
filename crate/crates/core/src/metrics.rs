//! Lookup/insert efficiency, memory overhead, fanout and time breakdown.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::index::{Index, SmoStats};

/// Probe distances at or above this land in the last histogram bin.
pub const PROBE_BINS: usize = 65;

/// `N / sum(t_i)`; `None` for an empty or zero-time sample.
pub fn compute_e_lookup(latencies: &[f64]) -> Option<f64> {
    let total: f64 = latencies.iter().sum();
    (!latencies.is_empty() && total > 0.0).then(|| latencies.len() as f64 / total)
}

/// `N / sum(t_insert_i - t_lookup_i)` over `(t_insert, t_lookup)` pairs.
pub fn compute_e_insert(pairs: &[(f64, f64)]) -> Option<f64> {
    let total: f64 = pairs.iter().map(|(ti, tl)| ti - tl).sum();
    (!pairs.is_empty() && total > 0.0).then(|| pairs.len() as f64 / total)
}

pub fn o_mem_ratio(total_bytes: usize, payload_bytes: usize) -> Result<f64> {
    if payload_bytes == 0 {
        return Err(Error::ZeroPayload);
    }
    Ok(total_bytes as f64 / payload_bytes as f64)
}

/// Bytes of every node reachable from the root over `payload_bytes`.
pub fn compute_o_mem(index: &Index, payload_bytes: usize) -> Result<f64> {
    o_mem_ratio(index.memory_bytes(), payload_bytes)
}

/// 16 bytes per stored pair.
pub fn payload_bytes(pairs: usize) -> usize {
    pairs * 16
}

/// Scoped wall-clock accumulators. One per thread; merge at report time.
#[derive(Clone, Debug)]
pub struct OpTimer {
    pub segment_lookup: Duration,
    pub dbucket_lookup: Duration,
    pub insert: Duration,
    pub mem_mgmt: Duration,
    pub gets: u64,
    pub puts: u64,
    pub probe_histogram: Vec<u64>,
    /// Per-get latency in seconds.
    pub get_latencies: Vec<f64>,
    /// Per-put `(t_insert, t_lookup)` in seconds.
    pub put_latencies: Vec<(f64, f64)>,
}

impl Default for OpTimer {
    fn default() -> Self {
        Self {
            segment_lookup: Duration::ZERO,
            dbucket_lookup: Duration::ZERO,
            insert: Duration::ZERO,
            mem_mgmt: Duration::ZERO,
            gets: 0,
            puts: 0,
            probe_histogram: vec![0; PROBE_BINS],
            get_latencies: Vec::new(),
            put_latencies: Vec::new(),
        }
    }
}

impl OpTimer {
    #[inline]
    pub fn now(&self) -> Instant {
        Instant::now()
    }

    pub fn record_get(&mut self, segment: Duration, dbucket: Duration, probes: usize) {
        self.segment_lookup += segment;
        self.dbucket_lookup += dbucket;
        self.gets += 1;
        self.probe_histogram[probes.min(PROBE_BINS - 1)] += 1;
        self.get_latencies.push((segment + dbucket).as_secs_f64());
    }

    /// `total` is the whole insert call, `mem_mgmt` the part spent splitting
    /// and in SMOs, `lookup` a same-key lookup timed just before.
    pub fn record_put(&mut self, total: Duration, mem_mgmt: Duration, lookup: Duration) {
        self.insert += total.saturating_sub(mem_mgmt);
        self.mem_mgmt += mem_mgmt;
        self.puts += 1;
        self.put_latencies.push((total.as_secs_f64(), lookup.as_secs_f64()));
    }

    pub fn merge(&mut self, other: &OpTimer) {
        self.segment_lookup += other.segment_lookup;
        self.dbucket_lookup += other.dbucket_lookup;
        self.insert += other.insert;
        self.mem_mgmt += other.mem_mgmt;
        self.gets += other.gets;
        self.puts += other.puts;
        for (a, b) in self.probe_histogram.iter_mut().zip(&other.probe_histogram) {
            *a += b;
        }
        self.get_latencies.extend_from_slice(&other.get_latencies);
        self.put_latencies.extend_from_slice(&other.put_latencies);
    }

    pub fn breakdown(&self) -> Breakdown {
        let pct = |a: Duration, b: Duration| {
            let t = (a + b).as_secs_f64();
            if t > 0.0 {
                (100.0 * a.as_secs_f64() / t, 100.0 * b.as_secs_f64() / t)
            } else {
                (0.0, 0.0)
            }
        };
        let (segment_lookup_pct, dbucket_lookup_pct) = pct(self.segment_lookup, self.dbucket_lookup);
        let (insert_pct, mem_mgmt_pct) = pct(self.insert, self.mem_mgmt);
        Breakdown {
            segment_lookup_pct,
            dbucket_lookup_pct,
            insert_pct,
            mem_mgmt_pct,
        }
    }
}

/// Percentages within each operation class: get (segment + D-Bucket lookup)
/// and put (insert + memory management). An empty class reports zeros.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Breakdown {
    pub segment_lookup_pct: f64,
    pub dbucket_lookup_pct: f64,
    pub insert_pct: f64,
    pub mem_mgmt_pct: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct LevelFanout {
    pub level: usize,
    /// `(children, segments with that many children)`, ascending.
    pub histogram: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct MetricsReport {
    pub ops: u64,
    pub seconds: f64,
    pub throughput: f64,
    pub e_lookup: Option<f64>,
    pub e_insert: Option<f64>,
    pub o_mem: f64,
    pub breakdown: Breakdown,
    pub fanout_histogram: Vec<LevelFanout>,
    pub probe_distance_histogram: Vec<u64>,
    pub smo: SmoStats,
    pub height: u32,
    pub len: usize,
}

impl MetricsReport {
    pub fn collect(index: &Index, timer: &OpTimer, ops: u64, elapsed: Duration) -> Self {
        let seconds = elapsed.as_secs_f64();
        let fanout_histogram = index
            .fanouts()
            .into_iter()
            .enumerate()
            .map(|(i, f)| {
                let mut h = BTreeMap::new();
                for c in f {
                    *h.entry(c).or_insert(0) += 1;
                }
                LevelFanout {
                    level: i + 1,
                    histogram: h.into_iter().collect(),
                }
            })
            .collect();
        Self {
            ops,
            seconds,
            throughput: if seconds > 0.0 { ops as f64 / seconds } else { 0.0 },
            e_lookup: compute_e_lookup(&timer.get_latencies),
            e_insert: compute_e_insert(&timer.put_latencies),
            o_mem: compute_o_mem(index, payload_bytes(index.len())).unwrap_or(f64::NAN),
            breakdown: timer.breakdown(),
            fanout_histogram,
            probe_distance_histogram: timer.probe_histogram.clone(),
            smo: index.smo_stats(),
            height: index.height(),
            len: index.len(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub const CSV_HEADER: &'static str = "ops,seconds,throughput,e_lookup,e_insert,o_mem,segment_lookup_pct,dbucket_lookup_pct,insert_pct,mem_mgmt_pct,dbucket_splits,combined_smos,resegments,merges,shifts_performed,height,len";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let b = &self.breakdown;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.ops,
            self.seconds,
            self.throughput,
            opt(self.e_lookup),
            opt(self.e_insert),
            self.o_mem,
            b.segment_lookup_pct,
            b.dbucket_lookup_pct,
            b.insert_pct,
            b.mem_mgmt_pct,
            self.smo.dbucket_splits,
            self.smo.combined_smos,
            self.smo.resegments,
            self.smo.merges,
            self.smo.shifts_performed,
            self.height,
            self.len
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Entry, IndexConfig};

    #[test]
    fn e_lookup_examples() {
        assert_eq!(compute_e_lookup(&[2.0, 2.0, 2.0]), Some(0.5));
        assert_eq!(compute_e_lookup(&[4.0]), Some(0.25));
        assert_eq!(compute_e_lookup(&[]), None);
    }

    #[test]
    fn e_insert_subtracts_lookup() {
        assert_eq!(compute_e_insert(&[(3.0, 1.0), (5.0, 1.0)]), Some(2.0 / 6.0));
        assert_eq!(compute_e_insert(&[]), None);
    }

    #[test]
    fn o_mem_example() {
        assert_eq!(o_mem_ratio(15, 10).unwrap(), 1.5);
        assert!(matches!(o_mem_ratio(1, 0), Err(Error::ZeroPayload)));
    }

    #[test]
    fn denser_fill_uses_less_memory() {
        let pairs: Vec<Entry> = (0..20_000u64).map(|k| Entry::new(k * 5, k)).collect();
        let o = |f: f64| {
            let cfg = IndexConfig {
                initial_fill_ratio: f,
                ..IndexConfig::default()
            };
            let idx = Index::bulk_load(&pairs, cfg).unwrap();
            compute_o_mem(&idx, payload_bytes(pairs.len())).unwrap()
        };
        assert!(o(1.0) < o(0.3));
    }

    #[test]
    fn breakdown_partitions() {
        let mut t = OpTimer::default();
        t.record_get(Duration::from_nanos(30), Duration::from_nanos(70), 1);
        let b = t.breakdown();
        assert!((b.segment_lookup_pct + b.dbucket_lookup_pct - 100.0).abs() < 0.1);
        assert_eq!((b.insert_pct, b.mem_mgmt_pct), (0.0, 0.0));
        t.record_put(Duration::from_nanos(100), Duration::from_nanos(25), Duration::from_nanos(10));
        let b = t.breakdown();
        assert!((b.insert_pct - 75.0).abs() < 1e-9);
    }

    #[test]
    fn csv_has_fixed_columns() {
        let r = MetricsReport::default();
        let cols = MetricsReport::CSV_HEADER.split(',').count();
        assert_eq!(r.csv_row().split(',').count(), cols);
    }
}
