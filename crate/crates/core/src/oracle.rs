//! Differential testing against an ordered map, workload and dataset
//! generation, and keyset file I/O.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand::rngs::StdRng;
use rand_distr::{Distribution as _, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::Index;
use crate::model::{Entry, IndexConfig, Key, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Read(Key),
    Insert(Key, Value),
    Scan(Key, usize),
}

/// A reproducible sequence of operations over an initially bulk-loaded index.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Workload {
    pub seed: u64,
    /// Reads : writes.
    pub ratio: (u32, u32),
    /// Sorted pairs loaded before the first op.
    pub bulk: Vec<Entry>,
    pub ops: Vec<Op>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    Uniform,
    Lognormal,
    #[serde(rename = "piecewise")]
    PiecewiseLinear,
}

impl Distribution {
    pub const ALL: [Distribution; 3] = [Self::PiecewiseLinear, Self::Uniform, Self::Lognormal];
}

impl std::str::FromStr for Distribution {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(Self::Uniform),
            "lognormal" => Ok(Self::Lognormal),
            "piecewise" | "piecewiselinear" | "piecewise-linear" => Ok(Self::PiecewiseLinear),
            other => Err(Error::InvalidConfig(format!("unknown distribution {other:?}"))),
        }
    }
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::Lognormal => "lognormal",
            Self::PiecewiseLinear => "piecewise",
        })
    }
}

/// The eleven read:write ratios 0:10, 1:9, ..., 10:0.
pub fn standard_ratios() -> Vec<(u32, u32)> {
    (0..=10).map(|r| (r, 10 - r)).collect()
}

/// Parse `R:W`.
pub fn parse_ratio(s: &str) -> Result<(u32, u32)> {
    let bad = || Error::InvalidConfig(format!("ratio must be R:W, got {s:?}"));
    let (r, w) = s.split_once(':').ok_or_else(bad)?;
    let r: u32 = r.trim().parse().map_err(|_| bad())?;
    let w: u32 = w.trim().parse().map_err(|_| bad())?;
    if r == 0 && w == 0 {
        return Err(bad());
    }
    Ok((r, w))
}

/// Sorted, unique keys drawn from `kind`; the same `(kind, n, seed)` always
/// gives the same array.
pub fn gen_synthetic(kind: Distribution, n: usize, seed: u64) -> Vec<Key> {
    let mut rng = StdRng::seed_from_u64(seed ^ (kind as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut keys: Vec<Key> = Vec::with_capacity(n);
    match kind {
        Distribution::Uniform => {
            while keys.len() < n {
                keys.extend((0..n - keys.len()).map(|_| rng.gen_range(0..1u64 << 62)));
                keys.sort_unstable();
                keys.dedup();
            }
        }
        Distribution::Lognormal => {
            let d = LogNormal::new(0.0f64, 2.0).unwrap();
            while keys.len() < n {
                keys.extend((0..n - keys.len()).map(|_| (d.sample(&mut rng) * 1e6).min(1e18) as Key));
                keys.sort_unstable();
                keys.dedup();
            }
        }
        Distribution::PiecewiseLinear => {
            // Two contiguous runs of evenly spaced keys whose spacing differs
            // by 5-15%.
            let mut next: Key = rng.gen_range(0..1 << 20);
            let mut gap: f64 = rng.gen_range(256.0..4096.0);
            for p in 0..2 {
                let count = n * (p + 1) / 2 - n * p / 2;
                let g = gap.round() as Key;
                keys.extend((0..count as Key).map(|i| next + i * g));
                next += count as Key * g;
                gap *= 1.0 + rng.gen_range(0.05..0.15);
            }
        }
    }
    keys
}

/// Build a workload: `bulk` keys are loaded first, the rest of `keys` are
/// inserted in random order by the write ops. Reads hit a previously
/// inserted key nine times out of ten; every hundredth read is a short scan.
pub fn gen_workload(keys: &[Key], bulk: usize, ops: usize, ratio: (u32, u32), seed: u64) -> Workload {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut pool: Vec<Key> = keys.to_vec();
    pool.shuffle(&mut rng);
    let bulk = bulk.min(pool.len());
    let mut loaded: Vec<Key> = pool[..bulk].to_vec();
    loaded.sort_unstable();
    let bulk_pairs: Vec<Entry> = loaded.iter().map(|&k| Entry::new(k, k.wrapping_mul(31))).collect();
    let mut present: Vec<Key> = pool[..bulk].to_vec();
    let mut fresh = pool[bulk..].iter().copied();
    let total = u64::from(ratio.0 + ratio.1);
    let mut out = Vec::with_capacity(ops);
    for i in 0..ops {
        let is_read = rng.gen_range(0..total) < u64::from(ratio.0);
        if is_read {
            let k = if !present.is_empty() && rng.gen_range(0..10) != 0 {
                present[rng.gen_range(0..present.len())]
            } else {
                rng.gen()
            };
            if rng.gen_range(0..100) == 0 {
                out.push(Op::Scan(k, rng.gen_range(1..=100)));
            } else {
                out.push(Op::Read(k));
            }
        } else {
            let v = (i as Value) << 1 | 1;
            match fresh.next() {
                Some(k) => {
                    present.push(k);
                    out.push(Op::Insert(k, v));
                }
                None if !present.is_empty() => out.push(Op::Insert(present[rng.gen_range(0..present.len())], v)),
                None => {
                    let k = rng.gen();
                    present.push(k);
                    out.push(Op::Insert(k, v));
                }
            }
        }
    }
    Workload {
        seed,
        ratio,
        bulk: bulk_pairs,
        ops: out,
    }
}

/// First point where the index and the reference map disagree.
#[derive(Clone, Debug, PartialEq)]
pub struct Divergence {
    pub op_index: usize,
    pub op: Op,
    pub expected: String,
    pub actual: String,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "op {} {:?}: expected {}, got {}",
            self.op_index, self.op, self.expected, self.actual
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CheckSummary {
    pub reads: usize,
    pub inserts: usize,
    pub scans: usize,
}

/// Replay `trace` against a fresh index and a `BTreeMap`; stop at the first
/// mismatch. Final sizes are compared as well.
pub fn differential_check(trace: &Workload, cfg: IndexConfig) -> Result<std::result::Result<CheckSummary, Divergence>> {
    differential_check_with(trace, cfg, None)
}

/// Like [`differential_check`], optionally skipping the valid bit of the
/// n-th new-key insert. Used to show the check catches lost publications.
pub fn differential_check_with(
    trace: &Workload,
    cfg: IndexConfig,
    skip_publish: Option<u64>,
) -> Result<std::result::Result<CheckSummary, Divergence>> {
    let idx = Index::bulk_load(&trace.bulk, cfg)?;
    if let Some(n) = skip_publish {
        idx.inject_skip_publish(n);
    }
    let mut oracle: BTreeMap<Key, Value> = trace.bulk.iter().map(|e| (e.key, e.value)).collect();
    let reader = idx.reader();
    let mut sum = CheckSummary::default();
    for (i, &op) in trace.ops.iter().enumerate() {
        let diverged = |expected: String, actual: String| Divergence {
            op_index: i,
            op,
            expected,
            actual,
        };
        match op {
            Op::Read(k) => {
                sum.reads += 1;
                let (want, got) = (oracle.get(&k).copied(), reader.get(k));
                if want != got {
                    return Ok(Err(diverged(format!("{want:?}"), format!("{got:?}"))));
                }
            }
            Op::Insert(k, v) => {
                sum.inserts += 1;
                idx.insert(k, v);
                oracle.insert(k, v);
            }
            Op::Scan(k, n) => {
                sum.scans += 1;
                let want: Vec<Entry> = oracle.range(k..).take(n).map(|(&k, &v)| Entry::new(k, v)).collect();
                let got = reader.range(k, n);
                if want != got {
                    return Ok(Err(diverged(format!("{} pairs {:?}..", want.len(), want.first()), format!("{} pairs {:?}..", got.len(), got.first()))));
                }
            }
        }
    }
    drop(reader);
    if idx.len() != oracle.len() {
        return Ok(Err(Divergence {
            op_index: trace.ops.len(),
            op: Op::Scan(0, usize::MAX),
            expected: format!("len {}", oracle.len()),
            actual: format!("len {}", idx.len()),
        }));
    }
    Ok(Ok(sum))
}

/// Sort and deduplicate raw keys for bulk loading.
pub fn prepare_keys(mut keys: Vec<Key>) -> Vec<Key> {
    keys.sort_unstable();
    keys.dedup();
    keys
}

/// Read a keyset file: 8-byte little-endian count, then that many 8-byte
/// little-endian keys.
pub fn load_keyset(path: impl AsRef<Path>) -> Result<Vec<Key>> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    parse_keyset(&buf)
}

pub fn parse_keyset(buf: &[u8]) -> Result<Vec<Key>> {
    if buf.len() < 8 {
        return Err(Error::Format(format!("{} bytes, header needs 8", buf.len())));
    }
    let count = u64::from_le_bytes(buf[..8].try_into().unwrap());
    let body = &buf[8..];
    if !body.len().is_multiple_of(8) {
        return Err(Error::Format(format!("body length {} is not a multiple of 8", body.len())));
    }
    if (body.len() / 8) as u64 != count {
        return Err(Error::Format(format!("header says {count} keys, body holds {}", body.len() / 8)));
    }
    Ok(body.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn save_keyset(keys: &[Key], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&(keys.len() as u64).to_le_bytes())?;
    for k in keys {
        w.write_all(&k.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}
