//! Bottom-up, single-pass construction from sorted pairs.
//!
//! Leaves get `floor(C_d * f)` consecutive pairs each. Every upper level runs
//! the corridor segmentation over the `(pivot, child)` list of the level below
//! and packs each cut into one Segment, until a single root remains.

use crate::error::{Error, Result};
use crate::hints::HintFn;
use crate::index::Index;
use crate::model::{Entry, IndexConfig, Key};
use crate::node::{alloc, DBucket, Node, SBucket, Segment};
use crate::segmentation::{fit_segment_model, greedy_corridor};

/// Instrumentation for one bulk load.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BulkLoadStats {
    /// Input pairs read while filling leaves.
    pub leaf_entry_reads: u64,
    /// Node count per level, leaves first.
    pub level_sizes: Vec<usize>,
}

/// Pack sorted `(pivot, child)` entries into one fresh Segment:
/// `ceil(n / (f C_s))` S-Buckets filled evenly in order, then a least-squares
/// model from pivot to S-Bucket index.
pub(crate) fn build_segment(entries: &[(Key, *mut Node)], level: u32, smo_count: u32, cfg: &IndexConfig) -> *mut Node {
    let n = entries.len();
    assert!(n > 0);
    let m = cfg.sbuckets_for(n);
    let mut sbuckets = Vec::with_capacity(m);
    let mut bucket_of = Vec::with_capacity(n);
    for i in 0..m {
        let (lo, hi) = (i * n / m, (i + 1) * n / m);
        sbuckets.push(SBucket::new(cfg.sbucket_capacity, &entries[lo..hi]));
        bucket_of.extend(std::iter::repeat_n(i, hi - lo));
    }
    let pivots: Vec<Key> = entries.iter().map(|e| e.0).collect();
    let model = fit_segment_model(&pivots, &bucket_of);
    alloc(Node::Inner(Segment::new(model, level, smo_count, sbuckets)))
}

/// One Segment per corridor cut over the entries' pivots.
pub(crate) fn build_level(entries: &[(Key, *mut Node)], level: u32, smo_count: u32, cfg: &IndexConfig) -> Vec<(Key, *mut Node)> {
    let pivots: Vec<Key> = entries.iter().map(|e| e.0).collect();
    greedy_corridor(&pivots, cfg.corridor_error)
        .into_iter()
        .map(|cut| {
            let seg = build_segment(&entries[cut.start..cut.end], level, smo_count, cfg);
            (pivots[cut.start], seg)
        })
        .collect()
}

/// Build upper levels over `entries` (whose nodes sit at `child_level`) until
/// one node remains; returns it.
pub(crate) fn build_up(mut entries: Vec<(Key, *mut Node)>, child_level: u32, cfg: &IndexConfig, sizes: Option<&mut Vec<usize>>) -> *mut Node {
    let mut sizes = sizes;
    let mut level = child_level;
    while entries.len() > 1 || level == 0 {
        level += 1;
        entries = build_level(&entries, level, 0, cfg);
        if let Some(s) = sizes.as_deref_mut() {
            s.push(entries.len());
        }
    }
    entries[0].1
}

pub(crate) fn check_sorted(pairs: &[Entry]) -> Result<()> {
    match pairs.windows(2).position(|w| w[0].key >= w[1].key) {
        Some(i) => Err(Error::UnsortedInput(i + 1)),
        None => Ok(()),
    }
}

/// Bulk load strictly increasing pairs. Empty input yields an empty index.
pub fn bulk_load(pairs: &[Entry], cfg: IndexConfig) -> Result<(Index, BulkLoadStats)> {
    cfg.validate()?;
    check_sorted(pairs)?;
    let mut stats = BulkLoadStats::default();
    if pairs.is_empty() {
        return Ok((Index::from_root(std::ptr::null_mut(), cfg, 0), stats));
    }
    let per = cfg.dbucket_fill();
    let chunks: Vec<&[Entry]> = pairs.chunks(per).collect();
    let mut leaves = Vec::with_capacity(chunks.len());
    for (i, chunk) in chunks.iter().enumerate() {
        let pivot = chunk[0].key;
        let hi = chunks.get(i + 1).map_or(1u128 << 64, |c| u128::from(c[0].key));
        let b = DBucket::new(cfg.dbucket_capacity, pivot, HintFn::new(cfg.hint_kind, pivot, hi));
        for e in chunk.iter() {
            stats.leaf_entry_reads += 1;
            b.h_insert(e.key, e.value);
        }
        leaves.push((pivot, alloc(Node::Leaf(b))));
    }
    stats.level_sizes.push(leaves.len());
    let root = build_up(leaves, 0, &cfg, Some(&mut stats.level_sizes));
    Ok((Index::from_root(root, cfg, pairs.len()), stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hints::HintKind;

    fn pairs(keys: impl IntoIterator<Item = Key>) -> Vec<Entry> {
        keys.into_iter().map(|k| Entry::new(k, k ^ 0xABCD)).collect()
    }

    #[test]
    fn hundred_pairs_thirteen_buckets() {
        let cfg = IndexConfig {
            dbucket_capacity: 16,
            initial_fill_ratio: 0.5,
            ..IndexConfig::default()
        };
        let (idx, stats) = bulk_load(&pairs(0..100), cfg).unwrap();
        assert_eq!(stats.level_sizes[0], 13);
        assert_eq!(stats.leaf_entry_reads, 100);
        let sizes = idx.dbucket_sizes();
        assert_eq!(sizes.len(), 13);
        assert!(sizes[..12].iter().all(|&s| s == 8));
        assert_eq!(sizes[12], 4);
        for k in 0..100 {
            assert_eq!(idx.get(k), Some(k ^ 0xABCD));
        }
    }

    #[test]
    fn empty_input() {
        let (idx, stats) = bulk_load(&[], IndexConfig::default()).unwrap();
        assert_eq!(idx.height(), 0);
        assert_eq!(idx.get(5), None);
        assert!(stats.level_sizes.is_empty());
    }

    #[test]
    fn rejects_unsorted_and_duplicates() {
        assert!(matches!(
            bulk_load(&pairs([1, 3, 2]), IndexConfig::default()),
            Err(Error::UnsortedInput(2))
        ));
        assert!(bulk_load(&pairs([1, 1]), IndexConfig::default()).is_err());
    }

    #[test]
    fn collinear_pivots_single_segment() {
        let cfg = IndexConfig::default();
        let leaves: Vec<(Key, *mut Node)> = (0..500u64)
            .map(|i| {
                let b = DBucket::new(4, i * 10, HintFn::new(HintKind::Mod, i * 10, 1 << 64));
                (i * 10, alloc(Node::Leaf(b)))
            })
            .collect();
        let out = build_level(&leaves, 1, 0, &cfg);
        assert_eq!(out.len(), 1);
        let root = build_up(out, 1, &cfg, None);
        let idx = Index::from_root(root, cfg, 0);
        assert_eq!(idx.height(), 1);
    }

    #[test]
    fn single_entry_level() {
        let cfg = IndexConfig::default();
        let b = DBucket::new(4, 7, HintFn::new(HintKind::Mod, 7, 1 << 64));
        let out = build_level(&[(7, alloc(Node::Leaf(b)))], 1, 0, &cfg);
        assert_eq!(out.len(), 1);
        let s = unsafe { (*out[0].1).as_segment().unwrap() };
        assert_eq!((s.model.slope, s.model.intercept), (0.0, 0.0));
        drop(Index::from_root(out[0].1, cfg, 0));
    }
}
